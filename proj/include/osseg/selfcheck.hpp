#pragma once

// Finite-difference self-check suite: every differentiable op, the plain and
// cross-branch forward passes, and the three training losses, each reported
// per parameter group of a small three-class model.

#include <algorithm>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "osseg/gradcheck.hpp"
#include "osseg/mixer.hpp"
#include "osseg/model.hpp"
#include "osseg/trainer.hpp"

namespace osseg {

struct GradCheckGroup {
    std::string name;
    double max_rel_error = 0.0;
};

struct GradCheckSuiteResult {
    std::vector<GradCheckGroup> groups;
    double tolerance = 1e-3;

    std::vector<std::string> failures() const {
        std::vector<std::string> out;
        for (const auto& g : groups)
            if (!(g.max_rel_error < tolerance)) out.push_back(g.name);
        return out;
    }
    bool passed() const { return failures().empty(); }
};

inline ModelConfig selfcheck_model_config() {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.embed_dim = 8;
    cfg.backbone_channels = {4, 6, 8};
    cfg.pixel_channels = 6;
    cfg.ffn_dim = 12;
    return cfg;
}

namespace detail {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.storage()) v = u(rng);
    return t;
}

// Reduces a tensor-valued function to a scalar with fixed random weights so
// every output element contributes a distinct sensitivity.
inline ScalarFn project(std::function<Var(Graph&, const std::vector<Var>&)> f, std::uint64_t seed) {
    return [f = std::move(f), seed](Graph& g, const std::vector<Var>& v) {
        Var out = f(g, v);
        Rng rng(seed);
        Tensor w = uniform_tensor(g.shape(out), rng);
        return sum(mul(out, g.constant(w)));
    };
}

// "decoder.0.cross.q" -> "decoder.0.cross"; "query" stays as is.
inline std::string param_group(const std::string& name) {
    const auto dot = name.rfind('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
}

inline void add_param_groups(GradCheckSuiteResult& out, const std::string& prefix, const ModelParams& params,
                             const GradCheckResult& r) {
    std::map<std::string, double> worst;
    std::vector<std::string> order;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto group = param_group(params.name(i));
        if (!worst.count(group)) order.push_back(group);
        worst[group] = std::max(worst[group], r.rel_error[i]);
    }
    for (const auto& g : order) out.groups.push_back({prefix + "/" + g, worst[g]});
}

inline Image random_image(std::size_t h, std::size_t w, Rng& rng) {
    Image img(h, w);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : img.pixels) v = u(rng);
    return img;
}

inline LabelMap random_label(std::size_t h, std::size_t w, std::size_t n, Rng& rng) {
    LabelMap l(h, w);
    for (auto& v : l.ids) v = static_cast<std::uint8_t>(rng() % n);
    return l;
}

}  // namespace detail

inline void run_op_checks(GradCheckSuiteResult& out, std::uint64_t seed) {
    using detail::uniform_tensor;
    Rng rng(derive_seed(seed, "ops"));
    using Fn = std::function<Var(Graph&, const std::vector<Var>&)>;
    struct Case {
        const char* name;
        std::vector<Tensor> inputs;
        Fn f;
    };
    std::vector<Case> cases;
    cases.push_back({"add", {uniform_tensor({2, 3, 4}, rng), uniform_tensor({4}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return add(v[0], v[1]); }});
    cases.push_back({"mul", {uniform_tensor({3, 4}, rng), uniform_tensor({4}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return mul(v[0], v[1]); }});
    cases.push_back({"scale", {uniform_tensor({5}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return scale(v[0], -1.5); }});
    cases.push_back({"matmul", {uniform_tensor({3, 5}, rng), uniform_tensor({5, 2}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }});
    cases.push_back({"transpose", {uniform_tensor({3, 5}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return transpose(v[0]); }});
    cases.push_back({"reshape", {uniform_tensor({3, 4}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return reshape(v[0], {2, 6}); }});
    cases.push_back({"concat", {uniform_tensor({2, 3}, rng), uniform_tensor({2, 2}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return concat({v[0], v[1]}, 1); }});
    cases.push_back({"slice", {uniform_tensor({3, 6}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return slice_lastdim(v[0], 1, 4); }});
    cases.push_back({"relu", {uniform_tensor({4, 5}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return relu(v[0]); }});
    cases.push_back({"softmax", {uniform_tensor({3, 4}, rng, -3, 3)},
                     [](Graph& g, const std::vector<Var>& v) {
                         Tensor bias(Shape{3, 4});
                         bias[1] = kMaskedValue;
                         return softmax_lastdim(add(v[0], g.constant(bias)));
                     }});
    cases.push_back({"layernorm", {uniform_tensor({3, 6}, rng), uniform_tensor({6}, rng), uniform_tensor({6}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return layernorm_lastdim(v[0], v[1], v[2]); }});
    cases.push_back({"upsample", {uniform_tensor({2, 3, 4}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return bilinear_upsample2x(v[0]); }});
    cases.push_back({"conv2d", {uniform_tensor({2, 5, 5}, rng), uniform_tensor({3, 2, 3, 3}, rng), uniform_tensor({3}, rng)},
                     [](Graph&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], 2, 1); }});
    cases.push_back({"cross_entropy", {uniform_tensor({3, 2, 3}, rng, -2, 2)},
                     [](Graph&, const std::vector<Var>& v) {
                         static const std::vector<std::uint8_t> lab{0, 2, kIgnoreLabel, 1, 1, 0};
                         return cross_entropy_pixelwise(v[0], lab);
                     }});
    std::uint64_t k = 0;
    for (const auto& c : cases) {
        auto r = check_gradients(detail::project(c.f, derive_seed(seed, ++k)), c.inputs);
        out.groups.push_back({std::string("op/") + c.name, r.max_rel_error()});
    }
}

inline void run_model_checks(GradCheckSuiteResult& out, std::uint64_t seed) {
    const ModelConfig cfg = selfcheck_model_config();
    // Perturbed away from the symmetric init so every parameter matters.
    ModelParams params = init_params(cfg, seed);
    Rng rng(derive_seed(seed, "jitter"));
    std::normal_distribution<double> jitter(0.0, 0.1);
    for (std::size_t i = 0; i < params.size(); ++i)
        for (auto& v : params[i].storage()) v += jitter(rng);

    constexpr std::size_t kSize = 8;
    const Image source = detail::random_image(kSize, kSize, rng);
    const Image acceptor = detail::random_image(kSize, kSize, rng);
    const Image reference = detail::random_image(kSize, kSize, rng);
    const LabelMap label = detail::random_label(kSize, kSize, cfg.num_classes, rng);
    const Image pt_image = fda_stylize(source, reference, FdaConfig{0.25});
    // At 8x8 the image tokens collapse to a single key, which leaves the
    // cross-attention queries without gradient; the forward groups use 16x16.
    const Image wide = detail::random_image(2 * kSize, 2 * kSize, rng);
    const Image wide_cond = detail::random_image(2 * kSize, 2 * kSize, rng);

    // Intermediate sample labelled by the (frozen) model itself.
    const SampledClassSet classes = sample_classes(label, rng);
    const DomainSample donor{pt_image, label, DomainTag::kPseudoTarget};
    const DomainSample acc{acceptor, LabelMap(kSize, kSize, 0), DomainTag::kSource};
    const LabelMap pl = pseudo_label(cfg, params, acceptor, 0.0);
    const DomainSample inter = mix({donor, acc, &pl}, build_mask(label, classes));
    const AttentionBias bias = build_class_bias(cfg.num_classes, classes);

    std::vector<Tensor> inputs;
    for (std::size_t i = 0; i < params.size(); ++i) inputs.push_back(params[i]);
    GradCheckOptions opt;
    opt.step = 1e-5;
    opt.max_coords = 24;
    opt.seed = seed;

    auto check = [&](const std::string& prefix, const ScalarFn& f) {
        detail::add_param_groups(out, prefix, params, check_gradients(f, inputs, opt));
    };

    check("forward", detail::project(
                         [&](Graph& g, const std::vector<Var>& v) {
                             BoundParams p(params, v);
                             return forward(cfg, g, p, wide).logits;
                         },
                         derive_seed(seed, "forward")));
    check("forward_cross", detail::project(
                               [&](Graph& g, const std::vector<Var>& v) {
                                   BoundParams p(params, v);
                                   return forward_cross(cfg, g, p, wide, wide_cond, bias,
                                                        AttentionPairing::kOursPtToIntermediate)
                                       .logits;
                               },
                               derive_seed(seed, "forward_cross")));
    check("l_pt", [&](Graph& g, const std::vector<Var>& v) {
        BoundParams p(params, v);
        return cross_entropy_pixelwise(forward(cfg, g, p, pt_image).logits, label.ids);
    });
    check("l_idr", [&](Graph& g, const std::vector<Var>& v) {
        BoundParams p(params, v);
        return cross_entropy_pixelwise(forward(cfg, g, p, inter.image).logits, inter.label.ids);
    });
    check("l_cd", [&](Graph& g, const std::vector<Var>& v) {
        BoundParams p(params, v);
        const auto pt_trace = forward(cfg, p, g.constant(image_to_chw(pt_image)));
        const auto m_px = pixel_path(cfg, p, g.constant(image_to_chw(inter.image)));
        return cross_entropy_pixelwise(forward_cross_from(cfg, p, m_px, pt_trace, bias).logits, inter.label.ids);
    });
}

inline GradCheckSuiteResult run_gradcheck_suite(std::uint64_t seed = 0, double tolerance = 1e-3) {
    GradCheckSuiteResult out;
    out.tolerance = tolerance;
    run_op_checks(out, seed);
    run_model_checks(out, seed);
    return out;
}

}  // namespace osseg
