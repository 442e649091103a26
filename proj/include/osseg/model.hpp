#pragma once

// Query-based segmentation network.
//
//   backbone       three stride-2 3x3 conv + relu stages -> f_img at H/8
//   pixel decoder  upsample + conv with lateral 1x1 skips to H/2, then a
//                  final bilinear 2x -> e_pixel (C_e x H x W)
//   transformer    N class tokens initialised from the learned queries; each
//                  layer is pre-norm cross-attention to f_img, self-attention
//                  among tokens, and an FFN, all residual
//   prediction     logits = e_class^T x e_pixel  (N x H x W)
//
// In the cross-domain pass the token self-attention of the main branch is
// replaced by attention whose queries come from a conditioning branch, with an
// optional class-modulating bias.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "osseg/errors.hpp"
#include "osseg/image.hpp"
#include "osseg/mixer.hpp"
#include "osseg/rng.hpp"
#include "osseg/tensor.hpp"

namespace osseg {

enum class AttentionPairing { kNone, kOursPtToIntermediate, kVariantST, kVariantS };

inline const char* pairing_name(AttentionPairing p) {
    switch (p) {
        case AttentionPairing::kNone: return "none";
        case AttentionPairing::kOursPtToIntermediate: return "ours";
        case AttentionPairing::kVariantST: return "variant_st";
        case AttentionPairing::kVariantS: return "variant_s";
    }
    return "none";
}

inline AttentionPairing parse_pairing(const std::string& s) {
    if (s == "none" || s == "NONE") return AttentionPairing::kNone;
    if (s == "ours" || s == "OURS_PT_TO_INTERMEDIATE") return AttentionPairing::kOursPtToIntermediate;
    if (s == "variant_st" || s == "VARIANT_ST") return AttentionPairing::kVariantST;
    if (s == "variant_s" || s == "VARIANT_S") return AttentionPairing::kVariantS;
    throw ConfigError("unknown attention pairing '" + s + "'");
}

struct ModelConfig {
    std::size_t num_classes = 5;
    std::size_t embed_dim = 32;
    std::size_t decoder_layers = 2;
    std::size_t heads = 1;
    std::vector<std::size_t> backbone_channels{8, 16, 32};
    std::size_t pixel_channels = 16;
    std::size_t ffn_dim = 64;
    AttentionPairing attention_pairing = AttentionPairing::kNone;
    // Attention logits are not divided by sqrt(d) unless this is set.
    bool scaled_attention = false;

    void validate() const {
        if (num_classes < 1 || num_classes > 254) throw ConfigError("num_classes must be in [1, 254]");
        if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
            throw ConfigError("embed_dim must be a positive multiple of heads");
        }
        if (decoder_layers < 1) throw ConfigError("decoder_layers must be >= 1");
        if (backbone_channels.size() != 3) throw ConfigError("backbone_channels must list exactly 3 stages");
        for (auto c : backbone_channels)
            if (c == 0) throw ConfigError("backbone channels must be positive");
        if (pixel_channels == 0 || ffn_dim == 0) throw ConfigError("pixel_channels and ffn_dim must be positive");
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "num_classes = " << num_classes << '\n'
           << "embed_dim = " << embed_dim << '\n'
           << "decoder_layers = " << decoder_layers << '\n'
           << "heads = " << heads << '\n'
           << "backbone_channels = " << backbone_channels[0] << ',' << backbone_channels[1] << ','
           << backbone_channels[2] << '\n'
           << "pixel_channels = " << pixel_channels << '\n'
           << "ffn_dim = " << ffn_dim << '\n'
           << "attention_pairing = " << pairing_name(attention_pairing) << '\n'
           << "scaled_attention = " << (scaled_attention ? "true" : "false") << '\n';
        return os.str();
    }

    static ModelConfig from_text(const std::string& text) {
        ModelConfig c;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
            if (key == "num_classes") c.num_classes = std::stoul(value);
            else if (key == "embed_dim") c.embed_dim = std::stoul(value);
            else if (key == "decoder_layers") c.decoder_layers = std::stoul(value);
            else if (key == "heads") c.heads = std::stoul(value);
            else if (key == "pixel_channels") c.pixel_channels = std::stoul(value);
            else if (key == "ffn_dim") c.ffn_dim = std::stoul(value);
            else if (key == "attention_pairing") c.attention_pairing = parse_pairing(value);
            else if (key == "scaled_attention") c.scaled_attention = value == "true" || value == "1";
            else if (key == "backbone_channels") {
                c.backbone_channels.clear();
                std::istringstream vs(value);
                std::string part;
                while (std::getline(vs, part, ',')) c.backbone_channels.push_back(std::stoul(part));
            } else {
                throw ConfigError("unknown model config key '" + key + "'");
            }
        }
        c.validate();
        return c;
    }
};

// Named parameter tensors in a fixed order.
class ModelParams {
   public:
    std::size_t size() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Tensor& operator[](std::size_t i) { return tensors_[i]; }
    const Tensor& operator[](std::size_t i) const { return tensors_[i]; }

    std::size_t index(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ArgumentError("no parameter named '" + name + "'");
        return it->second;
    }
    Tensor& at(const std::string& name) { return tensors_[index(name)]; }
    const Tensor& at(const std::string& name) const { return tensors_[index(name)]; }

    void add(std::string name, Tensor t) {
        if (index_.count(name)) throw ArgumentError("duplicate parameter '" + name + "'");
        index_[name] = tensors_.size();
        names_.push_back(std::move(name));
        tensors_.push_back(std::move(t));
    }

    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.numel();
        return n;
    }

    bool all_finite() const {
        for (const auto& t : tensors_)
            for (double v : t.data())
                if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const ModelParams& o) const {
        if (names_ != o.names_) return false;
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            if (tensors_[i].shape() != o.tensors_[i].shape() || tensors_[i].storage() != o.tensors_[i].storage()) {
                return false;
            }
        }
        return true;
    }

   private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline std::string layer_prefix(std::size_t l) { return "decoder." + std::to_string(l) + "."; }

// Parameter shapes for a configuration, in canonical order.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& cfg) {
    cfg.validate();
    const auto& bc = cfg.backbone_channels;
    const std::size_t ce = cfg.embed_dim, pc = cfg.pixel_channels, n = cfg.num_classes;
    std::vector<std::pair<std::string, Shape>> s;
    std::size_t cin = 3;
    for (std::size_t i = 0; i < 3; ++i) {
        s.push_back({"backbone." + std::to_string(i) + ".weight", {bc[i], cin, 3, 3}});
        s.push_back({"backbone." + std::to_string(i) + ".bias", {bc[i]}});
        cin = bc[i];
    }
    s.push_back({"pixel.up1.weight", {pc, bc[2], 3, 3}});
    s.push_back({"pixel.up1.bias", {pc}});
    s.push_back({"pixel.lateral1.weight", {pc, bc[1], 1, 1}});
    s.push_back({"pixel.up2.weight", {ce, pc, 1, 1}});
    s.push_back({"pixel.up2.bias", {ce}});
    s.push_back({"pixel.lateral2.weight", {ce, bc[0], 1, 1}});
    s.push_back({"query", {n, ce}});
    for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
        const std::string p = layer_prefix(l);
        s.push_back({p + "cross_norm.gamma", {ce}});
        s.push_back({p + "cross_norm.beta", {ce}});
        s.push_back({p + "cross.q", {ce, ce}});
        s.push_back({p + "cross.k", {bc[2], ce}});
        s.push_back({p + "cross.v", {bc[2], ce}});
        s.push_back({p + "cross.o", {ce, ce}});
        s.push_back({p + "self_norm.gamma", {ce}});
        s.push_back({p + "self_norm.beta", {ce}});
        s.push_back({p + "self.q", {ce, ce}});
        s.push_back({p + "self.k", {ce, ce}});
        s.push_back({p + "self.v", {ce, ce}});
        s.push_back({p + "self.o", {ce, ce}});
        s.push_back({p + "ffn_norm.gamma", {ce}});
        s.push_back({p + "ffn_norm.beta", {ce}});
        s.push_back({p + "ffn.w1", {ce, cfg.ffn_dim}});
        s.push_back({p + "ffn.b1", {cfg.ffn_dim}});
        s.push_back({p + "ffn.w2", {cfg.ffn_dim, ce}});
        s.push_back({p + "ffn.b2", {ce}});
    }
    // No output shift: it would move every class logit equally.
    s.push_back({"out_norm.gamma", {ce}});
    return s;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// He-normal conv weights, 1/sqrt(fan_in) linear weights, unit-gamma norms,
// zero biases, unit-normal queries.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "init"));
    std::normal_distribution<double> normal(0.0, 1.0);
    ModelParams p;
    for (auto& [name, shape] : parameter_shapes(cfg)) {
        Tensor t(shape);
        if (name == "out_norm.gamma") {
            // Unit-scale initial logits: e_class rows have norm ~1.
            std::fill(t.storage().begin(), t.storage().end(), 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
        } else if (ends_with(name, ".gamma")) {
            std::fill(t.storage().begin(), t.storage().end(), 1.0);
        } else if (ends_with(name, ".bias") || ends_with(name, ".beta") || ends_with(name, ".b1") ||
                   ends_with(name, ".b2")) {
            // zero
        } else if (name == "query") {
            for (auto& v : t.storage()) v = normal(rng);
        } else {
            const bool conv = shape.size() == 4;
            const double fan_in = conv ? double(shape[1] * shape[2] * shape[3]) : double(shape[0]);
            const double std = conv ? std::sqrt(2.0 / fan_in) : std::sqrt(1.0 / fan_in);
            for (auto& v : t.storage()) v = std * normal(rng);
        }
        p.add(name, std::move(t));
    }
    return p;
}

inline ModelParams zero_params(const ModelConfig& cfg) {
    ModelParams p;
    for (auto& [name, shape] : parameter_shapes(cfg)) p.add(name, Tensor(shape));
    return p;
}

// Parameters placed on a graph, either as leaves that collect gradients or as
// constants.
class BoundParams {
   public:
    BoundParams(Graph& g, const ModelParams& p, bool trainable) : params_(&p) {
        vars_.reserve(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) vars_.push_back(trainable ? g.variable(p[i]) : g.constant(p[i]));
    }
    // Wraps leaves the caller already placed on a graph, in parameter order.
    BoundParams(const ModelParams& p, std::vector<Var> vars) : params_(&p), vars_(std::move(vars)) {
        if (vars_.size() != p.size()) throw ArgumentError("BoundParams: expected one Var per parameter");
    }
    Var operator[](const std::string& name) const { return vars_[params_->index(name)]; }
    Var operator[](std::size_t i) const { return vars_[i]; }
    std::size_t size() const { return vars_.size(); }
    const ModelParams& params() const { return *params_; }

   private:
    const ModelParams* params_;
    std::vector<Var> vars_;
};

// ---------------------------------------------------------------------------
// Attention.

// N x N class-modulating bias: entry (x, y) is 0 when neither x nor y is a
// sampled class, masked otherwise.
struct AttentionBias {
    Tensor matrix;

    std::size_t size() const { return matrix.dim(0); }
    bool masked(std::size_t x, std::size_t y) const { return matrix.at(x, y) <= kMaskThreshold; }
};

inline AttentionBias build_class_bias(std::size_t n, const SampledClassSet& classes) {
    if (n == 0) throw ArgumentError("build_class_bias: N must be positive");
    for (auto c : classes.classes) {
        if (c >= n) throw ArgumentError("build_class_bias: class id " + std::to_string(c) + " >= N=" + std::to_string(n));
    }
    AttentionBias b{Tensor(Shape{n, n})};
    for (std::size_t x = 0; x < n; ++x)
        for (std::size_t y = 0; y < n; ++y) {
            const bool sampled = classes.contains(static_cast<std::uint8_t>(x)) ||
                                 classes.contains(static_cast<std::uint8_t>(y));
            b.matrix.at(x, y) = sampled ? kMaskedValue : 0.0;
        }
    return b;
}

// softmax(Q K^T [+ bias]) over keys; no 1/sqrt(d) unless `scaled`.
inline Var attention_weights(Var q, Var k, const Tensor* bias = nullptr, bool scaled = false) {
    Graph& g = *q.graph;
    Var logits = matmul(q, transpose(k));
    if (scaled) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(g.shape(q)[1])));
    if (bias) {
        const Shape& s = g.shape(logits);
        if (bias->shape() != s) {
            throw DimensionError("attention bias " + shape_string(bias->shape()) + " does not match logits " +
                                 shape_string(s));
        }
        logits = add(logits, g.constant(*bias));
    }
    return softmax_lastdim(logits);
}

// softmax(Q K^T) V
inline Var attention(Var q, Var k, Var v, bool scaled = false) {
    const Shape& sq = q.graph->shape(q);
    const Shape& sk = q.graph->shape(k);
    const Shape& sv = q.graph->shape(v);
    if (sq.size() != 2 || sk.size() != 2 || sv.size() != 2 || sq[1] != sk[1] || sk[0] != sv[0]) {
        throw DimensionError("attention: Q " + shape_string(sq) + ", K " + shape_string(sk) + ", V " +
                             shape_string(sv));
    }
    return matmul(attention_weights(q, k, nullptr, scaled), v);
}

// Queries from the pseudo-target branch, keys and values from the
// intermediate branch; same arithmetic as attention().
inline Var cross_domain_attention(Var q_pt, Var k_m, Var v_m, bool scaled = false) {
    return attention(q_pt, k_m, v_m, scaled);
}

// softmax(M_c + Q_pt K_m^T) V_m. Rows of sampled classes are fully masked and
// produce zero output.
inline Var class_aware_cross_attention(Var q_pt, Var k_m, Var v_m, const AttentionBias& bias, bool scaled = false) {
    const Shape& sq = q_pt.graph->shape(q_pt);
    const Shape& sk = q_pt.graph->shape(k_m);
    if (bias.matrix.rank() != 2 || bias.matrix.dim(0) != sq.at(0) || bias.matrix.dim(1) != sk.at(0)) {
        throw DimensionError("class_aware_cross_attention: bias " + shape_string(bias.matrix.shape()) +
                             " for " + std::to_string(sq.at(0)) + " queries and " + std::to_string(sk.at(0)) +
                             " keys");
    }
    return matmul(attention_weights(q_pt, k_m, &bias.matrix, scaled), v_m);
}

// ---------------------------------------------------------------------------
// Forward passes.

struct ForwardTrace {
    Var f_img;    // C x H/8 x W/8
    Var e_pixel;  // C_e x H x W
    // Token state entering each layer's token-attention sublayer (N x C_e).
    std::vector<Var> attention_inputs;
    // Token state after each layer (N x C_e).
    std::vector<Var> layer_outputs;
    Var e_class;  // N x C_e
    Var logits;   // N x H x W
    std::size_t height = 0, width = 0;
};

struct PixelFeatures {
    Var f1, f2, f_img, e_pixel;
    std::size_t height = 0, width = 0;
};

enum class TokenMixing {
    kSelf,         // standard self-attention
    kCross,        // queries from the conditioning branch
    kIdentity      // sublayer contributes nothing (reference path)
};

struct DecoderOptions {
    TokenMixing mixing = TokenMixing::kSelf;
    const std::vector<Var>* conditioning = nullptr;  // per-layer conditioning tokens
    const AttentionBias* bias = nullptr;
};

namespace detail {

inline Var linear(Var x, Var w) { return matmul(x, w); }

// Splits columns into heads, attends per head with an optional bias, and
// concatenates.
inline Var multi_head(Var q, Var k, Var v, std::size_t heads, const AttentionBias* bias, bool scaled) {
    if (heads == 1) {
        return bias ? class_aware_cross_attention(q, k, v, *bias, scaled) : attention(q, k, v, scaled);
    }
    const std::size_t d = q.graph->shape(q)[1], dh = d / heads;
    std::vector<Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = slice_lastdim(q, h * dh, (h + 1) * dh);
        Var kh = slice_lastdim(k, h * dh, (h + 1) * dh);
        Var vh = slice_lastdim(v, h * dh, (h + 1) * dh);
        outs.push_back(bias ? class_aware_cross_attention(qh, kh, vh, *bias, scaled) : attention(qh, kh, vh, scaled));
    }
    return concat(outs, 1);
}

}  // namespace detail

inline PixelFeatures pixel_path(const ModelConfig& cfg, const BoundParams& p, Var image_chw) {
    Graph& g = *image_chw.graph;
    const Shape& s = g.shape(image_chw);
    if (s.size() != 3 || s[0] != 3) throw DimensionError("model input must be 3 x H x W, got " + shape_string(s));
    if (s[1] % 8 != 0 || s[2] % 8 != 0 || s[1] == 0 || s[2] == 0) {
        throw ConfigError("model input size " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                          " must be divisible by 8");
    }
    (void)cfg;
    PixelFeatures f;
    f.height = s[1];
    f.width = s[2];
    f.f1 = relu(conv2d(image_chw, p["backbone.0.weight"], p["backbone.0.bias"], 2, 1));
    f.f2 = relu(conv2d(f.f1, p["backbone.1.weight"], p["backbone.1.bias"], 2, 1));
    f.f_img = relu(conv2d(f.f2, p["backbone.2.weight"], p["backbone.2.bias"], 2, 1));
    Var p1 = add(conv2d(bilinear_upsample2x(f.f_img), p["pixel.up1.weight"], p["pixel.up1.bias"], 1, 1),
                 conv2d(f.f2, p["pixel.lateral1.weight"], std::nullopt, 1, 0));
    p1 = relu(p1);
    Var p2 = add(conv2d(bilinear_upsample2x(p1), p["pixel.up2.weight"], p["pixel.up2.bias"], 1, 0),
                 conv2d(f.f1, p["pixel.lateral2.weight"], std::nullopt, 1, 0));
    f.e_pixel = bilinear_upsample2x(p2);
    return f;
}

inline ForwardTrace decode(const ModelConfig& cfg, const BoundParams& p, const PixelFeatures& px,
                           const DecoderOptions& opt = {}) {
    Graph& g = *px.f_img.graph;
    const Shape& fs = g.shape(px.f_img);
    Var memory = transpose(reshape(px.f_img, {fs[0], fs[1] * fs[2]}));  // HW/64 x C
    const bool sc = cfg.scaled_attention;

    if (opt.mixing == TokenMixing::kCross) {
        if (!opt.conditioning || opt.conditioning->size() != cfg.decoder_layers) {
            throw ContractError("cross decoding needs one conditioning token state per layer");
        }
    }

    ForwardTrace t;
    t.f_img = px.f_img;
    t.e_pixel = px.e_pixel;
    t.height = px.height;
    t.width = px.width;
    Var tokens = p["query"];
    for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
        const std::string pre = layer_prefix(l);
        // (a) tokens attend to image features
        Var x = layernorm_lastdim(tokens, p[pre + "cross_norm.gamma"], p[pre + "cross_norm.beta"]);
        Var a = detail::multi_head(detail::linear(x, p[pre + "cross.q"]), detail::linear(memory, p[pre + "cross.k"]),
                                   detail::linear(memory, p[pre + "cross.v"]), cfg.heads, nullptr, sc);
        tokens = add(tokens, detail::linear(a, p[pre + "cross.o"]));
        t.attention_inputs.push_back(tokens);

        // (b) token mixing
        if (opt.mixing != TokenMixing::kIdentity) {
            Var y = layernorm_lastdim(tokens, p[pre + "self_norm.gamma"], p[pre + "self_norm.beta"]);
            Var qsrc = y;
            if (opt.mixing == TokenMixing::kCross) {
                qsrc = layernorm_lastdim((*opt.conditioning)[l], p[pre + "self_norm.gamma"], p[pre + "self_norm.beta"]);
            }
            Var b = detail::multi_head(detail::linear(qsrc, p[pre + "self.q"]), detail::linear(y, p[pre + "self.k"]),
                                       detail::linear(y, p[pre + "self.v"]), cfg.heads,
                                       opt.mixing == TokenMixing::kCross ? opt.bias : nullptr, sc);
            tokens = add(tokens, detail::linear(b, p[pre + "self.o"]));
        }

        // (c) feed-forward
        Var z = layernorm_lastdim(tokens, p[pre + "ffn_norm.gamma"], p[pre + "ffn_norm.beta"]);
        Var hdn = relu(add(detail::linear(z, p[pre + "ffn.w1"]), p[pre + "ffn.b1"]));
        tokens = add(tokens, add(detail::linear(hdn, p[pre + "ffn.w2"]), p[pre + "ffn.b2"]));
        t.layer_outputs.push_back(tokens);
    }
    t.e_class = layernorm_lastdim(tokens, p["out_norm.gamma"], g.constant(Tensor(Shape{cfg.embed_dim})));
    const Shape& es = g.shape(px.e_pixel);
    Var flat = reshape(px.e_pixel, {es[0], es[1] * es[2]});
    t.logits = reshape(matmul(t.e_class, flat), {cfg.num_classes, es[1], es[2]});
    return t;
}

inline ForwardTrace forward(const ModelConfig& cfg, const BoundParams& p, Var image_chw,
                            TokenMixing mixing = TokenMixing::kSelf) {
    if (mixing == TokenMixing::kCross) throw ContractError("forward: use forward_cross for cross-domain decoding");
    DecoderOptions opt;
    opt.mixing = mixing;
    return decode(cfg, p, pixel_path(cfg, p, image_chw), opt);
}

inline ForwardTrace forward(const ModelConfig& cfg, Graph& g, const BoundParams& p, const Image& img,
                            TokenMixing mixing = TokenMixing::kSelf) {
    return forward(cfg, p, g.constant(image_to_chw(img)), mixing);
}

// Main-branch decoding whose token attention takes queries from an already
// computed conditioning trace.
inline ForwardTrace forward_cross_from(const ModelConfig& cfg, const BoundParams& p, const PixelFeatures& main,
                                       const ForwardTrace& conditioning, const AttentionBias& bias) {
    if (bias.matrix.rank() != 2 || bias.size() != cfg.num_classes || bias.matrix.dim(1) != cfg.num_classes) {
        throw DimensionError("class bias must be " + std::to_string(cfg.num_classes) + "x" +
                             std::to_string(cfg.num_classes));
    }
    DecoderOptions opt;
    opt.mixing = TokenMixing::kCross;
    opt.conditioning = &conditioning.attention_inputs;
    opt.bias = &bias;
    return decode(cfg, p, main, opt);
}

// F(main | conditioning): the conditioning image runs a standard forward; the
// main image supplies the pixel path, keys and values.
inline ForwardTrace forward_cross(const ModelConfig& cfg, Graph& g, const BoundParams& p, const Image& main_img,
                                  const Image& conditioning_img, const AttentionBias& bias,
                                  AttentionPairing pairing) {
    if (pairing == AttentionPairing::kNone) throw ContractError("forward_cross: pairing must not be NONE");
    if (main_img.height != conditioning_img.height || main_img.width != conditioning_img.width) {
        throw DimensionError("forward_cross: branch images differ in size");
    }
    ForwardTrace cond = forward(cfg, g, p, conditioning_img);
    PixelFeatures main = pixel_path(cfg, p, g.constant(image_to_chw(main_img)));
    return forward_cross_from(cfg, p, main, cond, bias);
}

// Per-pixel argmax with ties resolved to the lowest class id.
inline LabelMap argmax_labels(const Tensor& logits) {
    const std::size_t n = logits.dim(0), h = logits.dim(1), w = logits.dim(2), hw = h * w;
    LabelMap out(h, w);
    for (std::size_t p = 0; p < hw; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < n; ++c)
            if (logits[c * hw + p] > logits[best * hw + p]) best = c;
        out.ids[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

inline Tensor predict_logits(const ModelConfig& cfg, const ModelParams& params, const Image& img) {
    Graph g;
    BoundParams p(g, params, false);
    return g.value(forward(cfg, g, p, img).logits);
}

inline LabelMap predict(const ModelConfig& cfg, const ModelParams& params, const Image& img) {
    return argmax_labels(predict_logits(cfg, params, img));
}

// ---------------------------------------------------------------------------
// Checkpoints: "OSSEG1", u32 config length, config text, u32 parameter count,
// then per parameter u32 name length, name, u32 rank, u64 dims, f64 values.
// All integers and floats little-endian.

inline constexpr char kCheckpointMagic[] = "OSSEG1";

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
    std::uint64_t bits = 0;
    if constexpr (std::is_floating_point_v<T>) {
        bits = std::bit_cast<std::uint64_t>(static_cast<double>(v));
    } else {
        bits = static_cast<std::uint64_t>(v);
    }
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
   public:
    ByteReader(const std::string& bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        std::uint64_t bits = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        if constexpr (std::is_floating_point_v<T>) {
            return std::bit_cast<double>(bits);
        } else {
            return static_cast<T>(bits);
        }
    }

    std::string get_string(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    bool at_end() const { return pos_ == bytes_.size(); }

   private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) {
            throw FormatError(name_ + ": truncated checkpoint at byte " + std::to_string(pos_));
        }
    }
    const std::string& bytes_;
    std::string name_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ModelConfig& cfg, const ModelParams& params) {
    std::string out(kCheckpointMagic, 6);
    const std::string text = cfg.to_text();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& name = params.name(i);
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        const auto& t = params[i];
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
        for (double v : t.data()) detail::put_le<double>(out, v);
    }
    return out;
}

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
};

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& name = "checkpoint") {
    if (bytes.size() < 6 || bytes.compare(0, 6, kCheckpointMagic) != 0) {
        throw FormatError(name + ": bad checkpoint magic");
    }
    detail::ByteReader r(bytes, name);
    r.get_string(6);
    Checkpoint ck;
    const auto text_len = r.get<std::uint32_t>();
    ck.config = ModelConfig::from_text(r.get_string(text_len));
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint32_t>();
        std::string pname = r.get_string(len);
        const auto rank = r.get<std::uint32_t>();
        if (rank == 0 || rank > 8) throw FormatError(name + ": bad rank for " + pname + " at byte " + std::to_string(r.pos()));
        Shape shape(rank);
        for (auto& d : shape) d = r.get<std::uint64_t>();
        const std::size_t n = shape_numel(shape);
        if (n == 0 || n > (1u << 26)) throw FormatError(name + ": bad shape for " + pname);
        std::vector<double> data(n);
        for (auto& v : data) v = r.get<double>();
        ck.params.add(std::move(pname), Tensor(std::move(shape), std::move(data)));
    }
    if (!r.at_end()) throw FormatError(name + ": trailing bytes at byte " + std::to_string(r.pos()));
    // Every expected parameter must be present with its expected shape.
    const auto expected = parameter_shapes(ck.config);
    if (expected.size() != ck.params.size()) throw FormatError(name + ": parameter count does not match config");
    for (const auto& [pname, shape] : expected) {
        if (ck.params.at(pname).shape() != shape) throw FormatError(name + ": shape mismatch for " + pname);
    }
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams& params) {
    const std::string bytes = serialize_checkpoint(cfg, params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path.string());
}

}  // namespace osseg
