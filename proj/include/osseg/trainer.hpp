#pragma once

// Mean-teacher self-training.
//
// Per example i (with an independently drawn acceptor j):
//   l_pt   CE(F(pt_i), y_i)
//   l_idr  CE(F(x_m), y_m), x_m mixing pt_i into source_j labelled by the
//          teacher's pseudo-label of source_j
//   l_cd   CE(F(main | conditioning), label) under the configured pairing
//   l_src  CE(F(source_i), y_i), only for the source-conditioned variants
// l_total = l_pt + l_idr + lambda_cd * l_cd + l_src.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "osseg/errors.hpp"
#include "osseg/fda.hpp"
#include "osseg/image.hpp"
#include "osseg/mixer.hpp"
#include "osseg/model.hpp"
#include "osseg/rng.hpp"
#include "osseg/tensor.hpp"

namespace osseg {

struct TrainConfig {
    double lambda_cd = 0.01;
    double ema_alpha = 0.99;
    double lr = 1e-3;
    double weight_decay = 0.01;
    std::size_t iterations = 2000;
    std::size_t batch = 2;
    std::size_t crop = 32;
    std::uint64_t seed = 0;
    double pseudo_label_threshold = 0.0;
    bool use_ground_truth_mix = false;
    // Intermediate-domain mixing; off gives plain pseudo-target training.
    bool use_cidr = true;
    AttentionPairing pairing = AttentionPairing::kOursPtToIntermediate;
    double fda_beta = 0.05;
    ModelConfig model;

    void validate() const {
        if (!(lambda_cd >= 0.0) || !std::isfinite(lambda_cd)) throw ConfigError("lambda_cd must be >= 0");
        if (!(ema_alpha >= 0.0 && ema_alpha < 1.0)) throw ConfigError("ema_alpha must lie in [0, 1)");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
        if (batch < 1) throw ConfigError("batch must be >= 1");
        if (crop < 8 || crop % 8 != 0) throw ConfigError("crop must be a positive multiple of 8");
        if (!(pseudo_label_threshold >= 0.0 && pseudo_label_threshold <= 1.0)) {
            throw ConfigError("pseudo_label_threshold must lie in [0, 1]");
        }
        if (!use_cidr && (pairing == AttentionPairing::kOursPtToIntermediate || pairing == AttentionPairing::kVariantS)) {
            throw ConfigError(std::string("pairing ") + pairing_name(pairing) + " needs use_cidr = true");
        }
        FdaConfig{fda_beta}.validate();
        model.validate();
    }

    std::string to_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "lambda_cd = " << lambda_cd << '\n'
           << "ema_alpha = " << ema_alpha << '\n'
           << "lr = " << lr << '\n'
           << "weight_decay = " << weight_decay << '\n'
           << "iterations = " << iterations << '\n'
           << "batch = " << batch << '\n'
           << "crop = " << crop << '\n'
           << "seed = " << seed << '\n'
           << "pseudo_label_threshold = " << pseudo_label_threshold << '\n'
           << "use_ground_truth_mix = " << (use_ground_truth_mix ? "true" : "false") << '\n'
           << "use_cidr = " << (use_cidr ? "true" : "false") << '\n'
           << "pairing = " << pairing_name(pairing) << '\n'
           << "fda_beta = " << fda_beta << '\n';
        std::istringstream model_lines(model.to_text());
        std::string line;
        while (std::getline(model_lines, line)) {
            if (line.rfind("attention_pairing", 0) == 0) continue;  // mirrors `pairing`
            os << "model." << line << '\n';
        }
        return os.str();
    }

    // `key = value` lines; '#' starts a comment. Model keys take a "model."
    // prefix.
    static TrainConfig from_text(const std::string& text) {
        TrainConfig c;
        std::string model_text;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        auto trim = [](const std::string& s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        auto parse_bool = [](const std::string& key, const std::string& v) {
            if (v == "true" || v == "1") return true;
            if (v == "false" || v == "0") return false;
            throw ConfigError(key + ": expected true or false, got '" + v + "'");
        };
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
            try {
                if (key == "lambda_cd") c.lambda_cd = std::stod(v);
                else if (key == "ema_alpha") c.ema_alpha = std::stod(v);
                else if (key == "lr") c.lr = std::stod(v);
                else if (key == "weight_decay") c.weight_decay = std::stod(v);
                else if (key == "iterations") c.iterations = std::stoull(v);
                else if (key == "batch") c.batch = std::stoull(v);
                else if (key == "crop") c.crop = std::stoull(v);
                else if (key == "seed") c.seed = std::stoull(v);
                else if (key == "pseudo_label_threshold") c.pseudo_label_threshold = std::stod(v);
                else if (key == "use_ground_truth_mix") c.use_ground_truth_mix = parse_bool(key, v);
                else if (key == "use_cidr") c.use_cidr = parse_bool(key, v);
                else if (key == "pairing") c.pairing = parse_pairing(v);
                else if (key == "fda_beta") c.fda_beta = std::stod(v);
                else if (key.rfind("model.", 0) == 0) model_text += key.substr(6) + " = " + v + "\n";
                else throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
            } catch (const std::logic_error& e) {
                if (dynamic_cast<const ConfigError*>(&e)) throw;
                throw ConfigError("line " + std::to_string(lineno) + ": bad value for " + key + ": '" + v + "'");
            }
        }
        c.model = ModelConfig::from_text(model_text);
        c.model.attention_pairing = c.pairing;
        c.validate();
        return c;
    }

    static TrainConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return from_text(ss.str());
    }
};

struct LossReport {
    std::size_t step = 0;
    double l_pt = 0.0, l_idr = 0.0, l_cd = 0.0, l_src = 0.0, l_total = 0.0;
};

inline double combine_losses(double l_pt, double l_idr, double l_cd, double l_src, double lambda_cd) {
    return ((l_pt + l_idr) + l_cd * lambda_cd) + l_src;
}

// ---------------------------------------------------------------------------

inline LabelMap labels_from_logits(const Tensor& logits, double threshold) {
    LabelMap out = argmax_labels(logits);
    if (threshold <= 0.0) return out;
    const std::size_t n = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
    for (std::size_t p = 0; p < hw; ++p) {
        const double top = logits[out.ids[p] * hw + p];
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += std::exp(logits[c * hw + p] - top);
        if (1.0 / s < threshold) out.ids[p] = kIgnoreLabel;
    }
    return out;
}

// Teacher argmax (ties to the lowest id); pixels below `threshold` max
// probability become IGNORE. Threshold 0 disables masking.
inline LabelMap pseudo_label(const ModelConfig& cfg, const ModelParams& teacher, const Image& img, double threshold) {
    return labels_from_logits(predict_logits(cfg, teacher, img), threshold);
}

// AdamW with decoupled weight decay on matrices and conv kernels.
class AdamW {
   public:
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay;

    AdamW(const ModelParams& params, double lr_, double wd) : lr(lr_), weight_decay(wd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_.emplace_back(params[i].numel(), 0.0);
            v_.emplace_back(params[i].numel(), 0.0);
        }
    }

    std::size_t steps() const { return t_; }

    void step(ModelParams& params, const std::vector<std::vector<double>>& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].storage();
            const auto& g = grads[i];
            auto& m = m_[i];
            auto& v = v_[i];
            const double decay = params[i].rank() >= 2 ? lr * weight_decay : 0.0;
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[k] = beta1 * m[k] + (1 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1 - beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps) + decay * p[k];
            }
        }
    }

   private:
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// teacher <- alpha * teacher + (1 - alpha) * student
inline void ema_update(ModelParams& teacher, const ModelParams& student, double alpha) {
    if (teacher.size() != student.size()) throw DimensionError("ema_update: parameter lists differ");
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        auto& t = teacher[i].storage();
        const auto& s = student[i].storage();
        if (t.size() != s.size()) throw DimensionError("ema_update: size mismatch for " + teacher.name(i));
        for (std::size_t k = 0; k < t.size(); ++k) t[k] = alpha * t[k] + (1.0 - alpha) * s[k];
    }
}

// One batch element, cropped and ready for a step. The mixing acceptor has
// its own crop position.
struct TrainExample {
    Image source;         // x_i
    Image pseudo_target;  // stylized x_i, same crop
    LabelMap label;       // y_i
    Image acceptor;       // x_j
    LabelMap acceptor_label;
    SampledClassSet classes;  // drawn from the cropped y_i
    // Uncropped x_j and the crop origin; the teacher labels the full image.
    Image acceptor_full;
    std::size_t acceptor_y0 = 0, acceptor_x0 = 0;
};

inline std::vector<TrainExample> draw_batch(const std::vector<DomainSample>& source,
                                            const std::vector<DomainSample>& pseudo_target, const TrainConfig& cfg,
                                            Rng& rng) {
    if (source.empty()) throw ArgumentError("draw_batch: empty source dataset");
    if (pseudo_target.size() != source.size()) throw ArgumentError("draw_batch: pseudo-target set size differs");
    std::uniform_int_distribution<std::size_t> pick(0, source.size() - 1);
    auto pos = [&](std::size_t extent) {
        if (extent < cfg.crop) {
            throw ConfigError("crop " + std::to_string(cfg.crop) + " exceeds image extent " + std::to_string(extent));
        }
        return std::uniform_int_distribution<std::size_t>(0, extent - cfg.crop)(rng);
    };
    std::vector<TrainExample> batch;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
        const std::size_t i = pick(rng), j = pick(rng);
        const auto& si = source[i];
        const std::size_t yi = pos(si.image.height), xi = pos(si.image.width);
        const auto& sj = source[j];
        const std::size_t yj = pos(sj.image.height), xj = pos(sj.image.width);
        TrainExample ex;
        ex.source = crop(si.image, yi, xi, cfg.crop, cfg.crop);
        ex.pseudo_target = crop(pseudo_target[i].image, yi, xi, cfg.crop, cfg.crop);
        ex.label = crop(si.label, yi, xi, cfg.crop, cfg.crop);
        ex.acceptor = crop(sj.image, yj, xj, cfg.crop, cfg.crop);
        ex.acceptor_label = crop(sj.label, yj, xj, cfg.crop, cfg.crop);
        if (cfg.use_cidr) {
            ex.acceptor_full = sj.image;
            ex.acceptor_y0 = yj;
            ex.acceptor_x0 = xj;
        }
        if (cfg.use_cidr) ex.classes = sample_classes(ex.label, rng, i);
        batch.push_back(std::move(ex));
    }
    return batch;
}

// Teacher pseudo-label for the acceptor crop. The teacher sees the clean,
// uncropped x_j when its size suits the model and the label is cropped
// afterwards; otherwise it labels the crop directly.
inline LabelMap acceptor_pseudo_label(const TrainExample& ex, const ModelParams& teacher, const TrainConfig& cfg) {
    const Image& full = ex.acceptor_full;
    if (full.height == 0 || full.height % 8 != 0 || full.width % 8 != 0) {
        return pseudo_label(cfg.model, teacher, ex.acceptor, cfg.pseudo_label_threshold);
    }
    const LabelMap whole = pseudo_label(cfg.model, teacher, full, cfg.pseudo_label_threshold);
    return crop(whole, ex.acceptor_y0, ex.acceptor_x0, ex.acceptor.height, ex.acceptor.width);
}

// Intermediate-domain sample for one example; the pseudo-label comes from
// the teacher unless ground-truth mixing is configured.
inline DomainSample intermediate_sample(const TrainExample& ex, const ModelParams& teacher, const TrainConfig& cfg) {
    DomainSample donor{ex.pseudo_target, ex.label, DomainTag::kPseudoTarget};
    DomainSample acceptor{ex.acceptor, ex.acceptor_label, DomainTag::kSource};
    const SampleMask mask = build_mask(ex.label, ex.classes);
    if (cfg.use_ground_truth_mix) return mix_with_ground_truth({donor, acceptor, nullptr}, mask);
    const LabelMap pl = acceptor_pseudo_label(ex, teacher, cfg);
    return mix({donor, acceptor, &pl}, mask);
}

namespace detail {

inline void check_finite_loss(double v, const char* term, std::size_t step) {
    if (!std::isfinite(v)) {
        throw NumericError(std::string("training aborted: ") + term + " is non-finite at step " + std::to_string(step));
    }
}

// Mean of per-example losses, or nullopt for an empty list.
inline std::optional<Var> batch_mean(const std::vector<Var>& losses) {
    if (losses.empty()) return std::nullopt;
    Var s = losses[0];
    for (std::size_t k = 1; k < losses.size(); ++k) s = add(s, losses[k]);
    return scale(s, 1.0 / static_cast<double>(losses.size()));
}

}  // namespace detail

// One optimisation step on the student followed by the EMA teacher update.
inline LossReport train_step(ModelParams& student, ModelParams& teacher, AdamW& opt,
                             const std::vector<TrainExample>& batch, const TrainConfig& cfg, std::size_t step = 0) {
    const ModelConfig& mc = cfg.model;
    const AttentionPairing pairing = cfg.pairing;
    const bool source_conditioned = pairing == AttentionPairing::kVariantS || pairing == AttentionPairing::kVariantST;
    const bool use_pt = pairing != AttentionPairing::kVariantS;

    Graph g;
    BoundParams p(g, student, true);
    std::vector<Var> pt_losses, idr_losses, cd_losses, src_losses;
    const char* term = "l_pt";
    try {
        for (const auto& ex : batch) {
            // Pseudo-target branch.
            std::optional<PixelFeatures> pt_px;
            std::optional<ForwardTrace> pt_trace;
            term = "l_pt";
            if (use_pt) {
                pt_px = pixel_path(mc, p, g.constant(image_to_chw(ex.pseudo_target)));
                pt_trace = decode(mc, p, *pt_px);
                pt_losses.push_back(cross_entropy_pixelwise(pt_trace->logits, ex.label.ids));
            }

            term = "l_src";
            std::optional<ForwardTrace> src_trace;
            if (source_conditioned) {
                src_trace = forward(mc, p, g.constant(image_to_chw(ex.source)));
                src_losses.push_back(cross_entropy_pixelwise(src_trace->logits, ex.label.ids));
            }

            term = "l_idr";
            std::optional<DomainSample> inter;
            std::optional<PixelFeatures> m_px;
            if (cfg.use_cidr) {
                inter = intermediate_sample(ex, teacher, cfg);
                m_px = pixel_path(mc, p, g.constant(image_to_chw(inter->image)));
                idr_losses.push_back(cross_entropy_pixelwise(decode(mc, p, *m_px).logits, inter->label.ids));
            }

            term = "l_cd";
            if (pairing != AttentionPairing::kNone) {
                const AttentionBias bias = build_class_bias(mc.num_classes, ex.classes);
                if (pairing == AttentionPairing::kOursPtToIntermediate) {
                    auto t = forward_cross_from(mc, p, *m_px, *pt_trace, bias);
                    cd_losses.push_back(cross_entropy_pixelwise(t.logits, inter->label.ids));
                } else if (pairing == AttentionPairing::kVariantS) {
                    auto t = forward_cross_from(mc, p, *m_px, *src_trace, bias);
                    cd_losses.push_back(cross_entropy_pixelwise(t.logits, inter->label.ids));
                } else {
                    auto t = forward_cross_from(mc, p, *pt_px, *src_trace, bias);
                    cd_losses.push_back(cross_entropy_pixelwise(t.logits, ex.label.ids));
                }
            }
        }
    } catch (const NumericError& e) {
        throw NumericError(std::string("training aborted: ") + term + " at step " + std::to_string(step) + ": " +
                           e.what());
    }

    const auto l_pt = detail::batch_mean(pt_losses), l_idr = detail::batch_mean(idr_losses),
               l_cd = detail::batch_mean(cd_losses), l_src = detail::batch_mean(src_losses);
    LossReport r;
    r.step = step;
    r.l_pt = l_pt ? g.value(*l_pt)[0] : 0.0;
    r.l_idr = l_idr ? g.value(*l_idr)[0] : 0.0;
    r.l_cd = l_cd ? g.value(*l_cd)[0] : 0.0;
    r.l_src = l_src ? g.value(*l_src)[0] : 0.0;
    detail::check_finite_loss(r.l_pt, "l_pt", step);
    detail::check_finite_loss(r.l_idr, "l_idr", step);
    detail::check_finite_loss(r.l_cd, "l_cd", step);
    detail::check_finite_loss(r.l_src, "l_src", step);

    // Same association order as combine_losses.
    std::optional<Var> total;
    auto accumulate_term = [&](std::optional<Var> term) {
        if (!term) return;
        total = total ? add(*total, *term) : *term;
    };
    accumulate_term(l_pt);
    accumulate_term(l_idr);
    if (l_cd) accumulate_term(scale(*l_cd, cfg.lambda_cd));
    accumulate_term(l_src);
    if (!total) throw ConfigError("train_step: configuration produces no loss term");
    r.l_total = g.value(*total)[0];

    g.backward(*total);
    std::vector<std::vector<double>> grads(student.size());
    for (std::size_t i = 0; i < student.size(); ++i) {
        auto s = g.grad(p[i]);
        grads[i].assign(s.begin(), s.end());
    }
    opt.step(student, grads);
    if (!student.all_finite()) {
        throw NumericError("training aborted: non-finite parameters after step " + std::to_string(step));
    }
    ema_update(teacher, student, cfg.ema_alpha);
    return r;
}

struct TrainResult {
    ModelParams teacher;
    ModelParams student;
    std::vector<LossReport> log;
};

using StepCallback = std::function<void(const LossReport&)>;

// Full run: stylizes the source set toward the reference, then iterates.
// Deterministic given cfg.seed.
inline TrainResult train(const TrainConfig& cfg, const std::vector<DomainSample>& source, const Image& reference,
                         const StepCallback& on_step = {}) {
    cfg.validate();
    if (source.empty()) throw ArgumentError("train: empty source dataset");
    for (const auto& s : source) {
        if (s.image.height < cfg.crop || s.image.width < cfg.crop) {
            throw ConfigError("train: crop " + std::to_string(cfg.crop) + " exceeds a source image");
        }
    }
    std::vector<DomainSample> src = source;
    for (auto& s : src) s.tag = DomainTag::kSource;
    const auto pt = build_pseudo_target(src, reference, FdaConfig{cfg.fda_beta});

    TrainResult out;
    out.student = init_params(cfg.model, cfg.seed);
    out.teacher = out.student;
    AdamW opt(out.student, cfg.lr, cfg.weight_decay);
    Rng rng(derive_seed(cfg.seed, "sampling"));
    out.log.reserve(cfg.iterations);
    for (std::size_t step = 0; step < cfg.iterations; ++step) {
        const auto batch = draw_batch(src, pt, cfg, rng);
        out.log.push_back(train_step(out.student, out.teacher, opt, batch, cfg, step));
        if (on_step) on_step(out.log.back());
    }
    return out;
}

inline void write_loss_log(const std::filesystem::path& path, const std::vector<LossReport>& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    out << "step,l_pt,l_idr,l_cd,l_total\n";
    for (const auto& r : log) out << r.step << ',' << r.l_pt << ',' << r.l_idr << ',' << r.l_cd << ',' << r.l_total << '\n';
}

}  // namespace osseg
