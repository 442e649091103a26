// Acceptance suite. Prints one PASS/FAIL line per criterion; exit status is
// non-zero if any criterion fails. Pass criterion numbers as arguments to run
// a subset, e.g. `acceptance 1 4 9`.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "osseg/fda.hpp"
#include "osseg/metrics.hpp"
#include "osseg/mixer.hpp"
#include "osseg/model.hpp"
#include "osseg/selfcheck.hpp"
#include "osseg/synthdata.hpp"
#include "osseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace osseg;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Image random_image(std::size_t h, std::size_t w, Rng& rng) {
    Image img(h, w);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : img.pixels) v = u(rng);
    return img;
}

LabelMap random_label(std::size_t h, std::size_t w, std::size_t n, Rng& rng) {
    LabelMap l(h, w);
    for (auto& v : l.ids) v = static_cast<std::uint8_t>(rng() % n);
    return l;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Tensor t(Shape{r, c});
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : t.storage()) v = n(rng);
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
    return out;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(OSSEG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// ---------------------------------------------------------------------------

Verdict gradient_fidelity() {
    const auto t0 = Clock::now();
    const auto r = run_gradcheck_suite(0, 1e-3);
    const double secs = seconds_since(t0);
    double worst = 0;
    std::string worst_name;
    for (const auto& g : r.groups)
        if (g.max_rel_error >= worst) worst = g.max_rel_error, worst_name = g.name;
    const auto failed = r.failures();
    return {failed.empty() && secs < 300.0,
            fmt("%zu groups, %zu failed, worst %.2e (%s), %.1fs", r.groups.size(), failed.size(), worst,
                worst_name.c_str(), secs)};
}

Verdict fda_identities() {
    Rng rng(2);
    double beta0 = 0, self = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const Image src = random_image(16, 24, rng), ref = random_image(16, 24, rng);
        const Image a = fda_stylize(src, ref, {0.0});
        const Image b = fda_stylize(src, src, {0.3});
        for (std::size_t i = 0; i < src.pixels.size(); ++i) {
            beta0 = std::max(beta0, std::abs(a.pixels[i] - src.pixels[i]));
            self = std::max(self, std::abs(b.pixels[i] - src.pixels[i]));
        }
    }
    const Image dc = fda_stylize(Image(4, 4, 0.5), Image(4, 4, 0.25), {0.25});
    double dc_err = 0;
    for (double v : dc.pixels) dc_err = std::max(dc_err, std::abs(v - 0.25));
    return {beta0 <= 1e-9 && self <= 1e-9 && dc_err <= 1e-9,
            fmt("beta=0 max err %.1e, self-reference %.1e, 4x4 DC swap %.1e", beta0, self, dc_err)};
}

Verdict mix_algebra() {
    Rng rng(3);
    std::size_t mismatches = 0;
    auto sample = [&](DomainTag tag) {
        DomainSample s{random_image(8, 8, rng), random_label(8, 8, 5, rng), tag};
        return s;
    };
    for (int trial = 0; trial < 1000; ++trial) {
        const DomainSample donor = sample(DomainTag::kPseudoTarget), acceptor = sample(DomainTag::kSource);
        LabelMap pseudo = random_label(8, 8, 5, rng);
        pseudo.ids[rng() % 64] = kIgnoreLabel;
        const SampledClassSet classes = sample_classes(donor.label, rng);
        const DomainSample out = mix({donor, acceptor, &pseudo}, build_mask(donor.label, classes));
        for (std::size_t p = 0; p < 64; ++p) {
            bool m = false;
            for (auto c : classes.classes) m = m || donor.label.ids[p] == c;
            const DomainSample& from = m ? donor : acceptor;
            for (std::size_t c = 0; c < 3; ++c) mismatches += out.image.pixels[p * 3 + c] != from.image.pixels[p * 3 + c];
            mismatches += out.label.ids[p] != (m ? donor.label.ids[p] : pseudo.ids[p]);
        }
    }
    // Edge masks.
    const DomainSample donor = sample(DomainTag::kPseudoTarget), acceptor = sample(DomainTag::kSource);
    const LabelMap pseudo = random_label(8, 8, 5, rng);
    SampleMask ones{8, 8, std::vector<std::uint8_t>(64, 1)}, zeros{8, 8, std::vector<std::uint8_t>(64, 0)};
    const DomainSample all = mix({donor, acceptor, &pseudo}, ones);
    const DomainSample none = mix({donor, acceptor, &pseudo}, zeros);
    const bool edges = all.image == donor.image && all.label == donor.label && none.image == acceptor.image &&
                       none.label == pseudo;
    return {mismatches == 0 && edges, fmt("1000 random pairs, %zu mismatching values; edge masks %s", mismatches,
                                          edges ? "exact" : "WRONG")};
}

Verdict cacda_masking() {
    Rng rng(4);
    constexpr std::size_t n = 5, d = 6;
    std::size_t nonzero_masked = 0;
    double row_err = 0;
    for (unsigned bits = 0; bits < (1u << n); ++bits) {
        SampledClassSet set;
        for (std::uint8_t c = 0; c < n; ++c)
            if (bits & (1u << c)) set.classes.push_back(c);
        const AttentionBias bias = build_class_bias(n, set);
        for (int trial = 0; trial < 4; ++trial) {
            Graph g;
            const Tensor w = g.value(attention_weights(g.constant(random_matrix(n, d, rng)),
                                                       g.constant(random_matrix(n, d, rng)), &bias.matrix));
            for (std::size_t x = 0; x < n; ++x) {
                double row = 0;
                for (std::size_t y = 0; y < n; ++y) {
                    if (bias.masked(x, y)) nonzero_masked += w.at(x, y) != 0.0;
                    row += w.at(x, y);
                }
                if (!set.contains(static_cast<std::uint8_t>(x))) row_err = std::max(row_err, std::abs(row - 1.0));
            }
        }
    }

    // Empty set against plain cross-domain attention.
    bool empty_exact = true;
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor q = random_matrix(n, d, rng), k = random_matrix(n, d, rng), v = random_matrix(n, d, rng);
        Graph g;
        const Tensor a =
            g.value(class_aware_cross_attention(g.constant(q), g.constant(k), g.constant(v), build_class_bias(n, {})));
        const Tensor b = g.value(cross_domain_attention(g.constant(q), g.constant(k), g.constant(v)));
        empty_exact = empty_exact && a.storage() == b.storage();
    }

    // Full set against the identity-sublayer decoder path.
    double full_err = 0;
    for (std::size_t heads : {1u, 2u}) {
        ModelConfig cfg;
        cfg.heads = heads;
        const ModelParams params = init_params(cfg, 40 + heads);
        const Image main = random_image(32, 32, rng), cond = random_image(32, 32, rng);
        SampledClassSet all;
        for (std::uint8_t c = 0; c < n; ++c) all.classes.push_back(c);
        Graph g;
        BoundParams p(g, params, false);
        const auto cross = forward_cross(cfg, g, p, main, cond, build_class_bias(n, all),
                                         AttentionPairing::kOursPtToIntermediate);
        const auto ref = forward(cfg, g, p, main, TokenMixing::kIdentity);
        full_err = std::max(full_err, max_abs_diff(g.value(cross.logits), g.value(ref.logits)));
    }
    return {nonzero_masked == 0 && row_err <= 1e-12 && empty_exact && full_err <= 1e-9,
            fmt("32 sets: %zu nonzero masked weights, row-sum err %.1e; empty set %s; full set vs identity %.1e",
                nonzero_masked, row_err, empty_exact ? "bit-exact" : "DIFFERS", full_err)};
}

Verdict loss_identity() {
    TrainConfig cfg;
    cfg.iterations = 100;
    cfg.seed = 5;
    cfg.pairing = AttentionPairing::kOursPtToIntermediate;
    cfg.model.attention_pairing = cfg.pairing;
    const auto source = generate_dataset(SceneSpec::source_default(5), 20);
    const Image reference = generate_sample(SceneSpec::target_default(6), 0).image;
    double worst = 0;
    std::size_t steps = 0;
    train(cfg, source, reference, [&](const LossReport& r) {
        worst = std::max(worst, std::abs(r.l_total - (r.l_pt + r.l_idr + 0.01 * r.l_cd)));
        ++steps;
    });
    return {steps == 100 && worst <= 1e-12, fmt("%zu steps, max |l_total - (l_pt + l_idr + 0.01 l_cd)| = %.1e", steps, worst)};
}

Verdict metric_oracle() {
    Rng rng(6);
    double worst = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 2 + rng() % 7;
        ConfusionMatrix cm(n);
        for (std::size_t g = 0; g < n; ++g)
            for (std::size_t q = 0; q < n; ++q) cm(g, q) = rng() % 3 == 0 ? 0 : rng() % 1000;
        if (rng() % 2) {  // an absent class
            const std::size_t c = rng() % n;
            for (std::size_t k = 0; k < n; ++k) cm(c, k) = cm(k, c) = 0;
        }
        std::set<std::size_t> subset;
        for (std::size_t c = 0; c < n; ++c)
            if (rng() % 2) subset.insert(c);
        const IoUReport r = iou_report(cm, subset);

        double sum = 0, sub = 0;
        int count = 0, sub_count = 0;
        for (std::size_t c = 0; c < n; ++c) {
            double tp = static_cast<double>(cm(c, c)), fp = 0, fn = 0;
            for (std::size_t k = 0; k < n; ++k) {
                if (k == c) continue;
                fp += static_cast<double>(cm(k, c));
                fn += static_cast<double>(cm(c, k));
            }
            if (tp + fp + fn == 0) {
                if (r.per_class[c]) worst = INFINITY;
                continue;
            }
            const double iou = tp / (tp + fp + fn);
            worst = std::max(worst, r.per_class[c] ? std::abs(*r.per_class[c] - iou) : INFINITY);
            sum += iou;
            ++count;
            if (subset.count(c)) sub += iou, ++sub_count;
        }
        worst = std::max(worst, std::abs(r.miou - (count ? sum / count : 0.0)));
        worst = std::max(worst, std::abs(r.miou_subset - (sub_count ? sub / sub_count : 0.0)));
    }
    ConfusionMatrix hand(2);
    hand(0, 0) = 2, hand(0, 1) = 1, hand(1, 0) = 1, hand(1, 1) = 2;
    const double hand_miou = iou_report(hand).miou;
    return {worst <= 1e-12 && hand_miou == 0.5,
            fmt("500 random matrices, max err %.1e; hand case mIoU %.17g", worst, hand_miou)};
}

Verdict adaptation_gain() {
    const auto t0 = Clock::now();
    const char* names[] = {"source-only", "+PT", "+PT+CIDR", "full"};
    constexpr int kSeeds = 3;

    // One-shot reference: one extra target image outside the test set.
    auto target = generate_dataset(SceneSpec::target_default(2000), 51);
    const Image reference = target.back().image;
    target.pop_back();

    double mean[4] = {};
    std::string per_seed;
    for (int seed = 0; seed < kSeeds; ++seed) {
        const auto source = generate_dataset(SceneSpec::source_default(1000 + seed), 200);
        for (int k = 0; k < 4; ++k) {
            TrainConfig cfg;
            cfg.iterations = 2000;
            cfg.crop = 32;
            cfg.seed = static_cast<std::uint64_t>(seed);
            cfg.pseudo_label_threshold = 0.7;
            cfg.fda_beta = k == 0 ? 0.0 : 0.05;
            cfg.use_cidr = k >= 2;
            cfg.pairing = k == 3 ? AttentionPairing::kOursPtToIntermediate : AttentionPairing::kNone;
            cfg.model.attention_pairing = cfg.pairing;
            const auto result = train(cfg, source, reference);
            ConfusionMatrix cm(cfg.model.num_classes);
            for (const auto& s : target) accumulate(cm, predict(cfg.model, result.teacher, s.image), s.label);
            const double miou = iou_report(cm).miou;
            mean[k] += miou / kSeeds;
            per_seed += fmt("\n    seed %d %-12s target mIoU %.4f", seed, names[k], miou);
            std::printf("    seed %d %-12s target mIoU %.4f  (%.0fs elapsed)\n", seed, names[k], miou, seconds_since(t0));
            std::fflush(stdout);
        }
    }
    const double secs = seconds_since(t0);
    const bool gain = mean[3] >= mean[0] + 0.05;
    const bool order = mean[0] <= mean[1] && mean[1] <= mean[2];
    return {gain && order && secs < 1800.0,
            fmt("mean mIoU source-only %.4f, +PT %.4f, +PT+CIDR %.4f, full %.4f; gain %+.4f (%s), ordering %s, %.0fs",
                mean[0], mean[1], mean[2], mean[3], mean[3] - mean[0], gain ? "ok" : "below 0.05",
                order ? "ok" : "VIOLATED", secs)};
}

Verdict determinism() {
    const fs::path dir = fs::temp_directory_path() / "osseg_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string d = dir.string();
    bool ok = true;
    ok &= run_cli("gen-data --domain source --count 6 --seed 7 --out " + d + "/g1") == 0;
    ok &= run_cli("--threads 3 gen-data --domain source --count 6 --seed 7 --out " + d + "/g2") == 0;
    const bool gen_same = ok && tree(dir / "g1") == tree(dir / "g2");

    ok &= run_cli("gen-data --domain source --count 8 --seed 1 --out " + d + "/data/source") == 0;
    ok &= run_cli("gen-data --domain target --count 1 --seed 2 --out " + d + "/data/reference") == 0;
    std::ofstream(dir / "cfg.txt") << "iterations = 40\nseed = 3\npairing = ours\n";
    const std::string train = "train --quiet --config " + d + "/cfg.txt --data-root " + d + "/data --out ";
    ok &= run_cli(train + d + "/a.osseg") == 0;
    ok &= run_cli(train + d + "/b.osseg") == 0;
    const std::string a = slurp(dir / "a.osseg"), b = slurp(dir / "b.osseg");
    const bool train_same = ok && !a.empty() && a == b;
    fs::remove_all(dir);
    return {ok && gen_same && train_same,
            fmt("gen-data directories %s; train checkpoints %s (%zu bytes)", gen_same ? "identical" : "DIFFER",
                train_same ? "identical" : "DIFFER", a.size())};
}

Verdict round_trips() {
    Rng rng(9);
    const fs::path dir = fs::temp_directory_path() / "osseg_acceptance_roundtrip";
    fs::create_directories(dir);

    ModelConfig cfg;
    cfg.attention_pairing = AttentionPairing::kOursPtToIntermediate;
    ModelParams params = init_params(cfg, 9);
    params.at("query")[0] = -0.0;
    params.at("query")[1] = 4.9e-324;
    params.at("query")[2] = 1.7976931348623157e308;
    save_checkpoint(dir / "m.osseg", cfg, params);
    const Checkpoint ck = load_checkpoint(dir / "m.osseg");
    bool ckpt_ok = ck.config.to_text() == cfg.to_text() && ck.params.size() == params.size();
    for (std::size_t i = 0; ckpt_ok && i < params.size(); ++i) {
        ckpt_ok = ck.params.name(i) == params.name(i) && ck.params[i].shape() == params[i].shape() &&
                  std::memcmp(ck.params[i].data().data(), params[i].data().data(), params[i].numel() * 8) == 0;
    }

    bool raster_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t h = 1 + rng() % 40, w = 1 + rng() % 40;
        Image img(h, w);
        for (auto& v : img.pixels) v = static_cast<double>(rng() % 256) / 255.0;
        LabelMap lbl(h, w);
        for (auto& v : lbl.ids) v = rng() % 7 == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(rng() % 5);
        write_image(dir / "i.ppm", img);
        write_label(dir / "l.pgm", lbl);
        const Image img2 = read_image(dir / "i.ppm");
        const LabelMap lbl2 = read_label(dir / "l.pgm", 5);
        raster_ok = raster_ok && img2.pixels == img.pixels && lbl2.ids == lbl.ids;
        const std::string bytes = slurp(dir / "i.ppm");
        write_image(dir / "i2.ppm", img2);
        raster_ok = raster_ok && slurp(dir / "i2.ppm") == bytes;
    }
    fs::remove_all(dir);
    return {ckpt_ok && raster_ok, fmt("checkpoint %s; 20 PPM/PGM pairs %s", ckpt_ok ? "bit-exact" : "DIFFERS",
                                      raster_ok ? "bit-exact" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
        {"gradient fidelity", gradient_fidelity}, {"FDA identities", fda_identities},
        {"mix algebra", mix_algebra},             {"CACDA masking", cacda_masking},
        {"loss identity", loss_identity},         {"metric oracle", metric_oracle},
        {"adaptation gain", adaptation_gain},     {"determinism", determinism},
        {"round trips", round_trips},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Verdict v;
        try {
            v = criteria[k].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failed += !v.pass;
        std::printf("CRITERION %d %s: %s (%s)\n", id, v.pass ? "PASS" : "FAIL", criteria[k].first, v.detail.c_str());
        std::fflush(stdout);
    }
    return failed ? 1 : 0;
}
