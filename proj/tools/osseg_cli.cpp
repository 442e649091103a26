#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "osseg/fda.hpp"
#include "osseg/metrics.hpp"
#include "osseg/mixer.hpp"
#include "osseg/model.hpp"
#include "osseg/selfcheck.hpp"
#include "osseg/synthdata.hpp"
#include "osseg/trainer.hpp"

#ifndef OSSEG_BUILD_ID
#define OSSEG_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using namespace osseg;

namespace {

// Bad flag values detected after parsing; mapped to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::size_t g_threads = 1;

// Runs fn(i) for i in [0, n) on up to g_threads workers. Each index is
// processed exactly once, so results written per index are order-independent.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
    const std::size_t workers = std::min(g_threads, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

class RunManifest {
   public:
    RunManifest(std::string command, std::uint64_t seed)
        : command_(std::move(command)), seed_(seed), start_(std::chrono::steady_clock::now()) {}

    void set(const std::string& key, const std::string& value) { config_[key] = value; }

    // Written as a sibling of the primary output: <out>.run.txt.
    void write(const fs::path& output) const {
        fs::path p = output;
        if (!p.has_filename()) p = p.parent_path();
        p += ".run.txt";
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        std::ofstream out(p);
        if (!out) throw std::runtime_error("cannot write run manifest " + p.string());
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        out << "command = " << command_ << "\n";
        out << "seed = " << seed_ << "\n";
        out << "build = " << OSSEG_BUILD_ID << "\n";
        out << "wall_time_s = " << secs << "\n";
        for (const auto& [k, v] : config_) out << "config." << k << " = " << v << "\n";
    }

   private:
    std::string command_;
    std::uint64_t seed_;
    std::chrono::steady_clock::time_point start_;
    std::map<std::string, std::string> config_;
};

Checkpoint open_checkpoint(const fs::path& path) {
    try {
        return load_checkpoint(path);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("bad checkpoint: ") + e.what());
    }
}

std::set<std::size_t> parse_subset(const std::string& text) {
    std::set<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            const unsigned long v = std::stoul(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.insert(v);
        } catch (const std::exception&) {
            throw UsageError("--subset: not a class id: '" + item + "'");
        }
    }
    return out;
}

Image color_composite(const LabelMap& labels, const SceneSpec& palette_spec) {
    Image img(labels.height, labels.width);
    for (std::size_t p = 0; p < labels.ids.size(); ++p) {
        const auto id = labels.ids[p];
        const Rgb c = id < palette_spec.palette.size() ? palette_spec.palette[id] : Rgb{0, 0, 0};
        for (std::size_t k = 0; k < 3; ++k) img.pixels[p * 3 + k] = c[k];
    }
    return img;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string domain;
    std::size_t count = 0;
    std::uint64_t seed = 0;
    std::string out;
    std::size_t height = 64, width = 64;
};

int cmd_gen_data(const GenDataArgs& a) {
    if (a.count < 1) throw UsageError("--count must be >= 1");
    SceneSpec spec = a.domain == "source" ? SceneSpec::source_default(a.seed) : SceneSpec::target_default(a.seed);
    spec.height = a.height;
    spec.width = a.width;
    try {
        spec.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    RunManifest run("gen-data", a.seed);
    run.set("domain", a.domain);
    run.set("count", std::to_string(a.count));
    run.set("height", std::to_string(a.height));
    run.set("width", std::to_string(a.width));

    const fs::path root = a.out;
    fs::create_directories(root / a.domain);
    std::vector<ManifestEntry> entries(a.count);
    parallel_for(a.count, [&](std::size_t i) {
        const DomainSample s = generate_sample(spec, i);
        ManifestEntry e{a.domain + "/img_" + std::to_string(i) + ".ppm", a.domain + "/lbl_" + std::to_string(i) + ".pgm"};
        write_image(root / e.image_path, s.image);
        write_label(root / e.label_path, s.label);
        entries[i] = std::move(e);
    });
    write_manifest(root, entries);
    run.write(root);
    std::cout << "wrote " << a.count << " " << a.domain << " samples to " << root.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct StylizeArgs {
    std::string src_dir, reference, out_dir;
    double beta = 0.05;
};

int cmd_stylize(const StylizeArgs& a) {
    const FdaConfig cfg{a.beta};
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    RunManifest run("stylize", 0);
    run.set("beta", std::to_string(a.beta));
    run.set("reference", a.reference);
    run.set("src_dir", a.src_dir);

    const fs::path src = a.src_dir, out = a.out_dir;
    const Image reference = read_image(a.reference);
    const auto entries = read_manifest(src);
    for (const auto& e : entries) {
        fs::create_directories((out / e.image_path).parent_path());
        fs::create_directories((out / e.label_path).parent_path());
    }
    parallel_for(entries.size(), [&](std::size_t i) {
        const auto& e = entries[i];
        const Image img = read_image(src / e.image_path);
        Image styled;
        try {
            styled = fda_stylize(img, resize_bilinear(reference, img.height, img.width), cfg);
        } catch (const std::exception& ex) {
            throw std::runtime_error("sample " + std::to_string(i) + ": " + ex.what());
        }
        write_image(out / e.image_path, styled);
        fs::copy_file(src / e.label_path, out / e.label_path, fs::copy_options::overwrite_existing);
    });
    write_manifest(out, entries);
    run.write(out);
    std::cout << "stylized " << entries.size() << " images into " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct MixArgs {
    std::string pt_dir, src_dir, pseudo_dir, out_dir;
    std::uint64_t seed = 0;
    std::size_t count = 1;
};

int cmd_mix(const MixArgs& a) {
    if (a.count < 1) throw UsageError("--count must be >= 1");
    RunManifest run("mix", a.seed);
    run.set("count", std::to_string(a.count));
    run.set("pt_dir", a.pt_dir);
    run.set("src_dir", a.src_dir);
    run.set("pseudo_dir", a.pseudo_dir.empty() ? "(ground truth)" : a.pseudo_dir);

    const auto donors = read_dataset(a.pt_dir, 255, DomainTag::kPseudoTarget);
    const auto acceptors = read_dataset(a.src_dir, 255, DomainTag::kSource);
    if (donors.empty() || acceptors.empty()) throw std::runtime_error("mix: empty dataset");
    std::vector<LabelMap> pseudo;
    if (!a.pseudo_dir.empty()) {
        for (std::size_t j = 0; j < acceptors.size(); ++j) {
            pseudo.push_back(read_label(fs::path(a.pseudo_dir) / ("lbl_" + std::to_string(j) + ".pgm")));
        }
    }

    const fs::path out = a.out_dir;
    fs::create_directories(out / "mix");
    const std::uint64_t base = derive_seed(a.seed, "mix");
    std::vector<ManifestEntry> entries(a.count);
    parallel_for(a.count, [&](std::size_t k) {
        Rng rng(derive_seed(base, k));
        const std::size_t i = std::uniform_int_distribution<std::size_t>(0, donors.size() - 1)(rng);
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, acceptors.size() - 1)(rng);
        const SampledClassSet classes = sample_classes(donors[i].label, rng, i);
        const SampleMask mask = build_mask(donors[i].label, classes);
        const DomainSample m = pseudo.empty() ? mix_with_ground_truth({donors[i], acceptors[j], nullptr}, mask)
                                              : mix({donors[i], acceptors[j], &pseudo[j]}, mask);
        ManifestEntry e{"mix/img_" + std::to_string(k) + ".ppm", "mix/lbl_" + std::to_string(k) + ".pgm"};
        write_image(out / e.image_path, m.image);
        write_label(out / e.label_path, m.label);
        std::ofstream side(out / ("mix/info_" + std::to_string(k) + ".txt"));
        side << "donor = " << i << "\nacceptor = " << j << "\nclasses =";
        for (std::size_t c = 0; c < classes.classes.size(); ++c) side << (c ? "," : " ") << int(classes.classes[c]);
        side << "\n";
        if (!side) throw std::runtime_error("cannot write sidecar for mix " + std::to_string(k));
        entries[k] = std::move(e);
    });
    write_manifest(out, entries);
    run.write(out);
    std::cout << "wrote " << a.count << " intermediate samples to " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config, data_root, out, log, reference;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> iterations;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg;
    try {
        cfg = TrainConfig::load(a.config);
        if (a.seed) cfg.seed = *a.seed;
        if (a.iterations) cfg.iterations = *a.iterations;
        cfg.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    RunManifest run("train", cfg.seed);
    {
        std::istringstream lines(cfg.to_text());
        std::string line;
        while (std::getline(lines, line)) {
            const auto eq = line.find(" = ");
            if (eq != std::string::npos) run.set(line.substr(0, eq), line.substr(eq + 3));
        }
    }
    run.set("data_root", a.data_root);

    const fs::path root = a.data_root;
    const auto source = read_dataset(root / "source", cfg.model.num_classes, DomainTag::kSource);
    Image reference;
    if (!a.reference.empty()) {
        reference = read_image(a.reference);
    } else {
        const auto refs = read_manifest(root / "reference");
        if (refs.empty()) throw std::runtime_error("train: reference manifest is empty");
        reference = read_image(root / "reference" / refs.front().image_path);
    }

    const std::size_t every = std::max<std::size_t>(1, cfg.iterations / 10);
    const auto result = train(cfg, source, reference, [&](const LossReport& r) {
        if (!a.quiet && (r.step % every == 0 || r.step + 1 == cfg.iterations)) {
            std::printf("step %zu  l_pt %.4f  l_idr %.4f  l_cd %.4f  l_total %.4f\n", r.step, r.l_pt, r.l_idr, r.l_cd,
                        r.l_total);
            std::fflush(stdout);
        }
    });
    const fs::path out = a.out;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_checkpoint(out, cfg.model, result.teacher);
    if (!a.log.empty()) write_loss_log(a.log, result.log);
    run.write(out);
    std::cout << "saved teacher checkpoint to " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt, data_root, subset, out;
};

int cmd_eval(const EvalArgs& a) {
    const auto subset = parse_subset(a.subset);
    const Checkpoint ck = open_checkpoint(a.ckpt);
    const std::size_t n = ck.config.num_classes;
    for (auto c : subset)
        if (c >= n) throw UsageError("--subset: class " + std::to_string(c) + " out of range");
    RunManifest run("eval", 0);
    run.set("ckpt", a.ckpt);
    run.set("data_root", a.data_root);
    run.set("subset", a.subset);

    const fs::path root = a.data_root;
    const auto entries = read_manifest(root);
    std::vector<ConfusionMatrix> per_sample(entries.size(), ConfusionMatrix(n));
    parallel_for(entries.size(), [&](std::size_t i) {
        const Image img = read_image(root / entries[i].image_path);
        const LabelMap gt = read_label(root / entries[i].label_path, n);
        accumulate(per_sample[i], predict(ck.config, ck.params, img), gt);
    });
    ConfusionMatrix cm(n);
    for (const auto& m : per_sample) cm += m;  // fixed merge order
    const IoUReport r = iou_report(cm, subset);

    std::ostringstream csv;
    csv.precision(17);
    csv << "class,iou\n";
    for (std::size_t c = 0; c < n; ++c) {
        csv << (c < kClassNames.size() ? kClassNames[c] : std::to_string(c)) << ',';
        if (r.per_class[c]) csv << *r.per_class[c];
        else csv << "nan";
        csv << '\n';
    }
    csv << "miou," << r.miou << "\nmiou_subset," << r.miou_subset << "\n";

    const fs::path out = a.out;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out.string());
    f << csv.str();
    run.write(out);
    std::printf("mIoU %.4f  (subset %.4f) over %zu images\n", r.miou, r.miou_subset, entries.size());
    return 0;
}

// ---------------------------------------------------------------------------

struct InferArgs {
    std::string ckpt, image, out, color, data_root, out_dir;
};

int cmd_infer(const InferArgs& a) {
    const bool single = !a.image.empty();
    if (single == !a.data_root.empty()) throw UsageError("give either --image or --data-root");
    if (single && a.out.empty()) throw UsageError("--image requires --out");
    if (!single && a.out_dir.empty()) throw UsageError("--data-root requires --out-dir");
    const Checkpoint ck = open_checkpoint(a.ckpt);
    RunManifest run("infer", 0);
    run.set("ckpt", a.ckpt);
    const SceneSpec palette = SceneSpec::source_default();

    if (single) {
        run.set("image", a.image);
        const LabelMap pred = predict(ck.config, ck.params, read_image(a.image));
        const fs::path out = a.out;
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        write_label(out, pred);
        if (!a.color.empty()) write_image(a.color, color_composite(pred, palette));
        run.write(out);
        return 0;
    }

    run.set("data_root", a.data_root);
    const fs::path root = a.data_root, out = a.out_dir;
    const auto entries = read_manifest(root);
    fs::create_directories(out);
    parallel_for(entries.size(), [&](std::size_t i) {
        const LabelMap pred = predict(ck.config, ck.params, read_image(root / entries[i].image_path));
        write_label(out / ("lbl_" + std::to_string(i) + ".pgm"), pred);
        if (!a.color.empty()) write_image(out / ("color_" + std::to_string(i) + ".ppm"), color_composite(pred, palette));
    });
    run.write(out);
    std::cout << "labelled " << entries.size() << " images into " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
    std::uint64_t seed = 0;
    bool inject_fault = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    const auto start = std::chrono::steady_clock::now();
    debug::corrupt_relu_backward = a.inject_fault;
    const auto r = run_gradcheck_suite(a.seed);
    debug::corrupt_relu_backward = false;
    for (const auto& g : r.groups) {
        std::printf("%-32s %.3e %s\n", g.name.c_str(), g.max_rel_error, g.max_rel_error < r.tolerance ? "ok" : "FAIL");
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const auto failed = r.failures();
    std::printf("%zu groups, %zu failed, %.1fs\n", r.groups.size(), failed.size(), secs);
    if (!failed.empty()) {
        std::fprintf(stderr, "gradcheck failed:");
        for (const auto& f : failed) std::fprintf(stderr, " %s", f.c_str());
        std::fprintf(stderr, "\n");
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"One-shot domain adaptation for semantic segmentation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(OSSEG_BUILD_ID));
    app.add_option("--threads", g_threads, "Worker threads for data generation, stylization and evaluation")
        ->check(CLI::PositiveNumber);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    gen_cmd->add_option("--domain", gen.domain, "source (open field) or target (dense city)")
        ->required()
        ->check(CLI::IsMember({"source", "target"}));
    gen_cmd->add_option("--count", gen.count, "Number of samples")->required();
    gen_cmd->add_option("--seed", gen.seed, "Dataset seed");
    gen_cmd->add_option("--out", gen.out, "Dataset root directory")->required();
    gen_cmd->add_option("--height", gen.height, "Image height");
    gen_cmd->add_option("--width", gen.width, "Image width");

    StylizeArgs sty;
    auto* sty_cmd = app.add_subcommand("stylize", "Fourier-stylize a dataset toward a reference image");
    sty_cmd->add_option("--src-dir", sty.src_dir, "Source dataset root")->required();
    sty_cmd->add_option("--reference", sty.reference, "Reference PPM")->required();
    sty_cmd->add_option("--beta", sty.beta, "Low-frequency window fraction");
    sty_cmd->add_option("--out-dir", sty.out_dir, "Output dataset root")->required();

    MixArgs mx;
    auto* mix_cmd = app.add_subcommand("mix", "Write class-mixed intermediate samples");
    mix_cmd->add_option("--pt-dir", mx.pt_dir, "Pseudo-target dataset root (donors)")->required();
    mix_cmd->add_option("--src-dir", mx.src_dir, "Source dataset root (acceptors)")->required();
    mix_cmd->add_option("--pseudo-dir", mx.pseudo_dir,
                        "Directory of acceptor pseudo-labels lbl_<j>.pgm; ground truth if omitted");
    mix_cmd->add_option("--seed", mx.seed, "Sampling seed");
    mix_cmd->add_option("--out-dir", mx.out_dir, "Output root")->required();
    mix_cmd->add_option("--count", mx.count, "Number of samples");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train and save the teacher checkpoint");
    train_cmd->add_option("--config", tr.config, "key = value config file")->required();
    train_cmd->add_option("--data-root", tr.data_root, "Root holding source/ and reference/ datasets")->required();
    train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
    train_cmd->add_option("--log", tr.log, "Per-step loss CSV");
    train_cmd->add_option("--reference", tr.reference, "Reference PPM overriding reference/");
    train_cmd->add_option("--seed", tr.seed, "Override the config seed");
    train_cmd->add_option("--iterations", tr.iterations, "Override the config iteration count");
    train_cmd->add_flag("--quiet", tr.quiet, "No progress output");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Per-class IoU report on a labelled dataset");
    eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
    eval_cmd->add_option("--data-root", ev.data_root, "Dataset root with manifest.txt")->required();
    eval_cmd->add_option("--subset", ev.subset, "Comma-separated class ids for miou_subset");
    eval_cmd->add_option("--out", ev.out, "Report CSV")->required();

    InferArgs inf;
    auto* infer_cmd = app.add_subcommand("infer", "Predict label maps with a checkpoint");
    infer_cmd->add_option("--ckpt", inf.ckpt, "Checkpoint")->required();
    infer_cmd->add_option("--image", inf.image, "Input PPM");
    infer_cmd->add_option("--out", inf.out, "Output PGM (with --image)");
    infer_cmd->add_option("--color", inf.color, "Colour PPM path (--image) or enable colour output (--data-root)");
    infer_cmd->add_option("--data-root", inf.data_root, "Dataset root to label in bulk");
    infer_cmd->add_option("--out-dir", inf.out_dir, "Output directory for lbl_<i>.pgm (with --data-root)");

    GradcheckArgs gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient self-check");
    gc_cmd->add_option("--seed", gc.seed, "Seed for inputs and parameters");
    gc_cmd->add_flag("--inject-fault", gc.inject_fault, "Corrupt relu's backward rule (negative control)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen);
        if (*sty_cmd) return cmd_stylize(sty);
        if (*mix_cmd) return cmd_mix(mx);
        if (*train_cmd) return cmd_train(tr);
        if (*eval_cmd) return cmd_eval(ev);
        if (*infer_cmd) return cmd_infer(inf);
        if (*gc_cmd) return cmd_gradcheck(gc);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n\n%s", e.what(), app.help().c_str());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
