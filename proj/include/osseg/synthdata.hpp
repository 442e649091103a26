#pragma once

// Procedural two-domain street-scene benchmark and raster file I/O.
//
// Scenes are layered: a sky band over a ground band, then vegetation
// ellipses, building rectangles and vehicle rectangles. The two layout modes
// differ in spatial structure only: OPEN_FIELD keeps vehicles well away from
// buildings, DENSE_CITY parks them against building walls. Palettes and
// texture noise carry the style difference.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "osseg/errors.hpp"
#include "osseg/image.hpp"
#include "osseg/rng.hpp"

namespace osseg {

enum SceneClass : std::uint8_t { kSky = 0, kGround = 1, kBuilding = 2, kVehicle = 3, kVegetation = 4 };

inline constexpr std::array<const char*, 5> kClassNames = {"sky", "ground", "building", "vehicle", "vegetation"};

enum class LayoutMode { kOpenField, kDenseCity };

using Rgb = std::array<double, 3>;

struct SceneSpec {
    std::size_t num_classes = 5;
    std::size_t height = 64;
    std::size_t width = 64;
    std::vector<Rgb> palette;
    double texture_noise_sigma = 0.04;
    LayoutMode layout = LayoutMode::kOpenField;
    std::uint64_t seed = 0;

    // Saturated, game-like colours in open-field layouts.
    static SceneSpec source_default(std::uint64_t seed = 0) {
        SceneSpec s;
        s.palette = {Rgb{0.30, 0.55, 0.95}, Rgb{0.42, 0.40, 0.38}, Rgb{0.75, 0.55, 0.35}, Rgb{0.85, 0.15, 0.20},
                     Rgb{0.15, 0.60, 0.15}};
        s.texture_noise_sigma = 0.04;
        s.layout = LayoutMode::kOpenField;
        s.seed = seed;
        return s;
    }

    // Hazy colours in dense-city layouts: each source colour blended 30%
    // toward a pale grey-blue fog.
    static SceneSpec target_default(std::uint64_t seed = 0) {
        constexpr double kHaze = 0.3;
        constexpr Rgb kFog{0.75, 0.75, 0.78};
        SceneSpec s;
        s.palette = source_default().palette;
        for (auto& colour : s.palette)
            for (std::size_t c = 0; c < 3; ++c) colour[c] = (1 - kHaze) * colour[c] + kHaze * kFog[c];
        s.texture_noise_sigma = 0.04;
        s.layout = LayoutMode::kDenseCity;
        s.seed = seed;
        return s;
    }

    void validate() const {
        if (num_classes < 2 || num_classes > 5) throw ConfigError("num_classes must be in [2, 5]");
        if (palette.size() != num_classes) {
            throw ConfigError("palette has " + std::to_string(palette.size()) + " entries for " +
                              std::to_string(num_classes) + " classes");
        }
        if (height < 8 || width < 8) throw ConfigError("image size must be at least 8x8");
        if (!(texture_noise_sigma >= 0.0)) throw ConfigError("texture_noise_sigma must be >= 0");
    }
};

namespace detail {

struct Rect {
    long y0, x0, y1, x1;  // inclusive-exclusive
};

inline void fill_rect(LabelMap& lbl, const Rect& r, std::uint8_t cls) {
    for (long y = std::max(0L, r.y0); y < std::min<long>(r.y1, lbl.height); ++y)
        for (long x = std::max(0L, r.x0); x < std::min<long>(r.x1, lbl.width); ++x) lbl.at(y, x) = cls;
}

inline void fill_ellipse(LabelMap& lbl, double cy, double cx, double ry, double rx, std::uint8_t cls) {
    for (std::size_t y = 0; y < lbl.height; ++y)
        for (std::size_t x = 0; x < lbl.width; ++x) {
            const double dy = (static_cast<double>(y) - cy) / ry, dx = (static_cast<double>(x) - cx) / rx;
            if (dy * dy + dx * dx <= 1.0) lbl.at(y, x) = cls;
        }
}

// Chebyshev gap between two rectangles (0 when they touch or overlap).
inline long rect_gap(const Rect& a, const Rect& b) {
    const long gy = std::max({0L, b.y0 - a.y1 + 1, a.y0 - b.y1 + 1});
    const long gx = std::max({0L, b.x0 - a.x1 + 1, a.x0 - b.x1 + 1});
    return std::max(gy, gx);
}

inline long uniform_int(Rng& rng, long lo, long hi) {  // inclusive
    if (hi < lo) hi = lo;
    return std::uniform_int_distribution<long>(lo, hi)(rng);
}

inline LabelMap generate_layout(const SceneSpec& spec, Rng& rng) {
    const long h = static_cast<long>(spec.height), w = static_cast<long>(spec.width);
    const std::size_t n = spec.num_classes;
    LabelMap lbl(spec.height, spec.width, kSky);
    const long horizon = uniform_int(rng, h * 35 / 100, h * 50 / 100);
    fill_rect(lbl, {horizon, 0, h, w}, kGround);

    std::vector<Rect> buildings;
    const bool dense = spec.layout == LayoutMode::kDenseCity;
    if (n > kBuilding) {
        if (dense) {
            // A continuous street wall with a few setbacks.
            long x = uniform_int(rng, -w / 10, 0);
            while (x < w) {
                const long bw = uniform_int(rng, w * 14 / 100, w * 26 / 100);
                const long top = uniform_int(rng, h * 8 / 100, horizon - h * 12 / 100);
                const long bottom = horizon + uniform_int(rng, h * 8 / 100, h * 20 / 100);
                buildings.push_back({top, x, bottom, x + bw});
                x += bw + uniform_int(rng, 0, w * 6 / 100);
            }
        } else {
            // A block of buildings clustered on one side of the frame, leaving
            // open ground on the other side for vehicles.
            const bool left = std::bernoulli_distribution(0.5)(rng);
            const long count = uniform_int(rng, 2, 4);
            long x = left ? uniform_int(rng, 0, w / 16) : w - uniform_int(rng, 0, w / 16);
            for (long i = 0; i < count; ++i) {
                const long used = left ? x : w - x;
                if (used > w * 60 / 100) break;
                const long bw = uniform_int(rng, w * 16 / 100, w * 26 / 100);
                const long top = uniform_int(rng, std::max(1L, horizon - h * 40 / 100), horizon - h * 14 / 100);
                const long bottom = horizon + uniform_int(rng, 0, h * 6 / 100);
                if (left) {
                    buildings.push_back({top, x, bottom, x + bw});
                    x += bw;
                } else {
                    buildings.push_back({top, x - bw, bottom, x});
                    x -= bw;
                }
            }
        }
    }

    if (n > kVegetation) {
        const long count = uniform_int(rng, 1, 3);
        for (long i = 0; i < count; ++i) {
            const double cx = static_cast<double>(uniform_int(rng, 0, w - 1));
            const double cy = static_cast<double>(horizon - uniform_int(rng, 0, h * 10 / 100));
            const double ry = static_cast<double>(uniform_int(rng, h * 10 / 100, h * 18 / 100));
            const double rx = static_cast<double>(uniform_int(rng, w * 8 / 100, w * 14 / 100));
            fill_ellipse(lbl, cy, cx, ry, rx, kVegetation);
        }
    }
    for (const auto& b : buildings) fill_rect(lbl, b, kBuilding);

    if (n > kVehicle) {
        const long count = uniform_int(rng, 1, 3);
        std::vector<Rect> placed;
        for (long i = 0; i < count; ++i) {
            const long vw = uniform_int(rng, w * 12 / 100, w * 20 / 100);
            const long vh = uniform_int(rng, h * 10 / 100, h * 16 / 100);
            Rect best{};
            bool ok = false;
            for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
                Rect r{};
                if (dense && !buildings.empty()) {
                    // Parked against the foot of a building wall.
                    const auto& b = buildings[uniform_int(rng, 0, static_cast<long>(buildings.size()) - 1)];
                    const long x0 = uniform_int(rng, b.x0 - vw / 2, b.x1 - vw / 2);
                    const long y0 = b.y1 - uniform_int(rng, 0, 1);
                    r = {y0, x0, y0 + vh, x0 + vw};
                } else {
                    const long y0 = uniform_int(rng, horizon + h * 12 / 100, h - vh);
                    const long x0 = uniform_int(rng, 0, w - vw);
                    r = {y0, x0, y0 + vh, x0 + vw};
                }
                if (r.x0 < 0 || r.x1 > w || r.y1 > h) continue;
                bool clear = true;
                for (const auto& p : placed) clear = clear && rect_gap(r, p) > 1;
                if (!dense) {
                    for (const auto& b : buildings) clear = clear && rect_gap(r, b) >= w / 8;
                }
                if (clear) {
                    best = r;
                    ok = true;
                }
            }
            if (ok) {
                placed.push_back(best);
                fill_rect(lbl, best, kVehicle);
            }
        }
    }
    return lbl;
}

}  // namespace detail

// Deterministic sample `index` of the benchmark described by `spec`. The label
// layout depends only on (seed, index, layout, size, N); palette and noise only
// affect pixel colours.
inline DomainSample generate_sample(const SceneSpec& spec, std::size_t index) {
    spec.validate();
    const std::uint64_t sample_seed = derive_seed(spec.seed, index);
    Rng layout_rng(derive_seed(sample_seed, "layout"));
    Rng color_rng(derive_seed(sample_seed, "color"));

    DomainSample s;
    s.tag = spec.layout == LayoutMode::kDenseCity ? DomainTag::kTarget : DomainTag::kSource;
    s.label = detail::generate_layout(spec, layout_rng);
    s.image = Image(spec.height, spec.width);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t p = 0; p < spec.height * spec.width; ++p) {
        const Rgb& base = spec.palette[s.label.ids[p]];
        for (std::size_t c = 0; c < 3; ++c) {
            double v = base[c];
            if (spec.texture_noise_sigma > 0.0) v += spec.texture_noise_sigma * noise(color_rng);
            s.image.pixels[p * 3 + c] = std::clamp(v, 0.0, 1.0);
        }
    }
    return s;
}

inline std::vector<DomainSample> generate_dataset(const SceneSpec& spec, std::size_t count) {
    if (count < 1) throw ArgumentError("generate_dataset: count must be >= 1");
    spec.validate();
    std::vector<DomainSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, i));
    return out;
}

// ---------------------------------------------------------------------------
// PPM (P6) and PGM (P5) rasters, maxval 255.

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& header,
                       const std::vector<unsigned char>& payload) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

struct NetpbmHeader {
    std::size_t width = 0, height = 0, maxval = 0;
    std::size_t payload_offset = 0;
};

// Parses "P5"/"P6" headers, including '#' comments.
inline NetpbmHeader parse_netpbm(const std::vector<unsigned char>& bytes, const char* magic,
                                 const std::string& name) {
    auto fail = [&](std::size_t off, const std::string& why) -> FormatError {
        return FormatError(name + ": " + why + " at byte " + std::to_string(off));
    };
    if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
        throw fail(0, std::string("expected magic ") + magic);
    }
    std::size_t pos = 2;
    auto next_number = [&]() -> std::size_t {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        if (pos >= bytes.size()) throw fail(pos, "truncated header");
        if (!std::isdigit(bytes[pos])) throw fail(pos, "expected a decimal number");
        std::size_t v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1u << 20) throw fail(pos, "header value too large");
            ++pos;
        }
        return v;
    };
    NetpbmHeader h;
    h.width = next_number();
    h.height = next_number();
    h.maxval = next_number();
    if (h.width == 0 || h.height == 0) throw fail(pos, "zero image dimension");
    if (h.maxval != 255) throw fail(pos, "maxval must be 255");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail(pos, "missing whitespace after maxval");
    h.payload_offset = pos + 1;
    return h;
}

}  // namespace detail

inline void write_image(const std::filesystem::path& path, const Image& img) {
    std::vector<unsigned char> payload(img.pixels.size());
    for (std::size_t i = 0; i < payload.size(); ++i) {
        const double v = img.pixels[i];
        if (!std::isfinite(v)) throw NumericError("write_image: non-finite pixel value");
        payload[i] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    detail::write_file(path, "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n",
                       payload);
}

inline Image read_image(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    const auto h = detail::parse_netpbm(bytes, "P6", path.string());
    const std::size_t need = h.width * h.height * 3;
    if (bytes.size() < h.payload_offset + need) {
        throw FormatError(path.string() + ": truncated payload at byte " + std::to_string(bytes.size()) +
                          ", expected " + std::to_string(h.payload_offset + need));
    }
    Image img(h.height, h.width);
    for (std::size_t i = 0; i < need; ++i) img.pixels[i] = bytes[h.payload_offset + i] / 255.0;
    return img;
}

inline void write_label(const std::filesystem::path& path, const LabelMap& lbl) {
    std::vector<unsigned char> payload(lbl.ids.begin(), lbl.ids.end());
    detail::write_file(path, "P5\n" + std::to_string(lbl.width) + " " + std::to_string(lbl.height) + "\n255\n",
                       payload);
}

// Reads a label map and rejects ids >= num_classes other than kIgnoreLabel.
inline LabelMap read_label(const std::filesystem::path& path, std::size_t num_classes = 255) {
    const auto bytes = detail::read_file(path);
    const auto h = detail::parse_netpbm(bytes, "P5", path.string());
    const std::size_t need = h.width * h.height;
    if (bytes.size() < h.payload_offset + need) {
        throw FormatError(path.string() + ": truncated payload at byte " + std::to_string(bytes.size()) +
                          ", expected " + std::to_string(h.payload_offset + need));
    }
    LabelMap lbl(h.height, h.width);
    for (std::size_t i = 0; i < need; ++i) {
        const auto v = bytes[h.payload_offset + i];
        if (v != kIgnoreLabel && v >= num_classes) {
            throw ValidationError(path.string() + ": class id " + std::to_string(v) + " >= " +
                                  std::to_string(num_classes) + " at byte " +
                                  std::to_string(h.payload_offset + i));
        }
        lbl.ids[i] = v;
    }
    return lbl;
}

// ---------------------------------------------------------------------------
// Dataset directories: <root>/<split>/img_<i>.ppm, lbl_<i>.pgm and
// <root>/manifest.txt with one "img_path<TAB>lbl_path" line per sample, paths
// relative to root.

struct ManifestEntry {
    std::string image_path;
    std::string label_path;
};

inline void write_manifest(const std::filesystem::path& root, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(root / "manifest.txt", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write manifest in " + root.string());
    for (const auto& e : entries) out << e.image_path << '\t' << e.label_path << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root) {
    std::ifstream in(root / "manifest.txt", std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + (root / "manifest.txt").string());
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw FormatError("manifest.txt line " + std::to_string(lineno) + ": missing TAB separator");
        }
        out.push_back({line.substr(0, tab), line.substr(tab + 1)});
    }
    return out;
}

inline std::vector<ManifestEntry> write_dataset(const std::filesystem::path& root, const std::string& split,
                                                const std::vector<DomainSample>& samples) {
    std::filesystem::create_directories(root / split);
    std::vector<ManifestEntry> entries;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        ManifestEntry e{split + "/img_" + std::to_string(i) + ".ppm", split + "/lbl_" + std::to_string(i) + ".pgm"};
        write_image(root / e.image_path, samples[i].image);
        write_label(root / e.label_path, samples[i].label);
        entries.push_back(std::move(e));
    }
    write_manifest(root, entries);
    return entries;
}

inline std::vector<DomainSample> read_dataset(const std::filesystem::path& root, std::size_t num_classes,
                                              DomainTag tag = DomainTag::kSource) {
    std::vector<DomainSample> out;
    for (const auto& e : read_manifest(root)) {
        DomainSample s;
        s.image = read_image(root / e.image_path);
        s.label = read_label(root / e.label_path, num_classes);
        check_same_size(s.image, s.label, e.image_path.c_str());
        s.tag = tag;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace osseg
