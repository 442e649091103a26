#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "osseg/errors.hpp"
#include "osseg/tensor.hpp"

namespace osseg {

// H x W x 3 raster, channels interleaved, values nominally in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w * 3, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    bool operator==(const Image&) const = default;
};

// H x W class ids; kIgnoreLabel marks pixels excluded from losses and metrics.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> ids;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), ids(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return ids[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return ids[y * width + x]; }

    // Distinct non-ignore ids, ascending.
    std::vector<std::uint8_t> present_classes() const {
        bool seen[256] = {};
        for (auto v : ids) seen[v] = true;
        std::vector<std::uint8_t> out;
        for (int c = 0; c < 255; ++c)
            if (seen[c]) out.push_back(static_cast<std::uint8_t>(c));
        return out;
    }

    bool operator==(const LabelMap&) const = default;
};

enum class DomainTag { kSource, kPseudoTarget, kIntermediate, kTarget };

struct DomainSample {
    Image image;
    LabelMap label;
    DomainTag tag = DomainTag::kSource;
};

inline void check_same_size(const Image& a, const LabelMap& b, const char* what) {
    if (a.height != b.height || a.width != b.width) {
        throw DimensionError(std::string(what) + ": image " + std::to_string(a.height) + "x" +
                             std::to_string(a.width) + " vs label " + std::to_string(b.height) + "x" +
                             std::to_string(b.width));
    }
}

// 3 x H x W tensor from an interleaved image.
inline Tensor image_to_chw(const Image& img) {
    Tensor t(Shape{3, img.height, img.width});
    const std::size_t hw = img.height * img.width;
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < 3; ++c) t[c * hw + p] = img.pixels[p * 3 + c];
    return t;
}

// Bilinear resampling with half-pixel centres and edge clamping.
inline Image resize_bilinear(const Image& src, std::size_t h, std::size_t w) {
    if (src.height == h && src.width == w) return src;
    Image out(h, w);
    const double sy = static_cast<double>(src.height) / static_cast<double>(h);
    const double sx = static_cast<double>(src.width) / static_cast<double>(w);
    for (std::size_t y = 0; y < h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, double(src.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, src.height - 1);
        const double ay = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < w; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, double(src.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, src.width - 1);
            const double ax = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < 3; ++c) {
                out.at(y, x, c) = (1 - ay) * ((1 - ax) * src.at(y0, x0, c) + ax * src.at(y0, x1, c)) +
                                  ay * ((1 - ax) * src.at(y1, x0, c) + ax * src.at(y1, x1, c));
            }
        }
    }
    return out;
}

inline Image crop(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
    Image out(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

inline LabelMap crop(const LabelMap& lbl, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
    LabelMap out(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out.at(y, x) = lbl.at(y0 + y, x0 + x);
    return out;
}

}  // namespace osseg
