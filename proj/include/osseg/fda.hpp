#pragma once

// Pseudo-target stylization: per RGB channel, the low-frequency amplitude of
// a reference image replaces that of the source while the source phase is
// kept.
//
// Window convention: with the spectrum shifted so DC sits at (H/2, W/2)
// (integer division), the swapped region is the rectangle of
// max(1, floor(beta*H)) x max(1, floor(beta*W)) bins whose top-left corner is
// (H/2 - rows/2, W/2 - cols/2). beta == 0 swaps nothing.

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "osseg/errors.hpp"
#include "osseg/image.hpp"

namespace osseg {

struct FdaConfig {
    double beta = 0.05;

    void validate() const {
        if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("FDA beta must lie in [0, 1], got " + std::to_string(beta));
    }
};

using Complex = std::complex<double>;

// Separable 2-D DFT of an H x W row-major grid. The inverse includes the
// 1/(H*W) normalization.
inline std::vector<Complex> dft2(const std::vector<Complex>& in, std::size_t h, std::size_t w, bool inverse = false) {
    const double sign = inverse ? 1.0 : -1.0;
    auto twiddles = [sign](std::size_t n) {
        std::vector<Complex> t(n);
        for (std::size_t k = 0; k < n; ++k) {
            const double a = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
            t[k] = {std::cos(a), std::sin(a)};
        }
        return t;
    };
    const auto tw = twiddles(w), th = twiddles(h);
    std::vector<Complex> rows(h * w), out(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t k = 0; k < w; ++k) {
            Complex s = 0.0;
            for (std::size_t x = 0; x < w; ++x) s += in[y * w + x] * tw[(k * x) % w];
            rows[y * w + k] = s;
        }
    for (std::size_t k = 0; k < h; ++k)
        for (std::size_t x = 0; x < w; ++x) {
            Complex s = 0.0;
            for (std::size_t y = 0; y < h; ++y) s += rows[y * w + x] * th[(k * y) % h];
            out[k * w + x] = s;
        }
    if (inverse) {
        const double norm = 1.0 / static_cast<double>(h * w);
        for (auto& v : out) v *= norm;
    }
    return out;
}

// Low-frequency swap window in unshifted frequency coordinates.
struct FdaWindow {
    std::size_t height = 0, width = 0;  // image size
    std::size_t rows = 0, cols = 0;     // window size, 0 when beta == 0

    FdaWindow(std::size_t h, std::size_t w, double beta) : height(h), width(w) {
        if (beta > 0.0) {
            rows = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(beta * static_cast<double>(h))));
            cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(beta * static_cast<double>(w))));
        }
    }

    bool empty() const { return rows == 0 || cols == 0; }

    bool contains(std::size_t ky, std::size_t kx) const {
        if (empty()) return false;
        // Position after moving DC to the centre.
        const std::size_t sy = (ky + height / 2) % height, sx = (kx + width / 2) % width;
        const std::size_t y0 = height / 2 - rows / 2, x0 = width / 2 - cols / 2;
        return sy >= y0 && sy < y0 + rows && sx >= x0 && sx < x0 + cols;
    }
};

namespace detail {

inline std::vector<Complex> channel_spectrum(const Image& img, std::size_t c) {
    std::vector<Complex> g(img.height * img.width);
    for (std::size_t p = 0; p < g.size(); ++p) g[p] = img.pixels[p * 3 + c];
    return dft2(g, img.height, img.width);
}

inline void check_finite(const Image& img, const char* which) {
    for (double v : img.pixels) {
        if (!std::isfinite(v)) throw NumericError(std::string("fda_stylize: non-finite pixel in ") + which);
    }
}

}  // namespace detail

// Stylized image before clipping; the real part of the inverse transform.
inline Image fda_stylize_unclipped(const Image& src, const Image& reference, const FdaConfig& cfg) {
    cfg.validate();
    if (src.height != reference.height || src.width != reference.width) {
        throw DimensionError("fda_stylize: source " + std::to_string(src.height) + "x" + std::to_string(src.width) +
                             " vs reference " + std::to_string(reference.height) + "x" +
                             std::to_string(reference.width));
    }
    detail::check_finite(src, "source");
    detail::check_finite(reference, "reference");
    const FdaWindow window(src.height, src.width, cfg.beta);
    if (window.empty()) return src;

    const std::size_t h = src.height, w = src.width;
    Image out(h, w);
    for (std::size_t c = 0; c < 3; ++c) {
        auto fs = detail::channel_spectrum(src, c);
        const auto fr = detail::channel_spectrum(reference, c);
        for (std::size_t ky = 0; ky < h; ++ky)
            for (std::size_t kx = 0; kx < w; ++kx) {
                if (!window.contains(ky, kx)) continue;
                auto& v = fs[ky * w + kx];
                v = std::polar(std::abs(fr[ky * w + kx]), std::arg(v));
            }
        const auto back = dft2(fs, h, w, true);
        for (std::size_t p = 0; p < h * w; ++p) out.pixels[p * 3 + c] = back[p].real();
    }
    return out;
}

inline Image fda_stylize(const Image& src, const Image& reference, const FdaConfig& cfg) {
    Image out = fda_stylize_unclipped(src, reference, cfg);
    for (auto& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
    return out;
}

// One PSEUDO_TARGET sample per SOURCE input: image stylized toward the
// reference, label copied. The reference is resampled to each source size.
inline std::vector<DomainSample> build_pseudo_target(const std::vector<DomainSample>& dataset, const Image& reference,
                                                     const FdaConfig& cfg) {
    std::vector<DomainSample> out;
    out.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& s = dataset[i];
        if (s.tag != DomainTag::kSource) {
            throw ContractError("build_pseudo_target: sample " + std::to_string(i) + " is not tagged SOURCE");
        }
        DomainSample pt;
        try {
            pt.image = fda_stylize(s.image, resize_bilinear(reference, s.image.height, s.image.width), cfg);
        } catch (const NumericError& e) {
            throw NumericError("sample " + std::to_string(i) + ": " + e.what());
        } catch (const DimensionError& e) {
            throw DimensionError("sample " + std::to_string(i) + ": " + e.what());
        }
        pt.label = s.label;
        pt.tag = DomainTag::kPseudoTarget;
        out.push_back(std::move(pt));
    }
    return out;
}

}  // namespace osseg
