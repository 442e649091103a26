#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "osseg/fda.hpp"
#include "osseg/synthdata.hpp"

using namespace osseg;

namespace {

Image random_image(std::size_t h, std::size_t w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(h, w);
    for (auto& v : img.pixels) v = u(rng);
    return img;
}

// Textbook double sum, no separability.
std::vector<Complex> direct_dft(const std::vector<Complex>& g, std::size_t h, std::size_t w) {
    std::vector<Complex> out(h * w);
    for (std::size_t ky = 0; ky < h; ++ky)
        for (std::size_t kx = 0; kx < w; ++kx) {
            Complex s = 0.0;
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double a = -2.0 * std::numbers::pi *
                                     (double(ky * y) / double(h) + double(kx * x) / double(w));
                    s += g[y * w + x] * Complex(std::cos(a), std::sin(a));
                }
            out[ky * w + kx] = s;
        }
    return out;
}

double max_abs_diff(const Image& a, const Image& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
    return m;
}

std::vector<Complex> channel(const Image& img, std::size_t c) {
    std::vector<Complex> g(img.height * img.width);
    for (std::size_t p = 0; p < g.size(); ++p) g[p] = img.pixels[p * 3 + c];
    return g;
}

}  // namespace

TEST(Dft, MatchesDirectSummation) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    for (std::size_t n : {4u, 8u}) {
        std::vector<Complex> g(n * n);
        for (auto& v : g) v = {u(rng), u(rng)};
        auto fast = dft2(g, n, n);
        auto slow = direct_dft(g, n, n);
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LT(std::abs(fast[i] - slow[i]), 1e-10);
        auto back = dft2(fast, n, n, true);
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LT(std::abs(back[i] - g[i]), 1e-12);
    }
}

TEST(Fda, BetaZeroIsIdentity) {
    std::mt19937_64 rng(2);
    Image src = random_image(16, 12, rng), ref = random_image(16, 12, rng);
    EXPECT_LE(max_abs_diff(fda_stylize(src, ref, {0.0}), src), 1e-9);
}

TEST(Fda, SelfReferenceIsIdentity) {
    std::mt19937_64 rng(3);
    Image src = random_image(16, 16, rng);
    EXPECT_LE(max_abs_diff(fda_stylize(src, src, {0.5}), src), 1e-9);
}

TEST(Fda, ConstantDcSwap) {
    // DC bin of a constant c on 4x4 is 16c with zero phase; all other bins are
    // zero in both images, so only the DC amplitude changes.
    Image src(4, 4, 0.5), ref(4, 4, 0.25);
    auto spec = direct_dft(channel(src, 0), 4, 4);
    EXPECT_NEAR(spec[0].real(), 8.0, 1e-12);
    EXPECT_NEAR(spec[0].imag(), 0.0, 1e-12);
    FdaWindow win(4, 4, 0.25);
    EXPECT_EQ(win.rows, 1u);
    EXPECT_TRUE(win.contains(0, 0));
    Image out = fda_stylize(src, ref, {0.25});
    for (double v : out.pixels) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(Fda, ShapeMismatchAndNonFinite) {
    Image a(4, 4), b(4, 8);
    EXPECT_THROW(fda_stylize(a, b, {0.1}), DimensionError);
    Image c(4, 4);
    c.pixels[5] = std::nan("");
    EXPECT_THROW(fda_stylize(c, a, {0.1}), NumericError);
    EXPECT_THROW(fda_stylize(a, a, {1.5}), ConfigError);
}

TEST(Fda, AmplitudeOutsideWindowUnchanged) {
    std::mt19937_64 rng(4);
    // Mid-range values so nothing clips; 16 * 0.2 -> a 3 x 3 centred window.
    Image src = random_image(16, 16, rng, 0.3, 0.7), ref = random_image(16, 16, rng, 0.0, 1.0);
    const FdaConfig cfg{0.2};
    Image out = fda_stylize_unclipped(src, ref, cfg);
    FdaWindow win(16, 16, cfg.beta);
    ASSERT_EQ(win.rows, 3u);
    for (std::size_t c = 0; c < 3; ++c) {
        auto fs = direct_dft(channel(src, c), 16, 16);
        auto fo = direct_dft(channel(out, c), 16, 16);
        auto fr = direct_dft(channel(ref, c), 16, 16);
        for (std::size_t ky = 0; ky < 16; ++ky)
            for (std::size_t kx = 0; kx < 16; ++kx) {
                const std::size_t i = ky * 16 + kx;
                const double expect = win.contains(ky, kx) ? std::abs(fr[i]) : std::abs(fs[i]);
                EXPECT_LE(std::abs(std::abs(fo[i]) - expect), 1e-6 * std::max(1.0, expect));
            }
    }
}

TEST(Fda, WindowIsMonotoneInBeta) {
    const std::size_t h = 20, w = 14;
    for (double b1 = 0.0; b1 <= 1.0; b1 += 0.05) {
        for (double b2 = b1; b2 <= 1.0; b2 += 0.05) {
            FdaWindow w1(h, w, b1), w2(h, w, b2);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    if (w1.contains(y, x)) ASSERT_TRUE(w2.contains(y, x)) << b1 << " " << b2;
        }
    }
}

TEST(PseudoTarget, EmptyAndLabelPreserving) {
    Image ref(8, 8, 0.3);
    EXPECT_TRUE(build_pseudo_target({}, ref, {}).empty());
    auto src = generate_dataset(SceneSpec::source_default(5), 6);
    auto ref_sample = generate_sample(SceneSpec::target_default(9), 0);
    auto pt = build_pseudo_target(src, ref_sample.image, {0.05});
    ASSERT_EQ(pt.size(), src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
        EXPECT_EQ(pt[i].label, src[i].label);
        EXPECT_EQ(pt[i].tag, DomainTag::kPseudoTarget);
    }
}

TEST(PseudoTarget, ResizesReferenceAndReportsSampleIndex) {
    auto src = generate_dataset(SceneSpec::source_default(5), 3);
    Image small_ref(16, 16, 0.4);
    EXPECT_NO_THROW(build_pseudo_target(src, small_ref, {0.05}));
    src[2].image.pixels[0] = std::nan("");
    try {
        build_pseudo_target(src, small_ref, {0.05});
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("sample 2"), std::string::npos);
    }
    src[2].tag = DomainTag::kTarget;
    EXPECT_THROW(build_pseudo_target(src, small_ref, {0.05}), ContractError);
}

TEST(PseudoTarget, MeanColourMovesTowardReference) {
    auto src = generate_dataset(SceneSpec::source_default(31), 40);
    const Image ref = generate_sample(SceneSpec::target_default(77), 0).image;
    auto pt = build_pseudo_target(src, ref, {0.05});
    auto mean_rgb = [](const std::vector<const Image*>& imgs) {
        std::array<double, 3> m{};
        std::size_t n = 0;
        for (const Image* img : imgs) {
            for (std::size_t p = 0; p < img->height * img->width; ++p)
                for (std::size_t c = 0; c < 3; ++c) m[c] += img->pixels[p * 3 + c];
            n += img->height * img->width;
        }
        for (auto& v : m) v /= double(n);
        return m;
    };
    std::vector<const Image*> s, t;
    for (auto& x : src) s.push_back(&x.image);
    for (auto& x : pt) t.push_back(&x.image);
    auto ms = mean_rgb(s), mt = mean_rgb(t), mr = mean_rgb({&ref});
    double ds = 0, dt = 0;
    for (int c = 0; c < 3; ++c) {
        ds += (ms[c] - mr[c]) * (ms[c] - mr[c]);
        dt += (mt[c] - mr[c]) * (mt[c] - mr[c]);
    }
    EXPECT_LT(std::sqrt(dt), std::sqrt(ds));
}
