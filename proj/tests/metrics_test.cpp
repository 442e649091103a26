#include <gtest/gtest.h>

#include <random>

#include "osseg/metrics.hpp"

using namespace osseg;

TEST(Accumulate, PerfectSingleClass) {
    ConfusionMatrix cm(3);
    LabelMap l(2, 2, 0);
    accumulate(cm, l, l);
    EXPECT_EQ(cm(0, 0), 4u);
    EXPECT_EQ(cm.total(), 4u);
}

TEST(Accumulate, IgnoreSkipsPixels) {
    ConfusionMatrix cm(3);
    accumulate(cm, LabelMap(3, 3, 1), LabelMap(3, 3, kIgnoreLabel));
    EXPECT_EQ(cm, ConfusionMatrix(3));
}

TEST(Accumulate, MatchesCountingOracle) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        LabelMap pred(8, 8), gt(8, 8);
        for (auto& v : pred.ids) v = static_cast<std::uint8_t>(rng() % 3);
        for (auto& v : gt.ids) v = rng() % 5 == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(rng() % 3);
        ConfusionMatrix cm(3);
        accumulate(cm, pred, gt);
        std::uint64_t valid = 0;
        for (std::size_t g = 0; g < 3; ++g)
            for (std::size_t q = 0; q < 3; ++q) {
                std::uint64_t n = 0;
                for (std::size_t p = 0; p < 64; ++p) n += gt.ids[p] == g && pred.ids[p] == q;
                EXPECT_EQ(cm(g, q), n);
            }
        for (auto v : gt.ids) valid += v != kIgnoreLabel;
        EXPECT_EQ(cm.total(), valid);
    }
}

TEST(Accumulate, Errors) {
    ConfusionMatrix cm(2);
    EXPECT_THROW(accumulate(cm, LabelMap(2, 2), LabelMap(2, 3)), DimensionError);
    EXPECT_THROW(accumulate(cm, LabelMap(2, 2, 2), LabelMap(2, 2, 0)), ValidationError);
    EXPECT_THROW(accumulate(cm, LabelMap(2, 2, 0), LabelMap(2, 2, 3)), ValidationError);
    EXPECT_EQ(cm.total(), 0u);
}

TEST(IoU, HandCase) {
    ConfusionMatrix cm(2);
    cm(0, 0) = 2;
    cm(0, 1) = 1;
    cm(1, 0) = 1;
    cm(1, 1) = 2;
    auto r = iou_report(cm, {1});
    EXPECT_EQ(*r.per_class[0], 0.5);
    EXPECT_EQ(*r.per_class[1], 0.5);
    EXPECT_EQ(r.miou, 0.5);
    EXPECT_EQ(r.miou_subset, 0.5);
}

TEST(IoU, PerfectAndDisjoint) {
    ConfusionMatrix cm(3);
    cm(0, 0) = 5;
    cm(1, 1) = 7;
    auto r = iou_report(cm);
    EXPECT_EQ(*r.per_class[0], 1.0);
    EXPECT_EQ(*r.per_class[1], 1.0);
    EXPECT_FALSE(r.per_class[2].has_value());
    EXPECT_EQ(r.miou, 1.0);

    ConfusionMatrix d(2);
    d(0, 1) = 3;
    auto rd = iou_report(d);
    EXPECT_EQ(*rd.per_class[0], 0.0);
    EXPECT_EQ(*rd.per_class[1], 0.0);
}

TEST(IoU, SubsetAveragesOnlyListedPresentClasses) {
    ConfusionMatrix cm(4);
    cm(0, 0) = 1;
    cm(1, 1) = 1;
    cm(1, 2) = 1;
    auto r = iou_report(cm, {1, 3});
    EXPECT_DOUBLE_EQ(r.miou_subset, 0.5);
    EXPECT_DOUBLE_EQ(r.miou, (1.0 + 0.5 + 0.0) / 3.0);
    EXPECT_THROW(iou_report(cm, {4}), ArgumentError);
}

TEST(IoU, PermutationAndBounds) {
    std::mt19937_64 rng(2);
    const std::vector<std::size_t> perm{3, 1, 4, 0, 2};
    for (int trial = 0; trial < 100; ++trial) {
        ConfusionMatrix cm(5), pm(5);
        for (std::size_t g = 0; g < 5; ++g)
            for (std::size_t q = 0; q < 5; ++q) {
                const auto v = rng() % 4 == 0 ? 0 : rng() % 50;
                cm(g, q) = v;
                pm(perm[g], perm[q]) = v;
            }
        auto a = iou_report(cm), b = iou_report(pm);
        for (std::size_t c = 0; c < 5; ++c) {
            EXPECT_EQ(a.per_class[c], b.per_class[perm[c]]);
            if (a.per_class[c]) {
                EXPECT_GE(*a.per_class[c], 0.0);
                EXPECT_LE(*a.per_class[c], 1.0);
            }
        }
        EXPECT_NEAR(a.miou, b.miou, 1e-15);
    }
}

TEST(ConfusionMatrix, MergeIsOrderIndependent) {
    std::mt19937_64 rng(3);
    std::vector<std::pair<LabelMap, LabelMap>> samples;
    for (int i = 0; i < 6; ++i) {
        LabelMap p(4, 4), g(4, 4);
        for (auto& v : p.ids) v = static_cast<std::uint8_t>(rng() % 3);
        for (auto& v : g.ids) v = static_cast<std::uint8_t>(rng() % 3);
        samples.emplace_back(p, g);
    }
    ConfusionMatrix fwd(3), rev(3);
    for (auto& [p, g] : samples) accumulate(fwd, p, g);
    for (auto it = samples.rbegin(); it != samples.rend(); ++it) {
        ConfusionMatrix one(3);
        accumulate(one, it->first, it->second);
        rev += one;
    }
    EXPECT_EQ(fwd, rev);
}
