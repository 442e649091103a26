#include <gtest/gtest.h>

#include <chrono>
#include <numeric>
#include <random>

#include "osseg/synthdata.hpp"
#include "osseg/trainer.hpp"

using namespace osseg;

namespace {

TrainConfig small_train_config(AttentionPairing pairing = AttentionPairing::kOursPtToIntermediate) {
    TrainConfig c;
    c.model.embed_dim = 16;
    c.model.backbone_channels = {4, 8, 16};
    c.model.pixel_channels = 8;
    c.model.ffn_dim = 32;
    c.crop = 16;
    c.pairing = pairing;
    c.model.attention_pairing = pairing;
    return c;
}

struct Fixture {
    std::vector<DomainSample> source = generate_dataset(SceneSpec::source_default(11), 8);
    Image reference = generate_sample(SceneSpec::target_default(12), 0).image;
    std::vector<DomainSample> pt = build_pseudo_target(source, reference, {0.05});
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

}  // namespace

TEST(TrainConfig, TextRoundTripAndErrors) {
    TrainConfig c = small_train_config(AttentionPairing::kVariantST);
    c.seed = 1234567890123ULL;
    c.lr = 3.3e-4;
    c.use_cidr = false;
    auto back = TrainConfig::from_text(c.to_text());
    EXPECT_EQ(back.to_text(), c.to_text());
    EXPECT_EQ(back.model.attention_pairing, AttentionPairing::kVariantST);

    EXPECT_THROW(TrainConfig::from_text("ema_alpha = 1.0\n"), ConfigError);
    EXPECT_THROW(TrainConfig::from_text("lambda_cd = -1\n"), ConfigError);
    EXPECT_THROW(TrainConfig::from_text("nonsense = 3\n"), ConfigError);
    EXPECT_THROW(TrainConfig::from_text("lr = fast\n"), ConfigError);
    EXPECT_THROW(TrainConfig::from_text("use_cidr = false\npairing = ours\n"), ConfigError);
    auto d = TrainConfig::from_text("# defaults\n\nseed = 5 # trailing comment\n");
    EXPECT_EQ(d.seed, 5u);
    EXPECT_EQ(d.lambda_cd, 0.01);
    EXPECT_EQ(d.ema_alpha, 0.99);
}

TEST(PseudoLabel, DominantClassAndTies) {
    Tensor logits(Shape{3, 2, 2});
    for (std::size_t p = 0; p < 4; ++p) logits[2 * 4 + p] = 5.0;
    LabelMap l = labels_from_logits(logits, 0.0);
    for (auto v : l.ids) EXPECT_EQ(v, 2);
    // All-zero teacher: every class ties, lowest id wins.
    ModelConfig mc;
    auto z = pseudo_label(mc, zero_params(mc), Image(16, 16, 0.5), 0.0);
    for (auto v : z.ids) EXPECT_EQ(v, 0);
}

TEST(PseudoLabel, ThresholdOneIgnoresEverything) {
    ModelConfig mc;
    auto l = pseudo_label(mc, init_params(mc, 3), generate_sample(SceneSpec::source_default(1), 0).image, 1.0);
    for (auto v : l.ids) EXPECT_EQ(v, kIgnoreLabel);
}

TEST(PseudoLabel, MatchesArgmaxOracleWithIntegerTies) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits(Shape{4, 3, 5});
        for (auto& v : logits.storage()) v = static_cast<double>(rng() % 3);  // frequent ties
        const double threshold = trial % 2 ? 0.5 : 0.0;
        LabelMap l = labels_from_logits(logits, threshold);
        for (std::size_t p = 0; p < 15; ++p) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < 4; ++c)
                if (logits[c * 15 + p] > logits[best * 15 + p]) best = c;
            double z = 0;
            for (std::size_t c = 0; c < 4; ++c) z += std::exp(logits[c * 15 + p]);
            const double top = std::exp(logits[best * 15 + p]) / z;
            const std::uint8_t expect = top < threshold ? kIgnoreLabel : static_cast<std::uint8_t>(best);
            EXPECT_EQ(l.ids[p], expect);
        }
    }
}

TEST(Losses, CombinationArithmetic) {
    EXPECT_NEAR(combine_losses(1.0, 2.0, 3.0, 0.0, 0.01), 3.03, 1e-15);
    EXPECT_EQ(combine_losses(1.5, 2.5, 7.0, 0.0, 0.0), 4.0);
}

TEST(Ema, Arithmetic) {
    ModelConfig mc;
    ModelParams teacher = zero_params(mc), student = zero_params(mc);
    for (std::size_t i = 0; i < student.size(); ++i)
        for (auto& v : student[i].storage()) v = 1.0;
    ema_update(teacher, student, 0.99);
    for (std::size_t i = 0; i < teacher.size(); ++i)
        for (double v : teacher[i].data()) EXPECT_NEAR(v, 0.01, 1e-15);
}

TEST(TrainStep, LambdaZeroWithoutCrossTermIsPtPlusIdr) {
    TrainConfig cfg = small_train_config(AttentionPairing::kNone);
    cfg.lambda_cd = 0.0;
    Rng rng(5);
    ModelParams student = init_params(cfg.model, 1), teacher = student;
    AdamW opt(student, cfg.lr, cfg.weight_decay);
    for (int s = 0; s < 3; ++s) {
        auto batch = draw_batch(fixture().source, fixture().pt, cfg, rng);
        auto r = train_step(student, teacher, opt, batch, cfg, s);
        EXPECT_EQ(r.l_total, r.l_pt + r.l_idr);
        EXPECT_EQ(r.l_cd, 0.0);
        EXPECT_GT(r.l_idr, 0.0);
    }
}

TEST(TrainStep, LossIdentityHoldsForEveryPairing) {
    for (auto pairing : {AttentionPairing::kNone, AttentionPairing::kOursPtToIntermediate,
                         AttentionPairing::kVariantST, AttentionPairing::kVariantS}) {
        TrainConfig cfg = small_train_config(pairing);
        Rng rng(6);
        ModelParams student = init_params(cfg.model, 2), teacher = student;
        AdamW opt(student, cfg.lr, cfg.weight_decay);
        for (int s = 0; s < 5; ++s) {
            auto r = train_step(student, teacher, opt, draw_batch(fixture().source, fixture().pt, cfg, rng), cfg, s);
            EXPECT_NEAR(r.l_total, combine_losses(r.l_pt, r.l_idr, r.l_cd, r.l_src, cfg.lambda_cd), 1e-12);
            if (pairing == AttentionPairing::kVariantS) EXPECT_EQ(r.l_pt, 0.0);
            if (pairing == AttentionPairing::kVariantS || pairing == AttentionPairing::kVariantST) {
                EXPECT_GT(r.l_src, 0.0);
            } else {
                EXPECT_EQ(r.l_src, 0.0);
            }
            if (pairing != AttentionPairing::kNone) EXPECT_GT(r.l_cd, 0.0);
        }
    }
}

TEST(TrainStep, TeacherMovesOnlyByEma) {
    TrainConfig cfg = small_train_config();
    Rng rng(7);
    ModelParams student = init_params(cfg.model, 3), teacher = init_params(cfg.model, 4);
    const ModelParams before = teacher;
    AdamW opt(student, cfg.lr, cfg.weight_decay);
    train_step(student, teacher, opt, draw_batch(fixture().source, fixture().pt, cfg, rng), cfg);
    ModelParams expect = before;
    ema_update(expect, student, cfg.ema_alpha);
    EXPECT_EQ(expect, teacher);
}

TEST(TrainStep, BatchOrderDoesNotMatter) {
    TrainConfig cfg = small_train_config();
    Rng rng(8);
    auto batch = draw_batch(fixture().source, fixture().pt, cfg, rng);
    auto reversed = batch;
    std::reverse(reversed.begin(), reversed.end());
    ModelParams s1 = init_params(cfg.model, 5), t1 = s1, s2 = s1, t2 = s1;
    AdamW o1(s1, cfg.lr, cfg.weight_decay), o2(s2, cfg.lr, cfg.weight_decay);
    auto r1 = train_step(s1, t1, o1, batch, cfg);
    auto r2 = train_step(s2, t2, o2, reversed, cfg);
    EXPECT_NEAR(r1.l_total, r2.l_total, 1e-12);
    for (std::size_t i = 0; i < s1.size(); ++i)
        for (std::size_t k = 0; k < s1[i].numel(); ++k) ASSERT_NEAR(s1[i][k], s2[i][k], 1e-9) << s1.name(i);
}

TEST(TrainStep, GroundTruthMixChangesOnlyLabels) {
    TrainConfig a = small_train_config(), b = a;
    b.use_ground_truth_mix = true;
    Rng ra(9), rb(9);
    const ModelParams teacher = init_params(a.model, 6);
    for (int s = 0; s < 5; ++s) {
        auto ba = draw_batch(fixture().source, fixture().pt, a, ra);
        auto bb = draw_batch(fixture().source, fixture().pt, b, rb);
        for (std::size_t k = 0; k < ba.size(); ++k) {
            auto ia = intermediate_sample(ba[k], teacher, a);
            auto ib = intermediate_sample(bb[k], teacher, b);
            EXPECT_EQ(ia.image, ib.image);
            const auto mask = build_mask(ba[k].label, ba[k].classes);
            for (std::size_t p = 0; p < mask.bits.size(); ++p) {
                if (mask.bits[p]) EXPECT_EQ(ia.label.ids[p], ib.label.ids[p]);
                else EXPECT_EQ(ib.label.ids[p], ba[k].acceptor_label.ids[p]);
            }
        }
    }
}

TEST(TrainStep, TeacherLabelsTheUncroppedAcceptor) {
    const TrainConfig cfg = small_train_config();
    Rng rng(12);
    const ModelParams teacher = init_params(cfg.model, 7);
    for (const auto& ex : draw_batch(fixture().source, fixture().pt, cfg, rng)) {
        ASSERT_EQ(ex.acceptor_full.height, 64u);
        EXPECT_EQ(crop(ex.acceptor_full, ex.acceptor_y0, ex.acceptor_x0, cfg.crop, cfg.crop), ex.acceptor);
        const LabelMap whole = pseudo_label(cfg.model, teacher, ex.acceptor_full, 0.0);
        EXPECT_EQ(acceptor_pseudo_label(ex, teacher, cfg),
                  crop(whole, ex.acceptor_y0, ex.acceptor_x0, cfg.crop, cfg.crop));
    }
}

TEST(TrainStep, NonFiniteLossNamesTheTerm) {
    TrainConfig cfg = small_train_config(AttentionPairing::kNone);
    cfg.use_cidr = false;
    Rng rng(10);
    auto batch = draw_batch(fixture().source, fixture().pt, cfg, rng);
    batch[0].pseudo_target.pixels[0] = std::nan("");
    ModelParams s = init_params(cfg.model, 1), t = s;
    AdamW opt(s, cfg.lr, cfg.weight_decay);
    try {
        train_step(s, t, opt, batch, cfg, 17);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("l_pt"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
    }
}

TEST(Train, ZeroIterationsKeepsInitialization) {
    TrainConfig cfg = small_train_config();
    cfg.iterations = 0;
    auto r = train(cfg, fixture().source, fixture().reference);
    EXPECT_EQ(r.teacher, init_params(cfg.model, cfg.seed));
    EXPECT_TRUE(r.log.empty());
    EXPECT_THROW(train(cfg, {}, fixture().reference), ArgumentError);
}

TEST(Train, DeterministicGivenSeed) {
    TrainConfig cfg = small_train_config();
    cfg.iterations = 6;
    cfg.seed = 42;
    auto a = train(cfg, fixture().source, fixture().reference);
    auto b = train(cfg, fixture().source, fixture().reference);
    EXPECT_EQ(serialize_checkpoint(cfg.model, a.teacher), serialize_checkpoint(cfg.model, b.teacher));
    cfg.seed = 43;
    auto c = train(cfg, fixture().source, fixture().reference);
    EXPECT_NE(serialize_checkpoint(cfg.model, a.teacher), serialize_checkpoint(cfg.model, c.teacher));
}

TEST(Train, LossDecreasesOverTwoHundredSteps) {
    TrainConfig cfg;  // default model and crop on the synthetic benchmark
    cfg.iterations = 200;
    cfg.seed = 3;
    const auto source = generate_dataset(SceneSpec::source_default(21), 40);
    const Image ref = generate_sample(SceneSpec::target_default(22), 0).image;
    auto r = train(cfg, source, ref);
    ASSERT_EQ(r.log.size(), 200u);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 50; ++i) {
        first += r.log[i].l_total;
        last += r.log[150 + i].l_total;
    }
    EXPECT_LT(last, first);
    EXPECT_TRUE(r.teacher.all_finite());
}
