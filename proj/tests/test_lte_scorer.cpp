// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "evictd/lte_scorer.hpp"
#include "evictd/model.hpp"
#include "evictd/random.hpp"
#include "support.hpp"

using namespace evictd;
using evictd::testing::rel_err;
using evictd::testing::weighted;

TEST(Scorer, ReceptiveFieldIsThirteen) {
    EXPECT_EQ(kReceptiveField, 13u);
    EXPECT_EQ(kHalfReceptive, 6u);
}

TEST(Scorer, ChannelWidthsHalve) {
    EXPECT_EQ(LteScorerParams::widths(16), (std::vector<std::size_t>{32, 16, 8, 4}));
}

TEST(Scorer, ZeroInputsGiveExactlyOneHalf) {
    LteScorerParams p = LteScorerParams::init(2, 8, 1);
    for (auto& l : p.layers) {
        l.bias = Tensor(l.bias.shape());  // zero input and zero conv biases: every activation is 0
    }
    const Tensor r = score_tokens(Tensor({20, 16}), Tensor({20, 16}), p);
    for (double x : r.storage()) {
        EXPECT_EQ(x, 0.5);
    }
}

TEST(Scorer, ScoresLieStrictlyInsideTheUnitInterval) {
    Rng rng(2);
    const LteScorerParams p = LteScorerParams::init(3, 8, 4, 3.0);
    const Tensor r = score_tokens(normal_tensor({40, 24}, rng, 2.0), normal_tensor({40, 24}, rng, 2.0), p);
    for (double x : r.storage()) {
        EXPECT_GT(x, 0.0);
        EXPECT_LT(x, 1.0);
    }
}

TEST(Scorer, PerturbingOutsideTheReceptiveFieldChangesNothing) {
    Rng rng(3);
    const LteScorerParams p = LteScorerParams::init(2, 8, 5, 3.0);
    const std::size_t T = 60;
    const Tensor k = normal_tensor({T, 16}, rng), v = normal_tensor({T, 16}, rng);
    const Tensor base = score_tokens(k, v, p);
    for (std::size_t j : {10u, 25u, 40u}) {
        Tensor k2 = k;
        for (std::size_t c = 0; c < 16; ++c) {
            k2(j + 7, c) += 3.0;
            k2(j - 7, c) -= 3.0;
        }
        const Tensor r2 = score_tokens(k2, v, p);
        EXPECT_EQ(r2(j, 0), base(j, 0));
        EXPECT_EQ(r2(j, 1), base(j, 1));
        // inside the field the score does move
        Tensor k3 = k;
        for (std::size_t c = 0; c < 16; ++c) {
            k3(j + 6, c) += 3.0;
        }
        EXPECT_NE(score_tokens(k3, v, p)(j, 0), base(j, 0));
    }
}

TEST(Scorer, HeadsAreIndependent) {
    Rng rng(4);
    const LteScorerParams p = LteScorerParams::init(3, 8, 6, 3.0);
    const Tensor k = normal_tensor({30, 24}, rng), v = normal_tensor({30, 24}, rng);
    const Tensor base = score_tokens(k, v, p);
    Tensor v2 = v;
    for (std::size_t t = 0; t < 30; ++t) {
        for (std::size_t c = 8; c < 16; ++c) {  // head 1 only
            v2(t, c) = -v2(t, c) + 1.0;
        }
    }
    const Tensor r2 = score_tokens(k, v2, p);
    for (std::size_t t = 0; t < 30; ++t) {
        EXPECT_EQ(r2(t, 0), base(t, 0));
        EXPECT_EQ(r2(t, 2), base(t, 2));
    }
}

TEST(Scorer, LocalityAgreesWithReceptiveBoundsOnRandomTokens) {
    Rng rng(5);
    const LteScorerParams p = LteScorerParams::init(1, 4, 7, 3.0);
    const std::size_t T = 80;
    const Tensor k = normal_tensor({T, 4}, rng), v = normal_tensor({T, 4}, rng);
    const Tensor base = score_tokens(k, v, p);
    std::uniform_int_distribution<std::size_t> pick(0, T - 1);
    for (int n = 0; n < 50; ++n) {
        const std::size_t j = pick(rng), m = pick(rng);
        const auto [lo, hi] = scorer_receptive_bounds(j);
        Tensor v2 = v;
        v2(m, 0) += 2.5;
        const bool changed = score_tokens(k, v2, p)(j, 0) != base(j, 0);
        if (m < lo || m > hi) {
            EXPECT_FALSE(changed) << "j=" << j << " m=" << m;
        }
    }
}

TEST(Scorer, ReceptiveBoundsClampAtTheStart) {
    // 0-based: the first token's field is clamped to [0, 6]
    EXPECT_EQ(scorer_receptive_bounds(0), (std::pair<std::size_t, std::size_t>{0, 6}));
    EXPECT_EQ(scorer_receptive_bounds(99), (std::pair<std::size_t, std::size_t>{93, 105}));
}

TEST(Scorer, BinarizeIsStrict) {
    const Tensor r({1, 4}, {0.5, 0.5 + 1e-9, 0.2, 0.9});
    EXPECT_EQ(binarize(r), (BinaryRetention{0, 1, 0, 1}));
}

TEST(Scorer, BinarizeMatchesElementwiseComparison) {
    Rng rng(6);
    const Tensor r = uniform_tensor({25, 3}, rng, 0.0, 1.0);
    const BinaryRetention b = binarize(r);
    for (std::size_t i = 0; i < r.size(); ++i) {
        EXPECT_EQ(b[i] != 0, r[i] > 0.5);
    }
}

TEST(Scorer, HeadCountMismatchIsParameterError) {
    const LteScorerParams p = LteScorerParams::init(2, 8, 1);
    EXPECT_THROW(score_tokens(Tensor({10, 24}), Tensor({10, 24}), p), Error);
}

TEST(Scorer, TapeGradientMatchesFiniteDifferences) {
    Rng rng(7);
    const LteScorerParams p = LteScorerParams::init(2, 4, 9, 3.0);
    const Tensor k = normal_tensor({15, 8}, rng), v = normal_tensor({15, 8}, rng), c = normal_tensor({15, 2}, rng);
    ad::Tape tape;
    ad::Var kv = tape.parameter(k), vv = tape.parameter(v);
    const ad::ScorerVars sv = ad::bind(tape, p, true);
    tape.backward(ad::weighted_sum(ad::score_tokens(kv, vv, sv, 2, 4, Mode::eval, 0), c));
    EXPECT_LT(rel_err(tape.grad(kv), finite_difference_oracle([&](const Tensor& x) { return weighted(score_tokens(x, v, p), c); }, k)),
              1e-5);
    for (std::size_t l = 0; l < kScorerLayers; ++l) {
        const Tensor fd = finite_difference_oracle(
            [&](const Tensor& x) {
                LteScorerParams q = p;
                q.layers[l].weight = x;
                return weighted(score_tokens(k, v, q), c);
            },
            p.layers[l].weight);
        EXPECT_LT(rel_err(tape.grad(sv.weight[l]), fd), 1e-5) << "layer " << l;
    }
}

TEST(Scorer, DropoutOnlyInTrainMode) {
    Rng rng(8);
    const LteScorerParams p = LteScorerParams::init(1, 8, 2, 3.0);
    const Tensor k = normal_tensor({20, 8}, rng), v = normal_tensor({20, 8}, rng);
    EXPECT_EQ(score_tokens(k, v, p, Mode::eval, 1), score_tokens(k, v, p, Mode::eval, 2));
    EXPECT_EQ(score_tokens(k, v, p, Mode::train, 1), score_tokens(k, v, p, Mode::train, 1));
    EXPECT_NE(score_tokens(k, v, p, Mode::train, 1), score_tokens(k, v, p, Mode::train, 2));
}

TEST(Scorer, UntrainedScoresSitNearOneHalf) {
    Rng rng(9);
    const LteScorerParams p = LteScorerParams::init(2, 16, 3);
    const Tensor r = score_tokens(normal_tensor({64, 32}, rng), normal_tensor({64, 32}, rng), p);
    for (double x : r.storage()) {
        EXPECT_NEAR(x, 0.5, 0.05);
    }
}

namespace {

double scorer_share(const std::string& preset) {
    std::size_t total = 0, scorer = 0;
    for (const auto& s : parameter_specs(ModelConfig::preset(preset))) {
        total += shape_size(s.shape);
        scorer += s.scorer ? shape_size(s.shape) : 0;
    }
    return static_cast<double>(scorer) / static_cast<double>(total - scorer);
}

}  // namespace

TEST(Scorer, ParameterShareOfTheSmallShapePresetIsInBand) {
    const double share = scorer_share("0.4b-shape");
    EXPECT_GE(share, 0.003);
    EXPECT_LE(share, 0.03);
}

TEST(Scorer, ParameterCountFormulaMatchesMaterialisedWeights) {
    for (std::size_t d : {4u, 16u, 64u}) {
        EXPECT_EQ(LteScorerParams::parameter_count(3, d), LteScorerParams::init(3, d, 0).parameter_count());
    }
    // grouped-query preset: one scorer group per KV head on every LTE layer
    const ModelConfig c = ModelConfig::preset("1.4b-shape");
    std::size_t scorer = 0;
    for (const auto& s : parameter_specs(c)) {
        scorer += s.scorer ? shape_size(s.shape) : 0;
    }
    EXPECT_EQ(scorer, c.lte_layers() * LteScorerParams::parameter_count(c.kv_heads, c.head_dim));
}
