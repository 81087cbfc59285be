// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "evictd/attention.hpp"
#include "evictd/numerics.hpp"
#include "evictd/random.hpp"

using namespace evictd;

namespace {

struct Qkv {
    Tensor q, k, v;
};

Qkv random_qkv(std::size_t T, std::size_t d, Rng& rng) {
    return {normal_tensor({T, d}, rng), normal_tensor({T, d}, rng), normal_tensor({T, d}, rng)};
}

// Dense scores, -inf outside the allowed mask, row softmax, times V.
Tensor masked_by_infinity(const Qkv& x, const std::vector<std::vector<bool>>& allow, double scale) {
    Tensor s = matmul(x.q, transpose(x.k));
    for (std::size_t i = 0; i < s.dim(0); ++i) {
        for (std::size_t j = 0; j < s.dim(1); ++j) {
            s(i, j) = allow[i][j] ? s(i, j) * scale : -std::numeric_limits<double>::infinity();
        }
    }
    return matmul(softmax_row(s), x.v);
}

std::vector<std::vector<bool>> to_mask(const IndexSet& idx, std::size_t T) {
    std::vector<std::vector<bool>> m(T, std::vector<bool>(T, false));
    for (std::size_t i = 0; i < T; ++i) {
        for (auto j : idx[i]) {
            m[i][j] = true;
        }
    }
    return m;
}

std::vector<double> column(const std::vector<double>& r) {
    return r;
}

}  // namespace

TEST(DenseAttention, SingleTokenReturnsItsValue) {
    Rng rng(1);
    const Qkv x = random_qkv(1, 4, rng);
    EXPECT_EQ(dense_causal_attention(x.q, x.k, x.v, 0.5), x.v);
}

TEST(DenseAttention, IdenticalKeysAverageThePrefix) {
    Rng rng(2);
    Qkv x = random_qkv(6, 3, rng);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            x.k(i, c) = 0.7;
        }
    }
    const Tensor o = dense_causal_attention(x.q, x.k, x.v, 1.0);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            double mean = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                mean += x.v(j, c);
            }
            EXPECT_NEAR(o(i, c), mean / static_cast<double>(i + 1), 1e-12);
        }
    }
}

TEST(DenseAttention, MatchesMaskedSoftmaxLoop) {
    Rng rng(3);
    const Qkv x = random_qkv(4, 5, rng);
    std::vector<std::vector<bool>> causal(4, std::vector<bool>(4));
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            causal[i][j] = true;
        }
    }
    EXPECT_LT(max_abs_diff(dense_causal_attention(x.q, x.k, x.v, 0.3), masked_by_infinity(x, causal, 0.3)), 1e-12);
}

TEST(DenseAttention, EmptySequenceGivesEmptyOutput) {
    const Tensor e({0, 4});
    EXPECT_EQ(dense_causal_attention(e, e, e, 1.0).size(), 0u);
}

TEST(IndexSet, NoRetentionWithWideWindowIsCausal) {
    const std::vector<double> r(10, 0.0);
    EXPECT_EQ(build_index_set(10, column(r), 0, 10), full_causal_index_set(10));
}

TEST(IndexSet, FullRetentionIsCausalForAnyWindow) {
    const std::vector<double> r(15, 1.0);
    for (std::size_t w : {1, 3, 7}) {
        EXPECT_EQ(build_index_set(15, column(r), 0, w), full_causal_index_set(15));
    }
}

TEST(IndexSet, SinkColumnAndWindowPattern) {
    // s = 2, w = 12, T = 20, only token 4 scored high; last query is position 19.
    std::vector<double> r(20, 0.1);
    r[4] = 0.9;
    const IndexSet idx = build_index_set(20, column(r), 2, 12);
    std::vector<std::uint32_t> want{0, 1, 4};
    for (std::uint32_t j = 7; j <= 19; ++j) {
        want.push_back(j);
    }
    EXPECT_EQ(idx[19], want);
}

TEST(IndexSet, EveryMemberIsCausalAndJustified) {
    Rng rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t T = 1 + static_cast<std::size_t>(trial) * 2, s = trial % 4, w = 1 + trial % 9;
        std::vector<double> r(T);
        for (double& x : r) {
            x = u(rng);
        }
        const IndexSet idx = build_index_set(T, column(r), s, w);
        for (std::size_t i = 0; i < T; ++i) {
            EXPECT_TRUE(std::is_sorted(idx[i].begin(), idx[i].end()));
            for (std::size_t j = 0; j <= i; ++j) {
                const bool in = std::binary_search(idx[i].begin(), idx[i].end(), static_cast<std::uint32_t>(j));
                EXPECT_EQ(in, j < s || r[j] > 0.5 || j + w >= i);
            }
        }
    }
}

TEST(MaskedOracle, FullCausalEqualsDense) {
    Rng rng(5);
    const Qkv x = random_qkv(12, 4, rng);
    EXPECT_LT(max_abs_diff(masked_attention_oracle(x.q, x.k, x.v, full_causal_index_set(12), 0.5),
                           dense_causal_attention(x.q, x.k, x.v, 0.5)),
              1e-12);
}

TEST(MaskedOracle, SelfOnlyReturnsOwnValue) {
    Rng rng(6);
    const Qkv x = random_qkv(7, 3, rng);
    IndexSet self(7);
    for (std::uint32_t i = 0; i < 7; ++i) {
        self[i] = {i};
    }
    EXPECT_LT(max_abs_diff(masked_attention_oracle(x.q, x.k, x.v, self, 1.0), x.v), 1e-15);
}

TEST(MaskedOracle, RandomSparseEqualsInfinityMasking) {
    Rng rng(7);
    std::bernoulli_distribution keep(0.4);
    for (int trial = 0; trial < 10; ++trial) {
        const Qkv x = random_qkv(16, 4, rng);
        IndexSet idx(16);
        for (std::uint32_t i = 0; i < 16; ++i) {
            for (std::uint32_t j = 0; j < i; ++j) {
                if (keep(rng)) {
                    idx[i].push_back(j);
                }
            }
            idx[i].push_back(i);
        }
        EXPECT_LT(max_abs_diff(masked_attention_oracle(x.q, x.k, x.v, idx, 0.5), masked_by_infinity(x, to_mask(idx, 16), 0.5)),
                  1e-12);
    }
}

TEST(MaskedOracle, EmptyRowIsContractViolation) {
    Rng rng(8);
    const Qkv x = random_qkv(3, 2, rng);
    IndexSet idx{{0}, {}, {0, 2}};
    EXPECT_THROW(masked_attention_oracle(x.q, x.k, x.v, idx, 1.0), ContractViolation);
}

TEST(Swa, WideWindowIsDense) {
    Rng rng(9);
    const Qkv x = random_qkv(10, 4, rng);
    EXPECT_LT(max_abs_diff(swa_attention(x.q, x.k, x.v, 10, 0.5), dense_causal_attention(x.q, x.k, x.v, 0.5)), 1e-12);
}

TEST(Swa, UnitWindowReturnsOwnValue) {
    Rng rng(10);
    const Qkv x = random_qkv(8, 3, rng);
    EXPECT_LT(max_abs_diff(swa_attention(x.q, x.k, x.v, 1, 0.5), x.v), 1e-15);
}

TEST(Swa, MatchesMaskedOracle) {
    Rng rng(11);
    const Qkv x = random_qkv(12, 4, rng);
    std::vector<std::vector<bool>> m(12, std::vector<bool>(12));
    for (std::size_t i = 0; i < 12; ++i) {
        for (std::size_t j = i >= 3 ? i - 3 : 0; j <= i; ++j) {
            m[i][j] = true;
        }
    }
    EXPECT_LT(max_abs_diff(swa_attention(x.q, x.k, x.v, 4, 0.5), masked_by_infinity(x, m, 0.5)), 1e-12);
}

namespace {

// Splits a prefill into (window = all tokens, compact = retained out-of-window tokens).
struct Split {
    std::vector<std::size_t> positions;
    Tensor k, v;
};

Split compact_of(const Qkv& x, const std::vector<double>& r, std::size_t s) {
    Split c;
    for (std::size_t j = 0; j < r.size(); ++j) {
        if (j < s || r[j] > 0.5) {
            c.positions.push_back(j);
        }
    }
    c.k = Tensor({c.positions.size(), x.k.dim(1)});
    c.v = Tensor({c.positions.size(), x.v.dim(1)});
    for (std::size_t n = 0; n < c.positions.size(); ++n) {
        for (std::size_t col = 0; col < x.k.dim(1); ++col) {
            c.k(n, col) = x.k(c.positions[n], col);
            c.v(n, col) = x.v(c.positions[n], col);
        }
    }
    return c;
}

}  // namespace

TEST(TwoStage, EmptyCompactSegmentIsWindowAttention) {
    Rng rng(12);
    const Qkv x = random_qkv(40, 4, rng);
    const std::size_t w = 6;
    const Tensor got = two_stage_sparse_attention(x.q, x.k, x.v, Tensor({0, 4}), Tensor({0, 4}), {}, TwoStageOptions{w, 16, 0.5});
    // the kernel window is j >= i - w, i.e. w + 1 tokens
    EXPECT_LT(max_abs_diff(got, swa_attention(x.q, x.k, x.v, w + 1, 0.5)), 1e-12);
}

TEST(TwoStage, MatchesOracleAndSkipsInWindowTiles) {
    Rng rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t T = 64, w = 16, s = 2;
    for (int trial = 0; trial < 5; ++trial) {
        const Qkv x = random_qkv(T, 8, rng);
        std::vector<double> r(T);
        for (double& v : r) {
            v = u(rng) < 0.3 ? 0.9 : 0.1;
        }
        const Split c = compact_of(x, r, s);
        TilePlan plan;
        const Tensor got = two_stage_sparse_attention(x.q, x.k, x.v, c.k, c.v, c.positions, TwoStageOptions{w, 16, 0.5}, &plan);
        const Tensor want = masked_attention_oracle(x.q, x.k, x.v, build_index_set(T, column(r), s, w), 0.5);
        EXPECT_LT(max_abs_diff(got, want), 1e-10);
        for (const auto& rec : plan.records) {
            if (rec.stage != TileStage::sparse) {
                continue;
            }
            const std::size_t qmax = std::min(T, (rec.query_tile + 1) * 16) - 1;
            const std::size_t pmin = *std::min_element(c.positions.begin() + static_cast<std::ptrdiff_t>(rec.begin),
                                                       c.positions.begin() + static_cast<std::ptrdiff_t>(rec.end));
            const bool inside_or_future = pmin + w >= qmax;
            EXPECT_EQ(rec.decision == TileDecision::skipped, inside_or_future);
        }
    }
}

TEST(TwoStage, DuplicatedInWindowPositionIsNotCountedTwice) {
    Rng rng(14);
    const Qkv x = random_qkv(30, 4, rng);
    std::vector<double> r(30, 0.1);
    r[3] = 0.9;
    const Split base = compact_of(x, r, 1);
    r[27] = 0.9;  // in the window of every query that can see it
    const Split dup = compact_of(x, r, 1);
    const TwoStageOptions opt{5, 8, 0.5};
    EXPECT_LT(max_abs_diff(two_stage_sparse_attention(x.q, x.k, x.v, base.k, base.v, base.positions, opt),
                           two_stage_sparse_attention(x.q, x.k, x.v, dup.k, dup.v, dup.positions, opt)),
              1e-15);
}

TEST(TwoStage, CompactSlotOrderIsIrrelevant) {
    Rng rng(15);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Qkv x = random_qkv(50, 4, rng);
    std::vector<double> r(50);
    for (double& v : r) {
        v = u(rng);
    }
    Split c = compact_of(x, r, 2);
    const TwoStageOptions opt{7, 4, 0.5};
    const Tensor a = two_stage_sparse_attention(x.q, x.k, x.v, c.k, c.v, c.positions, opt);
    std::vector<std::size_t> perm(c.positions.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Split p{{}, Tensor(c.k.shape()), Tensor(c.v.shape())};
    for (std::size_t n = 0; n < perm.size(); ++n) {
        p.positions.push_back(c.positions[perm[n]]);
        for (std::size_t col = 0; col < 4; ++col) {
            p.k(n, col) = c.k(perm[n], col);
            p.v(n, col) = c.v(perm[n], col);
        }
    }
    EXPECT_LT(max_abs_diff(a, two_stage_sparse_attention(x.q, x.k, x.v, p.k, p.v, p.positions, opt)), 1e-12);
}

TEST(TwoStage, DuplicatePositionsInCompactSegmentAreLayoutCorruption) {
    Rng rng(16);
    const Qkv x = random_qkv(10, 2, rng);
    const std::vector<std::size_t> pos{1, 1};
    EXPECT_THROW(two_stage_sparse_attention(x.q, x.k, x.v, normal_tensor({2, 2}, rng), normal_tensor({2, 2}, rng), pos,
                                            TwoStageOptions{2, 4, 1.0}),
                 ContractViolation);
}

TEST(TwoStage, FloatKernelTracksDoubleKernel) {
    Rng rng(17);
    const Qkv x = random_qkv(48, 8, rng);
    auto to_float = [](const Tensor& t) {
        BasicTensor<float> f(t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) {
            f[i] = static_cast<float>(t[i]);
        }
        return f;
    };
    const TwoStageOptions opt{8, 16, 0.35};
    const Tensor d = two_stage_sparse_attention(x.q, x.k, x.v, Tensor({0, 8}), Tensor({0, 8}), {}, opt);
    const BasicTensor<float> f = two_stage_sparse_attention<float>(to_float(x.q), to_float(x.k), to_float(x.v),
                                                                   BasicTensor<float>({0, 8}), BasicTensor<float>({0, 8}), {}, opt);
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_NEAR(f[i], d[i], 1e-5);
    }
}
