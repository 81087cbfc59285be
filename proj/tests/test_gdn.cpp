// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "evictd/gdn.hpp"
#include "evictd/random.hpp"
#include "support.hpp"

using namespace evictd;
using evictd::testing::rel_err;
using evictd::testing::weighted;

namespace {

std::vector<double> unit(std::size_t d, std::size_t i) {
    std::vector<double> e(d, 0.0);
    e[i] = 1.0;
    return e;
}

std::vector<double> normalized(std::span<const double> x) {
    double n = 0.0;
    for (double a : x) {
        n += a * a;
    }
    n = std::sqrt(n);
    std::vector<double> out(x.begin(), x.end());
    for (double& a : out) {
        a /= n;
    }
    return out;
}

// Unit-norm rows per head of width d.
Tensor normalize_heads(Tensor x, std::size_t d) {
    for (std::size_t t = 0; t < x.dim(0); ++t) {
        for (std::size_t b = 0; b < x.dim(1); b += d) {
            const auto n = normalized(x.row(t).subspan(b, d));
            std::copy(n.begin(), n.end(), x.row(t).begin() + static_cast<std::ptrdiff_t>(b));
        }
    }
    return x;
}

}  // namespace

TEST(LinearAttention, FirstStepFromZeroState) {
    GdnState st(3, 2);
    const std::vector<double> q{1.0, 2.0, -1.0}, k{0.5, 1.0, 2.0}, v{3.0, -2.0};
    const auto o = linear_attn_step(st, q, k, v);
    const double qk = 0.5 + 2.0 - 2.0;
    EXPECT_DOUBLE_EQ(o[0], qk * 3.0);
    EXPECT_DOUBLE_EQ(o[1], qk * -2.0);
}

TEST(LinearAttention, OrthogonalKeysRecoverValues) {
    const std::size_t d = 4;
    GdnState st(d, 2);
    const std::vector<std::vector<double>> vals{{1.0, 2.0}, {-3.0, 0.5}, {0.25, 7.0}, {4.0, -1.0}};
    for (std::size_t j = 0; j < d; ++j) {
        linear_attn_step(st, unit(d, j), unit(d, j), vals[j]);
    }
    const std::vector<double> zero(2, 0.0), zk(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        EXPECT_EQ(linear_attn_step(st, unit(d, j), zk, zero), vals[j]);
    }
}

TEST(LinearAttention, RecurrenceEqualsUnrolledSum) {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t T = 8, dk = 5, dv = 3;
        const Tensor q = normal_tensor({T, dk}, rng), k = normal_tensor({T, dk}, rng), v = normal_tensor({T, dv}, rng);
        GdnState st(dk, dv);
        for (std::size_t t = 0; t < T; ++t) {
            const auto o = linear_attn_step(st, q.row(t), k.row(t), v.row(t));
            for (std::size_t c = 0; c < dv; ++c) {
                double want = 0.0;
                for (std::size_t j = 0; j <= t; ++j) {
                    want += dot(q.row(t), k.row(j)) * v(j, c);
                }
                EXPECT_NEAR(o[c], want, 1e-12);
            }
        }
    }
}

TEST(GatedDelta, NoWriteIsPureRetention) {
    Rng rng(2);
    GdnState st(4, 3);
    for (double& x : st.S) {
        x = std::normal_distribution<double>()(rng);
    }
    const auto before = st.S;
    const auto k = normalized(std::vector<double>{1.0, 2.0, 3.0, 4.0});
    gdn_step(st, k, k, std::vector<double>{9.0, 9.0, 9.0}, 1.0, 0.0);
    EXPECT_EQ(st.S, before);
}

TEST(GatedDelta, UnitWriteOverwritesTheAssociation) {
    const auto k = normalized(std::vector<double>{1.0, -1.0, 2.0});
    GdnState st(3, 2);
    gdn_step(st, k, k, std::vector<double>{1.0, 2.0}, 1.0, 1.0);
    for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_NEAR(st.at(r, c), (r == 0 ? 1.0 : 2.0) * k[c], 1e-15);
        }
    }
    const auto o = gdn_step(st, k, k, std::vector<double>{-5.0, 0.5}, 1.0, 1.0);
    EXPECT_NEAR(o[0], -5.0, 1e-12);
    EXPECT_NEAR(o[1], 0.5, 1e-12);
}

TEST(GatedDelta, ZeroDecayForgetsEverything) {
    Rng rng(3);
    GdnState st(3, 2);
    for (double& x : st.S) {
        x = std::normal_distribution<double>()(rng);
    }
    const auto k = normalized(std::vector<double>{0.3, 0.1, -0.7});
    const std::vector<double> v{2.0, -1.0};
    gdn_step(st, k, k, v, 0.0, 0.4);
    for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_NEAR(st.at(r, c), 0.4 * v[r] * k[c], 1e-15);
        }
    }
}

TEST(GatedDelta, GatesOutsideTheirRangeAreRejected) {
    GdnState st(2, 2);
    const std::vector<double> x{1.0, 0.0};
    EXPECT_THROW(gdn_step(st, x, x, x, 1.5, 0.5), ParameterError);
    EXPECT_THROW(gdn_step(st, x, x, x, 0.5, -0.1), ParameterError);
}

TEST(GatedDelta, OrthonormalOverwriteReadOut) {
    // with alpha = beta = 1 each key slot holds only the latest value written to it
    Rng rng(4);
    const std::size_t d = 6;
    GdnState st(d, 3);
    std::vector<std::vector<double>> latest(d, std::vector<double>(3, 0.0));
    std::uniform_int_distribution<std::size_t> slot(0, d - 1);
    for (int t = 0; t < 60; ++t) {
        const std::size_t j = slot(rng);
        const Tensor v = normal_tensor({1, 3}, rng);
        latest[j].assign(v.data().begin(), v.data().end());
        gdn_step(st, unit(d, j), unit(d, j), latest[j], 1.0, 1.0);
    }
    GdnState probe = st;
    for (std::size_t j = 0; j < d; ++j) {
        const auto o = detail::read_out(probe, unit(d, j));
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_LT(std::abs(o[c] - latest[j][c]), 1e-10);
        }
    }
}

TEST(GdnLayer, NoWritesReadTheInitialState) {
    Rng rng(5);
    const GdnShape shape{2, 3, 2};
    const std::size_t T = 5;
    std::vector<GdnState> states(2, GdnState(3, 2));
    for (auto& s : states) {
        for (double& x : s.S) {
            x = std::normal_distribution<double>()(rng);
        }
    }
    const auto init = states;
    const Tensor q = normal_tensor({T, 6}, rng), k = normalize_heads(normal_tensor({T, 6}, rng), 3), v = normal_tensor({T, 4}, rng);
    const Tensor alpha = Tensor::filled({T, 2}, 1.0), beta({T, 2});
    const Tensor out = gdn_layer_forward(q, k, v, alpha, beta, shape, states);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t h = 0; h < 2; ++h) {
            GdnState s0 = init[h];
            const auto o = detail::read_out(s0, q.row(t).subspan(h * 3, 3));
            EXPECT_EQ(o[0], out(t, h * 2));
            EXPECT_EQ(o[1], out(t, h * 2 + 1));
        }
    }
}

TEST(GdnLayer, MatchesHandRecurrence) {
    Rng rng(6);
    const std::size_t T = 4, dk = 3, dv = 2;
    const Tensor q = normal_tensor({T, dk}, rng), k = normalize_heads(normal_tensor({T, dk}, rng), dk), v = normal_tensor({T, dv}, rng);
    const Tensor alpha = uniform_tensor({T, 1}, rng, 0.5, 1.0), beta = uniform_tensor({T, 1}, rng, 0.0, 1.0);
    const Tensor out = gdn_layer_forward(q, k, v, alpha, beta, GdnShape{1, dk, dv});
    // explicit matrices: S <- alpha S (I - beta k k^T) + beta v k^T
    std::vector<std::vector<double>> S(dv, std::vector<double>(dk, 0.0));
    for (std::size_t t = 0; t < T; ++t) {
        std::vector<std::vector<double>> A(dk, std::vector<double>(dk, 0.0));
        for (std::size_t i = 0; i < dk; ++i) {
            for (std::size_t j = 0; j < dk; ++j) {
                A[i][j] = alpha(t, 0) * ((i == j ? 1.0 : 0.0) - beta(t, 0) * k(t, i) * k(t, j));
            }
        }
        std::vector<std::vector<double>> next(dv, std::vector<double>(dk, 0.0));
        for (std::size_t r = 0; r < dv; ++r) {
            for (std::size_t c = 0; c < dk; ++c) {
                for (std::size_t m = 0; m < dk; ++m) {
                    next[r][c] += S[r][m] * A[m][c];
                }
                next[r][c] += beta(t, 0) * v(t, r) * k(t, c);
            }
        }
        S = next;
        for (std::size_t r = 0; r < dv; ++r) {
            double o = 0.0;
            for (std::size_t c = 0; c < dk; ++c) {
                o += S[r][c] * q(t, c);
            }
            EXPECT_NEAR(out(t, r), o, 1e-12);
        }
    }
}

TEST(GdnLayer, BackwardMatchesFiniteDifferences) {
    Rng rng(7);
    const GdnShape shape{2, 3, 2};
    for (std::size_t T : {6u, 32u}) {
        const Tensor q = normal_tensor({T, 6}, rng), k = normalize_heads(normal_tensor({T, 6}, rng), 3), v = normal_tensor({T, 4}, rng);
        const Tensor alpha = uniform_tensor({T, 2}, rng, 0.6, 0.99), beta = uniform_tensor({T, 2}, rng, 0.1, 0.9);
        const Tensor c = normal_tensor({T, 4}, rng);
        ad::Tape tape;
        ad::Var qv = tape.parameter(q), kv = tape.parameter(k), vv = tape.parameter(v), av = tape.parameter(alpha),
                bv = tape.parameter(beta);
        tape.backward(ad::weighted_sum(ad::gdn(qv, kv, vv, av, bv, shape), c));
        auto loss = [&](const Tensor& Q, const Tensor& K, const Tensor& V, const Tensor& A, const Tensor& B) {
            return weighted(gdn_layer_forward(Q, K, V, A, B, shape), c);
        };
        const double tol = T == 32 ? 1e-4 : 1e-5;
        EXPECT_LT(rel_err(tape.grad(vv), finite_difference_oracle([&](const Tensor& x) { return loss(q, k, x, alpha, beta); }, v)), tol);
        EXPECT_LT(rel_err(tape.grad(qv), finite_difference_oracle([&](const Tensor& x) { return loss(x, k, v, alpha, beta); }, q)), tol);
        EXPECT_LT(rel_err(tape.grad(kv), finite_difference_oracle([&](const Tensor& x) { return loss(q, x, v, alpha, beta); }, k)), tol);
        EXPECT_LT(rel_err(tape.grad(av), finite_difference_oracle([&](const Tensor& x) { return loss(q, k, v, x, beta); }, alpha)), tol);
        EXPECT_LT(rel_err(tape.grad(bv), finite_difference_oracle([&](const Tensor& x) { return loss(q, k, v, alpha, x); }, beta)), tol);
    }
}

TEST(GdnLayer, SumOfOutputsGradientInFirstValue) {
    Rng rng(8);
    const std::size_t T = 10;
    const Tensor q = normal_tensor({T, 4}, rng), k = normalize_heads(normal_tensor({T, 4}, rng), 4), v = normal_tensor({T, 4}, rng);
    const Tensor alpha = uniform_tensor({T, 1}, rng, 0.6, 0.99), beta = uniform_tensor({T, 1}, rng, 0.1, 0.9);
    const Tensor ones = Tensor::filled({T, 4}, 1.0);
    ad::Tape tape;
    ad::Var vv = tape.parameter(v);
    tape.backward(ad::weighted_sum(ad::gdn(tape.constant(q), tape.constant(k), vv, tape.constant(alpha), tape.constant(beta), GdnShape{1, 4, 4}), ones));
    const Tensor fd = finite_difference_oracle([&](const Tensor& x) { return weighted(gdn_layer_forward(q, k, x, alpha, beta, GdnShape{1, 4, 4}), ones); }, v);
    for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_NEAR(tape.grad(vv)(0, c), fd(0, c), 1e-5 * std::max(1.0, std::abs(fd(0, c))));
    }
}
