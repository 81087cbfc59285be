// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "evictd/autodiff.hpp"
#include "evictd/numerics.hpp"
#include "evictd/random.hpp"
#include "support.hpp"

using namespace evictd;
using evictd::testing::rel_err;
using evictd::testing::weighted;

TEST(Matmul, IdentityTimesIdentity) {
    const Tensor I = Tensor::matrix({{1, 0}, {0, 1}});
    EXPECT_EQ(matmul(I, I), I);
}

TEST(Matmul, HandComputedProduct) {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    const Tensor b = Tensor::matrix({{1}, {1}});
    EXPECT_EQ(matmul(a, b), Tensor::matrix({{3}, {7}}));
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
    EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
    Rng rng(11);
    const Tensor a = normal_tensor({5, 4}, rng), b = normal_tensor({4, 3}, rng);
    ad::Tape tape;
    ad::Var av = tape.parameter(a), bv = tape.parameter(b);
    tape.backward(ad::sum(ad::matmul(av, bv)));
    auto sum_of = [](const Tensor& t) {
        double s = 0.0;
        for (double x : t.storage()) {
            s += x;
        }
        return s;
    };
    const Tensor fa = finite_difference_oracle([&](const Tensor& x) { return sum_of(matmul(x, b)); }, a, 1e-6);
    const Tensor fb = finite_difference_oracle([&](const Tensor& x) { return sum_of(matmul(a, x)); }, b, 1e-6);
    EXPECT_LT(max_abs_diff(tape.grad(av), fa), 1e-6);
    EXPECT_LT(max_abs_diff(tape.grad(bv), fb), 1e-6);
}

TEST(Softmax, UniformRow) {
    const Tensor s = softmax_row(Tensor::vector({0, 0, 0}));
    for (double x : s.storage()) {
        EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
    }
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    const Tensor s = softmax_row(Tensor::vector({1000, 1000}));
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, ClosedFormQuarterThreeQuarters) {
    const Tensor s = softmax_row(Tensor::vector({0, std::log(3.0)}));
    EXPECT_NEAR(s[0], 0.25, 1e-15);
    EXPECT_NEAR(s[1], 0.75, 1e-15);
}

TEST(Softmax, AllNegativeInfinityRowIsRejected) {
    const double ninf = -std::numeric_limits<double>::infinity();
    EXPECT_THROW(softmax_row(Tensor::vector({ninf, ninf})), ContractViolation);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = normal_tensor({7, 9}, rng, 5.0);
        Tensor shifted = x;
        for (std::size_t i = 0; i < 7; ++i) {
            const double c = 100.0 * (static_cast<double>(i) - 3.0);
            for (std::size_t j = 0; j < 9; ++j) {
                shifted(i, j) += c;
            }
        }
        const Tensor s = softmax_row(x), t = softmax_row(shifted);
        for (std::size_t i = 0; i < 7; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < 9; ++j) {
                row += s(i, j);
            }
            EXPECT_NEAR(row, 1.0, 1e-12);
        }
        EXPECT_LT(max_abs_diff(s, t), 1e-12);
    }
}

namespace {

ConvParams conv_with(std::vector<double> kernel, std::size_t groups = 1) {
    const std::size_t k = kernel.size();
    return ConvParams{Tensor({groups, 1, k}, [&] {
                          std::vector<double> w;
                          for (std::size_t g = 0; g < groups; ++g) {
                              w.insert(w.end(), kernel.begin(), kernel.end());
                          }
                          return w;
                      }()),
                      Tensor({groups}), groups};
}

// Direct loop: out[o][t] = b[o] + sum_c sum_tap w[o][c][tap] * x[g*in_pg + c][t + tap*d - left]
Tensor conv_loop(const Tensor& x, const ConvParams& p, std::size_t d, std::size_t left, std::size_t right) {
    const std::size_t C = x.dim(0), T = x.dim(1), O = p.weight.dim(0), ipg = p.weight.dim(1), k = p.weight.dim(2);
    const std::size_t opg = O / p.groups;
    const std::size_t out_len = T + left + right - (k - 1) * d;
    Tensor out({O, out_len});
    (void)C;
    for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t t = 0; t < out_len; ++t) {
            double acc = p.bias[o];
            for (std::size_t c = 0; c < ipg; ++c) {
                for (std::size_t tap = 0; tap < k; ++tap) {
                    const long long src = static_cast<long long>(t + tap * d) - static_cast<long long>(left);
                    if (src >= 0 && src < static_cast<long long>(T)) {
                        acc += p.weight[(o * ipg + c) * k + tap] * x((o / opg) * ipg + c, static_cast<std::size_t>(src));
                    }
                }
            }
            out(o, t) = acc;
        }
    }
    return out;
}

}  // namespace

TEST(Conv1d, CenterTapIsIdentity) {
    Rng rng(5);
    const Tensor x = normal_tensor({1, 11}, rng);
    for (std::size_t d : {1, 2, 3}) {
        EXPECT_EQ(grouped_dilated_conv1d(x, conv_with({0, 1, 0}), d, d, d), x);
    }
}

TEST(Conv1d, DilatedOnesKernelByHand) {
    // taps {t-2, t, t+2}: [x0+x2, x1+x3, x0+x2+x4, x1+x3, x2+x4]
    const Tensor x({1, 5}, {1, 0, 0, 0, 1});
    const Tensor y = grouped_dilated_conv1d(x, conv_with({1, 1, 1}), 2, 2, 2);
    EXPECT_EQ(y, Tensor({1, 5}, {1, 0, 2, 0, 1}));
}

TEST(Conv1d, GroupsMatchIndependentConvolutions) {
    Rng rng(9);
    const Tensor x = normal_tensor({4, 13}, rng);  // 2 groups x 2 channels
    ConvParams p{normal_tensor({6, 2, 3}, rng), normal_tensor({6}, rng), 2};
    const Tensor y = grouped_dilated_conv1d(x, p, 2, 4, 0);
    for (std::size_t g = 0; g < 2; ++g) {
        Tensor xg({2, 13}), wg({3, 2, 3}), bg({3});
        for (std::size_t c = 0; c < 2; ++c) {
            for (std::size_t t = 0; t < 13; ++t) {
                xg(c, t) = x(g * 2 + c, t);
            }
        }
        for (std::size_t i = 0; i < 18; ++i) {
            wg[i] = p.weight[g * 18 + i];
        }
        for (std::size_t o = 0; o < 3; ++o) {
            bg[o] = p.bias[g * 3 + o];
        }
        const Tensor yg = grouped_dilated_conv1d(xg, ConvParams{wg, bg, 1}, 2, 4, 0);
        for (std::size_t o = 0; o < 3; ++o) {
            for (std::size_t t = 0; t < yg.dim(1); ++t) {
                EXPECT_EQ(y(g * 3 + o, t), yg(o, t));
            }
        }
    }
}

TEST(Conv1d, MatchesLoopOracleOnRandomShapes) {
    Rng rng(21);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t groups = 1 + trial % 3, ipg = 1 + trial % 2, opg = 1 + (trial / 2) % 3;
        const std::size_t T = 5 + static_cast<std::size_t>(trial), d = 1 + trial % 3;
        const std::size_t left = trial % 5, right = (trial / 3) % 4;
        const Tensor x = normal_tensor({groups * ipg, T}, rng);
        const ConvParams p{normal_tensor({groups * opg, ipg, 3}, rng), normal_tensor({groups * opg}, rng), groups};
        if (T + left + right <= 2 * d) {
            continue;
        }
        EXPECT_LT(max_abs_diff(grouped_dilated_conv1d(x, p, d, left, right), conv_loop(x, p, d, left, right)), 1e-12);
    }
}

TEST(Conv1d, InvalidShapesAreRejected) {
    const Tensor x({1, 3});
    EXPECT_THROW(grouped_dilated_conv1d(x, conv_with({1, 1}), 1, 0, 0), ParameterError);
    EXPECT_THROW(grouped_dilated_conv1d(x, conv_with({1, 1, 1}), 4, 0, 0), DimensionError);
    EXPECT_THROW(grouped_dilated_conv1d(Tensor({3, 4}), conv_with({1, 1, 1}, 2), 1, 1, 1), ParameterError);
}

TEST(Conv1d, BackwardMatchesFiniteDifferences) {
    Rng rng(4);
    const Tensor x = normal_tensor({4, 10}, rng);
    const ConvParams p{normal_tensor({4, 2, 3}, rng), normal_tensor({4}, rng), 2};
    const Tensor c = normal_tensor({4, 10}, rng);
    ad::Tape tape;
    ad::Var xv = tape.parameter(x), wv = tape.parameter(p.weight), bv = tape.parameter(p.bias);
    tape.backward(ad::weighted_sum(ad::conv1d(xv, wv, bv, 2, 2, 4, 0), c));
    auto f = [&](const Tensor& xx, const Tensor& ww, const Tensor& bb) {
        return weighted(grouped_dilated_conv1d(xx, ConvParams{ww, bb, 2}, 2, 4, 0), c);
    };
    EXPECT_LT(rel_err(tape.grad(xv), finite_difference_oracle([&](const Tensor& t) { return f(t, p.weight, p.bias); }, x)), 1e-5);
    EXPECT_LT(rel_err(tape.grad(wv), finite_difference_oracle([&](const Tensor& t) { return f(x, t, p.bias); }, p.weight)), 1e-5);
    EXPECT_LT(rel_err(tape.grad(bv), finite_difference_oracle([&](const Tensor& t) { return f(x, p.weight, t); }, p.bias)), 1e-5);
}

TEST(Activation, HandValues) {
    EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
    EXPECT_DOUBLE_EQ(swish(0.0), 0.0);
    EXPECT_NEAR(sigmoid(std::log(3.0)), 0.75, 1e-15);
    const Tensor s = activation(Tensor::vector({0.0, std::log(3.0)}), ActivationKind::sigmoid);
    EXPECT_NEAR(s[1], 0.75, 1e-15);
    const Tensor w = activation(Tensor::vector({0.0, 2.0}), ActivationKind::swish);
    EXPECT_DOUBLE_EQ(w[0], 0.0);
    EXPECT_NEAR(w[1], 2.0 * sigmoid(2.0), 1e-15);
}

TEST(Dropout, ZeroProbabilityAndEvalAreIdentity) {
    Rng rng(1);
    const Tensor x = normal_tensor({50}, rng);
    EXPECT_EQ(dropout(x, 0.0, Mode::train, 7), x);
    EXPECT_EQ(dropout(x, 0.0, Mode::eval, 7), x);
    EXPECT_EQ(dropout(x, 0.1, Mode::eval, 7), x);
}

TEST(Dropout, InvertedScalingKeepsTheMean) {
    const Tensor ones = Tensor::filled({100000}, 1.0);
    const Tensor y = dropout(ones, 0.5, Mode::train, 123);
    double mean = 0.0;
    for (double v : y.storage()) {
        EXPECT_TRUE(v == 0.0 || v == 2.0);
        mean += v;
    }
    EXPECT_NEAR(mean / 100000.0, 1.0, 0.02);
}

TEST(Dropout, DeterministicUnderSeed) {
    const Tensor ones = Tensor::filled({1000}, 1.0);
    EXPECT_EQ(dropout(ones, 0.3, Mode::train, 5), dropout(ones, 0.3, Mode::train, 5));
    EXPECT_NE(dropout(ones, 0.3, Mode::train, 5), dropout(ones, 0.3, Mode::train, 6));
}

TEST(Dropout, ProbabilityOneIsParameterError) {
    EXPECT_THROW(dropout(Tensor({3}), 1.0, Mode::train, 0), ParameterError);
    EXPECT_THROW(dropout(Tensor({3}), -0.1, Mode::train, 0), ParameterError);
}

TEST(FiniteDifference, SquaredNorm) {
    const Tensor g = finite_difference_oracle(
        [](const Tensor& x) { return x[0] * x[0] + x[1] * x[1]; }, Tensor::vector({1, 2}), 1e-6);
    EXPECT_NEAR(g[0], 2.0, 1e-6);
    EXPECT_NEAR(g[1], 4.0, 1e-6);
}

TEST(FiniteDifference, SigmoidSlopeAtZero) {
    const Tensor g = finite_difference_oracle(
        [](const Tensor& x) {
            double s = 0.0;
            for (double v : x.storage()) {
                s += sigmoid(v);
            }
            return s;
        },
        Tensor({4}), 1e-6);
    for (double v : g.storage()) {
        EXPECT_NEAR(v, 0.25, 1e-9);
    }
}

TEST(FiniteDifference, NonFiniteFunctionIsEvaluationError) {
    EXPECT_THROW(finite_difference_oracle([](const Tensor& x) { return std::log(x[0]); }, Tensor::vector({0.0}), 1e-6),
                 EvaluationError);
}

TEST(Autodiff, ElementwiseOpsMatchFiniteDifferencesOnSeveralShapes) {
    Rng rng(8);
    const std::vector<Shape> shapes{{3, 4}, {6, 2}, {1, 7}};
    for (const auto& shape : shapes) {
        const Tensor x = normal_tensor(shape, rng), y = normal_tensor(shape, rng), c = normal_tensor(shape, rng);
        ad::Tape tape;
        ad::Var xv = tape.parameter(x), yv = tape.parameter(y);
        ad::Var z = ad::add(ad::mul(ad::swish(xv), ad::sigmoid(yv)), ad::scale(ad::relu(yv), 0.5));
        tape.backward(ad::weighted_sum(z, c));
        auto f = [&](const Tensor& a, const Tensor& b) {
            double acc = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                acc += c[i] * (swish(a[i]) * sigmoid(b[i]) + 0.5 * std::max(0.0, b[i]));
            }
            return acc;
        };
        EXPECT_LT(rel_err(tape.grad(xv), finite_difference_oracle([&](const Tensor& t) { return f(t, y); }, x)), 1e-5);
        EXPECT_LT(rel_err(tape.grad(yv), finite_difference_oracle([&](const Tensor& t) { return f(x, t); }, y)), 1e-5);
    }
}

TEST(Autodiff, SoftmaxCrossEntropyMatchesFiniteDifferences) {
    Rng rng(2);
    const Tensor logits = normal_tensor({5, 6}, rng);
    const std::vector<int> targets{0, 5, 2, -1, 3};  // -1 rows are ignored
    ad::Tape tape;
    ad::Var lv = tape.parameter(logits);
    ad::Var loss = ad::cross_entropy(lv, targets);
    tape.backward(loss);
    const Tensor fd = finite_difference_oracle(
        [&](const Tensor& x) {
            ad::Tape t2;
            return ad::cross_entropy(t2.constant(x), targets).value()[0];
        },
        logits);
    EXPECT_LT(rel_err(tape.grad(lv), fd), 1e-5);
}

TEST(Autodiff, GradientShapeEqualsValueShape) {
    ad::Tape tape;
    ad::Var a = tape.parameter(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
    ad::Var b = tape.parameter(Tensor::matrix({{1}, {0}, {-1}}));
    tape.backward(ad::sum(ad::matmul(a, b)));
    EXPECT_EQ(tape.grad(a).shape(), a.value().shape());
    EXPECT_EQ(tape.grad(b).shape(), b.value().shape());
}
