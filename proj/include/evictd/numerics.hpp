// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "evictd/random.hpp"
#include "evictd/tensor.hpp"

namespace evictd {

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
    EVICTD_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                 DimensionError,
                 "matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    BasicTensor<Scalar> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        Scalar* orow = out.data().data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const Scalar aip = a(i, p);
            const Scalar* brow = b.data().data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += aip * brow[j];
            }
        }
    }
    return out;
}

template <typename Scalar>
BasicTensor<Scalar> transpose(const BasicTensor<Scalar>& a) {
    EVICTD_CHECK(a.rank() == 2, DimensionError, "transpose expects a matrix");
    BasicTensor<Scalar> out({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i) {
        for (std::size_t j = 0; j < a.dim(1); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

/// Softmax over the last dimension. Rows are shifted by their maximum before exponentiation.
template <typename Scalar>
BasicTensor<Scalar> softmax_row(const BasicTensor<Scalar>& x) {
    EVICTD_CHECK(x.rank() >= 1 && x.shape().back() >= 1, DimensionError, "softmax_row: last dimension must be >= 1");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.size() / n;
    BasicTensor<Scalar> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const Scalar* in = x.data().data() + r * n;
        Scalar* o = out.data().data() + r * n;
        const Scalar mx = *std::max_element(in, in + n);
        EVICTD_CHECK(mx != -std::numeric_limits<Scalar>::infinity(),
                     ContractViolation,
                     "softmax_row: row " + std::to_string(r) + " is entirely -inf");
        Scalar denom{0};
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            o[j] /= denom;
        }
    }
    return out;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    if (x >= 0) {
        return Scalar{1} / (Scalar{1} + std::exp(-x));
    }
    const Scalar e = std::exp(x);
    return e / (Scalar{1} + e);
}

template <typename Scalar>
Scalar swish(Scalar x) {
    return x * sigmoid(x);
}

enum class ActivationKind { sigmoid, swish };

template <typename Scalar>
BasicTensor<Scalar> activation(const BasicTensor<Scalar>& x, ActivationKind kind) {
    BasicTensor<Scalar> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = kind == ActivationKind::sigmoid ? sigmoid(x[i]) : swish(x[i]);
    }
    return out;
}

/**
 * Weights of a grouped 1D convolution.
 *
 * weight has shape [out_channels x in_channels/groups x kernel]; output channel o belongs to group
 * o / (out_channels/groups) and only reads the input channels of that group.
 */
template <typename Scalar>
struct BasicConvParams {
    BasicTensor<Scalar> weight;
    BasicTensor<Scalar> bias;
    std::size_t groups = 1;

    std::size_t out_channels() const {
        return weight.dim(0);
    }
    std::size_t in_per_group() const {
        return weight.dim(1);
    }
    std::size_t kernel() const {
        return weight.dim(2);
    }
    std::size_t in_channels() const {
        return in_per_group() * groups;
    }
};
using ConvParams = BasicConvParams<double>;

inline std::size_t conv_output_length(std::size_t length,
                                      std::size_t kernel,
                                      std::size_t dilation,
                                      std::size_t left_pad,
                                      std::size_t right_pad) {
    const long long span = static_cast<long long>((kernel - 1) * dilation);
    const long long out = static_cast<long long>(length + left_pad + right_pad) - span;
    EVICTD_CHECK(out > 0, DimensionError, "grouped_dilated_conv1d: padding arithmetic leaves an empty output");
    return static_cast<std::size_t>(out);
}

inline void check_conv_shapes(std::size_t in_channels,
                              std::size_t kernel,
                              std::size_t groups,
                              std::size_t out_channels,
                              std::size_t weight_in_per_group,
                              std::size_t bias_size) {
    EVICTD_CHECK(kernel % 2 == 1, ParameterError, "grouped_dilated_conv1d: kernel size must be odd");
    EVICTD_CHECK(groups >= 1 && in_channels % groups == 0 && out_channels % groups == 0,
                 ParameterError,
                 "grouped_dilated_conv1d: channels must be divisible by groups");
    EVICTD_CHECK(in_channels / groups == weight_in_per_group,
                 ParameterError,
                 "grouped_dilated_conv1d: input channels " + std::to_string(in_channels) +
                     " do not match weights for " + std::to_string(groups) + " groups");
    EVICTD_CHECK(bias_size == out_channels, ParameterError, "grouped_dilated_conv1d: bias size mismatch");
}

/**
 * Grouped dilated 1D convolution over x of shape [channels x T] (a [groups x ch x T] tensor is
 * accepted and flattened). Output index t reads padded input positions t + tap * dilation, so with
 * symmetric padding (k-1)*d/2 the taps of output t are centred on input t.
 */
template <typename Scalar>
BasicTensor<Scalar> grouped_dilated_conv1d(const BasicTensor<Scalar>& x,
                                           const BasicConvParams<Scalar>& w,
                                           std::size_t dilation,
                                           std::size_t left_pad,
                                           std::size_t right_pad) {
    EVICTD_CHECK(x.rank() == 2 || x.rank() == 3, DimensionError, "grouped_dilated_conv1d: input must be rank 2 or 3");
    const std::size_t length = x.shape().back();
    const std::size_t in_ch = x.size() / std::max<std::size_t>(length, 1);
    check_conv_shapes(in_ch, w.kernel(), w.groups, w.out_channels(), w.in_per_group(), w.bias.size());
    const std::size_t out_len = conv_output_length(length, w.kernel(), dilation, left_pad, right_pad);
    const std::size_t out_ch = w.out_channels();
    const std::size_t out_per_group = out_ch / w.groups;
    const std::size_t in_pg = w.in_per_group();
    const std::size_t k = w.kernel();

    BasicTensor<Scalar> out({out_ch, out_len});
    for (std::size_t o = 0; o < out_ch; ++o) {
        const std::size_t g = o / out_per_group;
        Scalar* orow = out.data().data() + o * out_len;
        for (std::size_t t = 0; t < out_len; ++t) {
            Scalar acc = w.bias[o];
            for (std::size_t c = 0; c < in_pg; ++c) {
                const Scalar* xrow = x.data().data() + (g * in_pg + c) * length;
                const Scalar* wk = w.weight.data().data() + (o * in_pg + c) * k;
                for (std::size_t tap = 0; tap < k; ++tap) {
                    const long long src = static_cast<long long>(t + tap * dilation) - static_cast<long long>(left_pad);
                    if (src >= 0 && src < static_cast<long long>(length)) {
                        acc += wk[tap] * xrow[src];
                    }
                }
            }
            orow[t] = acc;
        }
    }
    return out;
}

enum class Mode { train, eval };

/// Inverted dropout. Eval mode and p == 0 are the identity.
template <typename Scalar>
BasicTensor<Scalar> dropout(const BasicTensor<Scalar>& x, double p, Mode mode, std::uint64_t rng_seed) {
    EVICTD_CHECK(p >= 0.0 && p < 1.0, ParameterError, "dropout: p must lie in [0, 1)");
    if (mode == Mode::eval || p == 0.0) {
        return x;
    }
    Rng rng(rng_seed);
    std::bernoulli_distribution drop(p);
    const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - p));
    BasicTensor<Scalar> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = drop(rng) ? Scalar{0} : x[i] * keep_scale;
    }
    return out;
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of x.
inline Tensor finite_difference_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-6) {
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(probe);
        probe[i] = orig - h;
        const double down = f(probe);
        probe[i] = orig;
        EVICTD_CHECK(std::isfinite(up) && std::isfinite(down),
                     EvaluationError,
                     "finite_difference_oracle: f is not finite near coordinate " + std::to_string(i));
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace evictd
