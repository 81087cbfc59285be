// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evictd/autodiff.hpp"
#include "evictd/numerics.hpp"
#include "evictd/random.hpp"

namespace evictd {

/// Receptive field of the three dilated layers: 1 + 3 * (3 - 1) * 2.
inline constexpr std::size_t kScorerLayers = 3;
inline constexpr std::size_t kScorerKernel = 3;
inline constexpr std::size_t kScorerDilation = 2;
inline constexpr std::size_t kReceptiveField = 1 + kScorerLayers * (kScorerKernel - 1) * kScorerDilation;
inline constexpr std::size_t kHalfReceptive = kReceptiveField / 2;
inline constexpr double kScorerDropout = 0.1;
/// The per-head output projection starts small so initial scores sit close to 0.5.
inline constexpr double kScorerHeadInitScale = 0.05;

/// Retention scores r [tokens x heads], each strictly inside (0, 1).
using RetentionScores = Tensor;

/// Per-token keep flags (r > 0.5) laid out like RetentionScores.
using BinaryRetention = std::vector<std::uint8_t>;

/**
 * Weights of the token-eviction scorer.
 *
 * Per KV head the input is the concatenated pre-RoPE (k, v) of width 2*head_dim. Three grouped
 * conv layers (kernel 3, dilation 2) halve the width each time: 2d -> d -> d/2 -> d/4, each
 * followed by swish and dropout; a kernel-1 grouped conv then maps d/4 -> 1 and a sigmoid yields r.
 * Groups equal the number of KV heads so heads never mix.
 */
struct LteScorerParams {
    std::size_t heads = 0;
    std::size_t head_dim = 0;
    std::array<ConvParams, kScorerLayers> layers;
    ConvParams head;

    static std::vector<std::size_t> widths(std::size_t head_dim) {
        return {2 * head_dim, head_dim, head_dim / 2, head_dim / 4};
    }

    static LteScorerParams init(std::size_t heads, std::size_t head_dim, std::uint64_t seed, double init_gain = 1.0) {
        EVICTD_CHECK(heads >= 1 && head_dim >= 4 && head_dim % 4 == 0,
                     ParameterError,
                     "LteScorerParams: head_dim must be a positive multiple of 4");
        LteScorerParams p;
        p.heads = heads;
        p.head_dim = head_dim;
        const auto w = widths(head_dim);
        for (std::size_t l = 0; l < kScorerLayers; ++l) {
            Rng rng(derive_seed(seed, "lte.conv" + std::to_string(l)));
            const double bound = init_gain / std::sqrt(static_cast<double>(w[l] * kScorerKernel));
            p.layers[l].groups = heads;
            p.layers[l].weight = uniform_tensor({heads * w[l + 1], w[l], kScorerKernel}, rng, -bound, bound);
            p.layers[l].bias = uniform_tensor({heads * w[l + 1]}, rng, -bound, bound);
        }
        Rng rng(derive_seed(seed, "lte.head"));
        const double bound = kScorerHeadInitScale * init_gain / std::sqrt(static_cast<double>(w.back()));
        p.head.groups = heads;
        p.head.weight = uniform_tensor({heads, w.back(), 1}, rng, -bound, bound);
        p.head.bias = Tensor({heads});
        return p;
    }

    std::size_t parameter_count() const {
        std::size_t n = head.weight.size() + head.bias.size();
        for (const auto& l : layers) {
            n += l.weight.size() + l.bias.size();
        }
        return n;
    }

    /// Parameter count for a given geometry without materialising weights.
    static std::size_t parameter_count(std::size_t heads, std::size_t head_dim) {
        const auto w = widths(head_dim);
        std::size_t n = 0;
        for (std::size_t l = 0; l < kScorerLayers; ++l) {
            n += heads * (w[l + 1] * w[l] * kScorerKernel + w[l + 1]);
        }
        return n + heads * (w.back() + 1);
    }
};

/// Tokens whose inputs determine r_j: [j - R//2, j + R//2] clamped at the sequence start.
inline std::pair<std::size_t, std::size_t> scorer_receptive_bounds(std::size_t j) {
    return {j >= kHalfReceptive ? j - kHalfReceptive : 0, j + kHalfReceptive};
}

struct ScoreOptions {
    Mode mode = Mode::eval;
    std::uint64_t seed = 0;
    /// Absolute position of the first input row. Left zero padding applies only at position 0.
    std::size_t first_position = 0;
    /// Zero-pad past the last input row (standalone / training). Deferred scoring leaves it off
    /// and only scores tokens whose right context has arrived.
    bool right_pad = true;
};

/// Scores for a contiguous run of absolute positions [first, first + rows).
struct ScoredRange {
    std::size_t first = 0;
    RetentionScores r;

    std::size_t count() const {
        return r.rows();
    }
};

namespace detail {

// [T x heads*d] k and v -> channel-major [heads*2d x T] with per-head (k, v) channel groups.
inline Tensor pack_scorer_input(const Tensor& k, const Tensor& v, std::size_t heads, std::size_t head_dim) {
    EVICTD_CHECK(k.rank() == 2 && k.shape() == v.shape() && k.dim(1) == heads * head_dim,
                 ParameterError,
                 "score_tokens: key/value width does not match heads * head_dim");
    const std::size_t T = k.dim(0);
    Tensor x({heads * 2 * head_dim, T});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t c = 0; c < head_dim; ++c) {
            for (std::size_t t = 0; t < T; ++t) {
                x((h * 2) * head_dim + c, t) = k(t, h * head_dim + c);
                x((h * 2 + 1) * head_dim + c, t) = v(t, h * head_dim + c);
            }
        }
    }
    return x;
}

}  // namespace detail

/**
 * Runs the scorer over k_pre/v_pre rows at absolute positions [first_position, first_position+T).
 *
 * Each conv layer zero-pads on the left only when the run starts at position 0, otherwise it
 * consumes R//2 rows of left context. Without right padding the last R//2 rows only provide
 * context. Output rows are therefore computed with the same arithmetic no matter how a stream is
 * batched, which is what lets deferred scoring reproduce per-step scoring bit for bit.
 */
inline ScoredRange score_range(const Tensor& k_pre, const Tensor& v_pre, const LteScorerParams& p, const ScoreOptions& opt) {
    Tensor x = detail::pack_scorer_input(k_pre, v_pre, p.heads, p.head_dim);
    const std::size_t pad = (kScorerKernel - 1) * kScorerDilation / 2;
    const bool origin = opt.first_position == 0;
    std::size_t first = opt.first_position;
    for (std::size_t l = 0; l < kScorerLayers; ++l) {
        x = grouped_dilated_conv1d(x, p.layers[l], kScorerDilation, origin ? pad : 0, opt.right_pad ? pad : 0);
        x = activation(x, ActivationKind::swish);
        x = dropout(x, kScorerDropout, opt.mode, derive_seed(opt.seed, "lte.dropout" + std::to_string(l)));
        if (!origin) {
            first += pad;
        }
    }
    x = grouped_dilated_conv1d(x, p.head, 1, 0, 0);
    x = activation(x, ActivationKind::sigmoid);
    return ScoredRange{first, transpose(x)};
}

/// Standalone scoring of a whole sequence (zero padding on both sides): r [T x heads].
inline RetentionScores score_tokens(const Tensor& k_pre,
                                    const Tensor& v_pre,
                                    const LteScorerParams& p,
                                    Mode mode = Mode::eval,
                                    std::uint64_t seed = 0) {
    return score_range(k_pre, v_pre, p, ScoreOptions{mode, seed, 0, true}).r;
}

/// Keep flag per entry: r > 0.5, strictly.
inline BinaryRetention binarize(const RetentionScores& r) {
    BinaryRetention flags(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        flags[i] = r[i] > 0.5 ? 1 : 0;
    }
    return flags;
}

namespace ad {

/// Tape-side scorer weights.
struct ScorerVars {
    std::array<Var, kScorerLayers> weight;
    std::array<Var, kScorerLayers> bias;
    Var head_weight;
    Var head_bias;
};

inline ScorerVars bind(Tape& tape, const LteScorerParams& p, bool trainable) {
    ScorerVars s;
    auto make = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    for (std::size_t l = 0; l < kScorerLayers; ++l) {
        s.weight[l] = make(p.layers[l].weight);
        s.bias[l] = make(p.layers[l].bias);
    }
    s.head_weight = make(p.head.weight);
    s.head_bias = make(p.head.bias);
    return s;
}

/// Differentiable packing of k, v [T x heads*d] into the scorer layout [heads*2d x T].
inline Var pack_scorer_input(Var k, Var v, std::size_t heads, std::size_t head_dim) {
    Tensor x = detail::pack_scorer_input(k.value(), v.value(), heads, head_dim);
    return k.tape->record(std::move(x), {k, v}, [k, v, heads, head_dim](Tape& t, const Tensor& g) {
        Tensor* gk = t.grad_slot(k);
        Tensor* gv = t.grad_slot(v);
        const std::size_t T = g.dim(1);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t c = 0; c < head_dim; ++c) {
                for (std::size_t tt = 0; tt < T; ++tt) {
                    if (gk) {
                        (*gk)(tt, h * head_dim + c) += g((h * 2) * head_dim + c, tt);
                    }
                    if (gv) {
                        (*gv)(tt, h * head_dim + c) += g((h * 2 + 1) * head_dim + c, tt);
                    }
                }
            }
        }
    });
}

/// Standalone (both-sides padded) scoring on the tape: r [T x heads].
inline Var score_tokens(Var k_pre, Var v_pre, const ScorerVars& s, std::size_t heads, std::size_t head_dim, Mode mode,
                        std::uint64_t seed) {
    const std::size_t pad = (kScorerKernel - 1) * kScorerDilation / 2;
    Var x = pack_scorer_input(k_pre, v_pre, heads, head_dim);
    for (std::size_t l = 0; l < kScorerLayers; ++l) {
        x = conv1d(x, s.weight[l], s.bias[l], heads, kScorerDilation, pad, pad);
        x = swish(x);
        x = dropout(x, kScorerDropout, mode, derive_seed(seed, "lte.dropout" + std::to_string(l)));
    }
    x = conv1d(x, s.head_weight, s.head_bias, heads, 1, 0, 0);
    return transpose(sigmoid(x));
}

}  // namespace ad

}  // namespace evictd
