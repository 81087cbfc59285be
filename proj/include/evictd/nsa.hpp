// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

#include "evictd/attention.hpp"
#include "evictd/autodiff.hpp"
#include "evictd/random.hpp"
#include "evictd/rope.hpp"

// Query-aware block-sparse reference attention: block pooling, block scoring, top-K block
// selection and the gated three-branch (selected / compressed / sliding) combination.
//
// Block m covers tokens [m*M, (m+1)*M). For query i only complete blocks, i.e. (m+1)*M - 1 <= i,
// are candidates; the query's own partial block is covered by the sliding branch.

namespace evictd {

enum class PoolMode { mean, learned_mlp };

struct NsaConfig {
    std::size_t block = 8;   // M
    std::size_t top_k = 4;   // K
    std::size_t window = 16; // sliding branch width, query i reads i-window+1..i
    PoolMode pool = PoolMode::mean;
    bool rope = false;       // rotate queries/keys; compressed keys sit at their block centre

    void validate() const {
        EVICTD_CHECK(block >= 1 && top_k >= 1 && window >= 1, ConfigError, "nsa: M, K and window must be >= 1");
    }
};

/// Two-layer ReLU MLP phi: [M*d] -> hidden -> [d].
struct PoolMlp {
    Tensor w1, b1, w2, b2;

    /// For M = 1: W1 = [I, -I], W2 = [I; -I], so relu(x) - relu(-x) = x.
    static PoolMlp identity(std::size_t d) {
        PoolMlp p{Tensor({d, 2 * d}), Tensor({2 * d}), Tensor({2 * d, d}), Tensor({d})};
        for (std::size_t i = 0; i < d; ++i) {
            p.w1(i, i) = 1.0;
            p.w1(i, d + i) = -1.0;
            p.w2(i, i) = 1.0;
            p.w2(d + i, i) = -1.0;
        }
        return p;
    }

    static PoolMlp random(std::size_t block, std::size_t d, std::size_t hidden, std::uint64_t seed) {
        Rng rng(seed);
        const double a1 = 1.0 / std::sqrt(static_cast<double>(block * d));
        const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
        PoolMlp p;
        p.w1 = uniform_tensor<double>({block * d, hidden}, rng, -a1, a1);
        p.b1 = uniform_tensor<double>({hidden}, rng, -a1, a1);
        p.w2 = uniform_tensor<double>({hidden, d}, rng, -a2, a2);
        p.b2 = uniform_tensor<double>({d}, rng, -a2, a2);
        return p;
    }

    std::vector<double> apply(std::span<const double> flat) const {
        EVICTD_CHECK(flat.size() == w1.dim(0), DimensionError, "block_pool: flattened block width does not match the MLP");
        const std::size_t hidden = w1.dim(1), d = w2.dim(1);
        std::vector<double> h(hidden), out(d);
        for (std::size_t j = 0; j < hidden; ++j) {
            double acc = b1[j];
            for (std::size_t i = 0; i < flat.size(); ++i) {
                acc += flat[i] * w1(i, j);
            }
            h[j] = acc > 0.0 ? acc : 0.0;
        }
        for (std::size_t j = 0; j < d; ++j) {
            double acc = b2[j];
            for (std::size_t i = 0; i < hidden; ++i) {
                acc += h[i] * w2(i, j);
            }
            out[j] = acc;
        }
        return out;
    }
};

struct NsaParams {
    Tensor gate_w;  // [d x 3], columns: selected, compressed, sliding
    Tensor gate_b;  // [3]
    std::optional<PoolMlp> phi_k;
    std::optional<PoolMlp> phi_v;

    static NsaParams init(std::size_t d, const NsaConfig& cfg, std::uint64_t seed) {
        Rng rng(derive_seed(seed, "nsa.gate"));
        const double a = 1.0 / std::sqrt(static_cast<double>(d));
        NsaParams p{uniform_tensor<double>({d, 3}, rng, -a, a), Tensor({3}), std::nullopt, std::nullopt};
        if (cfg.pool == PoolMode::learned_mlp) {
            p.phi_k = PoolMlp::random(cfg.block, d, 2 * d, derive_seed(seed, "nsa.phi_k"));
            p.phi_v = PoolMlp::random(cfg.block, d, 2 * d, derive_seed(seed, "nsa.phi_v"));
        }
        return p;
    }
};

/**
 * Compresses one block of rows [len x d] into a single row. Mean mode averages; learned mode
 * flattens the block (zero-filling a short tail block up to M rows) and applies phi.
 */
inline std::vector<double> block_pool(const Tensor& rows, PoolMode mode, const PoolMlp* phi = nullptr, std::size_t block = 0) {
    EVICTD_CHECK(rows.rank() == 2 && rows.dim(0) >= 1, DimensionError, "block_pool: empty block");
    const std::size_t len = rows.dim(0), d = rows.dim(1);
    if (mode == PoolMode::mean) {
        std::vector<double> out(d, 0.0);
        for (std::size_t t = 0; t < len; ++t) {
            for (std::size_t c = 0; c < d; ++c) {
                out[c] += rows(t, c);
            }
        }
        for (double& x : out) {
            x /= static_cast<double>(len);
        }
        return out;
    }
    EVICTD_CHECK(phi != nullptr, ParameterError, "block_pool: learned mode needs an MLP");
    const std::size_t M = block ? block : len;
    EVICTD_CHECK(len <= M, DimensionError, "block_pool: block longer than M");
    std::vector<double> flat(M * d, 0.0);
    std::copy(rows.data().begin(), rows.data().end(), flat.begin());
    return phi->apply(flat);
}

/// Number of complete blocks available to query i.
inline std::size_t complete_blocks(std::size_t i, std::size_t M) {
    return (i + 1) / M;
}

/// Compressed keys/values of every complete block of a length-T sequence: [floor(T/M) x d].
struct BlockIndex {
    std::size_t block = 1;
    Tensor k;
    Tensor v;
    std::vector<std::size_t> centres;

    std::size_t count() const {
        return centres.size();
    }
};

inline BlockIndex build_block_index(const Tensor& k, const Tensor& v, const NsaConfig& cfg, const NsaParams* params = nullptr) {
    cfg.validate();
    const std::size_t T = k.dim(0), d = k.dim(1), M = cfg.block, nb = T / M;
    BlockIndex bi{M, Tensor({nb, d}), Tensor({nb, v.dim(1)}), {}};
    const PoolMlp* pk = params && params->phi_k ? &*params->phi_k : nullptr;
    const PoolMlp* pv = params && params->phi_v ? &*params->phi_v : nullptr;
    for (std::size_t m = 0; m < nb; ++m) {
        Tensor kb({M, d}, std::vector<double>(k.data().begin() + static_cast<std::ptrdiff_t>(m * M * d),
                                              k.data().begin() + static_cast<std::ptrdiff_t>((m + 1) * M * d)));
        Tensor vb({M, v.dim(1)}, std::vector<double>(v.data().begin() + static_cast<std::ptrdiff_t>(m * M * v.dim(1)),
                                                     v.data().begin() + static_cast<std::ptrdiff_t>((m + 1) * M * v.dim(1))));
        const auto ck = block_pool(kb, cfg.pool, pk, M);
        const auto cv = block_pool(vb, cfg.pool, pv, M);
        std::copy(ck.begin(), ck.end(), bi.k.row(m).begin());
        std::copy(cv.begin(), cv.end(), bi.v.row(m).begin());
        bi.centres.push_back(m * M + (M - 1) / 2);
    }
    return bi;
}

/// <q_i, k^B_m> for the first `blocks` compressed keys.
inline std::vector<double> block_scores(std::span<const double> q, const Tensor& pooled_k, std::size_t blocks) {
    EVICTD_CHECK(blocks <= pooled_k.dim(0) && q.size() == pooled_k.dim(1), DimensionError, "block_scores: bad shapes");
    std::vector<double> s(blocks);
    for (std::size_t m = 0; m < blocks; ++m) {
        s[m] = dot(q, pooled_k.row(m));
    }
    return s;
}

/// Indices of the K highest scores (all of them when fewer), ties to the lower index, ascending.
inline std::vector<std::size_t> select_topk_blocks(std::span<const double> scores, std::size_t K) {
    EVICTD_CHECK(K >= 1, ParameterError, "select_topk_blocks: K must be >= 1");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });
    order.resize(std::min(K, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

/// Per-query index sets of the three branches plus the selected blocks.
struct NsaIndex {
    IndexSet selected;      // tokens of the chosen blocks only
    IndexSet selected_all;  // chosen blocks plus the sliding window (what the selected branch reads)
    IndexSet compressed;    // complete block ids
    IndexSet sliding;
    std::vector<std::vector<std::size_t>> blocks;
};

inline NsaIndex build_nsa_index(const Tensor& q, const BlockIndex& bi, const NsaConfig& cfg) {
    const std::size_t T = q.dim(0), M = cfg.block;
    NsaIndex ix;
    ix.selected.resize(T);
    ix.selected_all.resize(T);
    ix.compressed.resize(T);
    ix.sliding.resize(T);
    ix.blocks.resize(T);
    for (std::size_t i = 0; i < T; ++i) {
        const std::size_t nb = std::min(complete_blocks(i, M), bi.count());
        for (std::size_t m = 0; m < nb; ++m) {
            ix.compressed[i].push_back(static_cast<std::uint32_t>(m));
        }
        const std::size_t lo = i + 1 >= cfg.window ? i + 1 - cfg.window : 0;
        for (std::size_t j = lo; j <= i; ++j) {
            ix.sliding[i].push_back(static_cast<std::uint32_t>(j));
        }
        if (nb > 0) {
            const auto scores = block_scores(q.row(i), bi.k, nb);
            ix.blocks[i] = select_topk_blocks(scores, cfg.top_k);
        }
        std::vector<std::uint8_t> take(i + 1, 0);
        for (std::size_t m : ix.blocks[i]) {
            for (std::size_t j = m * M; j < (m + 1) * M; ++j) {
                take[j] = 1;
                ix.selected[i].push_back(static_cast<std::uint32_t>(j));
            }
        }
        for (std::size_t j = lo; j <= i; ++j) {
            take[j] = 1;
        }
        for (std::size_t j = 0; j <= i; ++j) {
            if (take[j]) {
                ix.selected_all[i].push_back(static_cast<std::uint32_t>(j));
            }
        }
    }
    return ix;
}

/// Gate triple per query: sigmoid(q W + b) [T x 3].
inline Tensor nsa_gates(const Tensor& q, const NsaParams& p) {
    Tensor g = matmul(q, p.gate_w);
    for (std::size_t i = 0; i < g.dim(0); ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            g(i, c) = sigmoid(g(i, c) + p.gate_b[c]);
        }
    }
    return g;
}

struct NsaOutput {
    Tensor out;
    Tensor selected, compressed, sliding;  // per-branch outputs
    Tensor gates;
    NsaIndex index;
};

namespace detail {

// Masked oracle that leaves empty rows at zero.
inline Tensor masked_or_zero(const Tensor& q, const Tensor& k, const Tensor& v, const IndexSet& idx, double scale) {
    Tensor out({q.dim(0), v.dim(1)});
    IndexSet nonempty;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (!idx[i].empty()) {
            rows.push_back(i);
        }
    }
    if (rows.size() == idx.size()) {
        return masked_attention_oracle(q, k, v, idx, scale);
    }
    for (std::size_t i : rows) {
        Tensor qi({1, q.dim(1)}, std::vector<double>(q.row(i).begin(), q.row(i).end()));
        // one row at a time keeps the arithmetic identical to the full-matrix oracle
        const IndexSet one{idx[i]};
        Tensor r = masked_attention_oracle(qi, k, v, one, scale);
        std::copy(r.data().begin(), r.data().end(), out.row(i).begin());
    }
    return out;
}

}  // namespace detail

/**
 * Gated three-branch attention for one head. q, k, v [T x d]. `gates` overrides the learned gate
 * projection with a fixed triple (selected, compressed, sliding) for branch isolation.
 */
inline NsaOutput nsa_forward(const Tensor& q_in,
                             const Tensor& k_in,
                             const Tensor& v,
                             const NsaConfig& cfg,
                             const NsaParams& params,
                             std::optional<std::array<double, 3>> gates = std::nullopt,
                             const SinusoidTable* table = nullptr) {
    cfg.validate();
    EVICTD_CHECK(q_in.shape() == k_in.shape() && v.dim(0) == q_in.dim(0), DimensionError, "nsa_forward: shapes");
    const std::size_t T = q_in.dim(0);
    const double scale = default_scale(q_in.dim(1));
    Tensor q = q_in, k = k_in;
    BlockIndex bi = build_block_index(k_in, v, cfg, &params);
    if (cfg.rope) {
        EVICTD_CHECK(table != nullptr, ParameterError, "nsa_forward: rope enabled without a table");
        std::vector<std::size_t> pos(T);
        std::iota(pos.begin(), pos.end(), std::size_t{0});
        q = apply_rope(q_in, pos, *table);
        k = apply_rope(k_in, pos, *table);
        if (bi.count()) {
            bi.k = apply_rope(bi.k, bi.centres, *table);
        }
    }
    NsaOutput res;
    res.index = build_nsa_index(q, bi, cfg);
    res.selected = detail::masked_or_zero(q, k, v, res.index.selected_all, scale);
    res.compressed = bi.count() ? detail::masked_or_zero(q, bi.k, bi.v, res.index.compressed, scale) : Tensor({T, v.dim(1)});
    res.sliding = detail::masked_or_zero(q, k, v, res.index.sliding, scale);
    if (gates) {
        res.gates = Tensor({T, 3});
        for (std::size_t i = 0; i < T; ++i) {
            for (std::size_t c = 0; c < 3; ++c) {
                res.gates(i, c) = (*gates)[c];
            }
        }
    } else {
        res.gates = nsa_gates(q_in, params);
    }
    res.out = Tensor({T, v.dim(1)});
    for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t c = 0; c < v.dim(1); ++c) {
            res.out(i, c) = res.gates(i, 0) * res.selected(i, c) + res.gates(i, 1) * res.compressed(i, c) +
                            res.gates(i, 2) * res.sliding(i, c);
        }
    }
    return res;
}

namespace ad {

struct PoolMlpVars {
    Var w1, b1, w2, b2;
};

struct NsaVars {
    Var gate_w, gate_b;
    std::optional<PoolMlpVars> phi_k, phi_v;
};

inline NsaVars bind(Tape& tape, const NsaParams& p) {
    NsaVars nv{tape.parameter(p.gate_w), tape.parameter(p.gate_b), std::nullopt, std::nullopt};
    auto bind_mlp = [&](const PoolMlp& m) {
        return PoolMlpVars{tape.parameter(m.w1), tape.parameter(m.b1), tape.parameter(m.w2), tape.parameter(m.b2)};
    };
    if (p.phi_k) {
        nv.phi_k = bind_mlp(*p.phi_k);
    }
    if (p.phi_v) {
        nv.phi_v = bind_mlp(*p.phi_v);
    }
    return nv;
}

// Compressed rows of the first nb complete blocks of x [T x d].
inline Var pool_blocks(Var x, std::size_t M, std::size_t nb, PoolMode mode, const std::optional<PoolMlpVars>& phi) {
    const std::size_t T = x.value().dim(0), d = x.value().dim(1);
    if (mode == PoolMode::mean) {
        Tensor P({nb, T});
        for (std::size_t m = 0; m < nb; ++m) {
            for (std::size_t j = m * M; j < (m + 1) * M; ++j) {
                P(m, j) = 1.0 / static_cast<double>(M);
            }
        }
        return left_matmul(P, x);
    }
    EVICTD_CHECK(phi.has_value(), ParameterError, "nsa: learned pooling without MLP parameters");
    Var flat = reshape(slice_rows(x, 0, nb * M), {nb, M * d});
    Var h = relu(add_bias(matmul(flat, phi->w1), phi->b1));
    return add_bias(matmul(h, phi->w2), phi->b2);
}

/**
 * Differentiable gated forward. Block selection is a discrete choice made on the values and
 * carries no gradient; gradients reach q, k, v through the three attentions and the gates.
 */
inline Var nsa_forward(Var q, Var k, Var v, const NsaVars& p, const NsaConfig& cfg) {
    cfg.validate();
    const std::size_t T = q.value().dim(0), M = cfg.block, nb = T / M;
    EVICTD_CHECK(!cfg.rope, ParameterError, "nsa: the differentiable path has no rotary variant");
    const double scale = default_scale(q.value().dim(1));
    Tape& tape = *q.tape;
    Var out_sel, out_cmp, out_swa;
    Var kb{}, vb{};
    BlockIndex bi{M, Tensor({0, q.value().dim(1)}), Tensor({0, v.value().dim(1)}), {}};
    if (nb > 0) {
        kb = pool_blocks(k, M, nb, cfg.pool, p.phi_k);
        vb = pool_blocks(v, M, nb, cfg.pool, p.phi_v);
        bi.k = kb.value();
        bi.v = vb.value();
        bi.centres.resize(nb);
    }
    const NsaIndex ix = build_nsa_index(q.value(), bi, cfg);
    out_sel = masked_attention(q, k, v, ix.selected_all, scale);
    out_swa = masked_attention(q, k, v, ix.sliding, scale);
    out_cmp = nb > 0 ? masked_attention(q, kb, vb, ix.compressed, scale, true) : tape.constant(Tensor({T, v.value().dim(1)}));
    Var gates = sigmoid(add_bias(matmul(q, p.gate_w), p.gate_b));
    return add(add(scale_rows(out_sel, gates, 0), scale_rows(out_cmp, gates, 1)), scale_rows(out_swa, gates, 2));
}

}  // namespace ad

}  // namespace evictd
