// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include "evictd/attention.hpp"
#include "evictd/autodiff.hpp"
#include "evictd/lte_scorer.hpp"

// Straight-through training pieces: the surrogate gradient for binarized retention, the
// multi-head attention op that uses it, and the hinge sparsity penalty.

namespace evictd {

/**
 * Surrogate gradient for r given v and the upstream gradient on v' = v * m (both [T x heads*d]):
 * dL/dr[j,h] = <v[j,h], dL/dv'[j,h]>. The mask only documents the forward; it does not enter.
 */
inline Tensor ste_backward(const Tensor& v, const BinaryRetention& mask, const Tensor& grad_v_masked, std::size_t heads) {
    EVICTD_CHECK(v.rank() == 2 && v.shape() == grad_v_masked.shape() && heads >= 1 && v.dim(1) % heads == 0,
                 DimensionError,
                 "ste_backward: v and its gradient must be [T x heads*d]");
    EVICTD_CHECK(mask.size() == v.dim(0) * heads, DimensionError, "ste_backward: mask must be [T x heads]");
    const std::size_t T = v.dim(0), d = v.dim(1) / heads;
    Tensor g({T, heads});
    for (std::size_t j = 0; j < T; ++j) {
        for (std::size_t h = 0; h < heads; ++h) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                acc += v(j, h * d + c) * grad_v_masked(j, h * d + c);
            }
            g(j, h) = acc;
        }
    }
    return g;
}

/// Whether key j is admitted for query i only through its retention flag.
inline bool retention_controlled(std::size_t i, std::size_t j, std::size_t s, std::size_t w) {
    return j >= s && j + w < i;
}

/// sum_h lambda[h] * sum_{j >= s} relu(r[j,h] - 0.5); sinks are retained unconditionally and skipped.
inline double sparsity_loss(const Tensor& r, std::span<const double> lambda, std::size_t sink) {
    EVICTD_CHECK(r.rank() == 2 && lambda.size() == r.dim(1), DimensionError, "sparsity_loss: one lambda per head");
    double total = 0.0;
    for (std::size_t h = 0; h < r.dim(1); ++h) {
        EVICTD_CHECK(lambda[h] >= 0.0, ParameterError, "sparsity_loss: lambda must be >= 0");
        double acc = 0.0;
        for (std::size_t j = sink; j < r.dim(0); ++j) {
            acc += std::max(0.0, r(j, h) - 0.5);
        }
        total += lambda[h] * acc;
    }
    return total;
}

/// Per-head count of retained tokens outside the window of the final query (sinks excluded).
inline std::vector<double> retained_counts(const Tensor& r, std::size_t sink, std::size_t w) {
    const std::size_t T = r.dim(0);
    std::vector<double> c(r.dim(1), 0.0);
    for (std::size_t h = 0; h < r.dim(1); ++h) {
        for (std::size_t j = sink; j + w + 1 < T; ++j) {
            c[h] += r(j, h) > 0.5 ? 1.0 : 0.0;
        }
    }
    return c;
}

namespace ad {

inline Var sparsity_loss(Var r, std::vector<double> lambda, std::size_t sink) {
    const double value = evictd::sparsity_loss(r.value(), lambda, sink);
    return r.tape->record(Tensor({1}, {value}), {r}, [r, lambda = std::move(lambda), sink](Tape& t, const Tensor& g) {
        if (Tensor* gr = t.grad_slot(r)) {
            const Tensor& rv = t.value(r);
            for (std::size_t j = sink; j < rv.dim(0); ++j) {
                for (std::size_t h = 0; h < rv.dim(1); ++h) {
                    (*gr)(j, h) += rv(j, h) > 0.5 ? g[0] * lambda[h] : 0.0;
                }
            }
        }
    });
}

struct RetentionGate {
    Var r;                 // [T x heads]
    std::size_t sink = 0;  // s
    std::size_t window = 0;
};

/**
 * Multi-head masked attention over q, k, v [T x heads*d] with one index set per head.
 *
 * With a retention gate the index sets come from binarized r and the backward adds the
 * straight-through gradient dL/dr[j,h] = <v[j,h], sum_i p[i,j] g[i,h]> over the query rows for
 * which j is admitted only by its flag. Evicted keys get no probability and hence no gradient.
 */
inline Var multihead_attention(Var q,
                               Var k,
                               Var v,
                               std::size_t heads,
                               std::vector<IndexSet> idx,
                               double scale,
                               std::optional<RetentionGate> gate = std::nullopt) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    EVICTD_CHECK(qv.shape() == kv.shape() && kv.shape() == vv.shape() && qv.dim(1) % heads == 0 && idx.size() == heads,
                 DimensionError,
                 "multihead_attention: q, k, v must be [T x heads*d] with one index set per head");
    const std::size_t T = qv.dim(0), d = qv.dim(1) / heads;
    Tensor out({T, heads * d});
    auto probs = std::make_shared<std::vector<std::vector<double>>>(T * heads);
    for (std::size_t h = 0; h < heads; ++h) {
        EVICTD_CHECK(idx[h].size() == T, DimensionError, "multihead_attention: index set length");
        for (std::size_t i = 0; i < T; ++i) {
            const auto& row = idx[h][i];
            EVICTD_CHECK(!row.empty(), ContractViolation, "multihead_attention: empty index set for a query");
            auto& p = (*probs)[h * T + i];
            p.resize(row.size());
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t n = 0; n < row.size(); ++n) {
                const std::size_t j = row[n];
                double acc = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    acc += qv(i, h * d + c) * kv(j, h * d + c);
                }
                p[n] = acc * scale;
                mx = std::max(mx, p[n]);
            }
            double denom = 0.0;
            for (double& x : p) {
                x = std::exp(x - mx);
                denom += x;
            }
            for (std::size_t n = 0; n < row.size(); ++n) {
                p[n] /= denom;
                const std::size_t j = row[n];
                for (std::size_t c = 0; c < d; ++c) {
                    out(i, h * d + c) += p[n] * vv(j, h * d + c);
                }
            }
        }
    }
    auto shared_idx = std::make_shared<std::vector<IndexSet>>(std::move(idx));
    Var r_in = gate ? gate->r : q;
    const std::size_t sink = gate ? gate->sink : 0, window = gate ? gate->window : 0;
    const bool gated = gate.has_value();
    return q.tape->record(std::move(out), {q, k, v, r_in}, [=](Tape& t, const Tensor& g) {
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        Tensor* gq = t.grad_slot(q);
        Tensor* gk = t.grad_slot(k);
        Tensor* gv = t.grad_slot(v);
        Tensor* gr = gated ? t.grad_slot(r_in) : nullptr;
        std::vector<double> dp, dvm;
        for (std::size_t h = 0; h < heads; ++h) {
            // dL/dv' of the flag-controlled pairs, per key
            if (gr) {
                dvm.assign(T * d, 0.0);
            }
            for (std::size_t i = 0; i < T; ++i) {
                const auto& row = (*shared_idx)[h][i];
                const auto& p = (*probs)[h * T + i];
                dp.assign(p.size(), 0.0);
                double weighted = 0.0;
                for (std::size_t n = 0; n < p.size(); ++n) {
                    const std::size_t j = row[n];
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                        acc += g(i, h * d + c) * vv(j, h * d + c);
                        if (gv) {
                            (*gv)(j, h * d + c) += p[n] * g(i, h * d + c);
                        }
                    }
                    if (gr && retention_controlled(i, j, sink, window)) {
                        for (std::size_t c = 0; c < d; ++c) {
                            dvm[j * d + c] += p[n] * g(i, h * d + c);
                        }
                    }
                    dp[n] = acc;
                    weighted += p[n] * acc;
                }
                for (std::size_t n = 0; n < p.size(); ++n) {
                    const std::size_t j = row[n];
                    const double ds = p[n] * (dp[n] - weighted) * scale;
                    for (std::size_t c = 0; c < d; ++c) {
                        if (gq) {
                            (*gq)(i, h * d + c) += ds * kv(j, h * d + c);
                        }
                        if (gk) {
                            (*gk)(j, h * d + c) += ds * qv(i, h * d + c);
                        }
                    }
                }
            }
            if (gr) {
                for (std::size_t j = 0; j < T; ++j) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                        acc += vv(j, h * d + c) * dvm[j * d + c];
                    }
                    (*gr)(j, h) += acc;
                }
            }
        }
    });
}

/// Index sets of every head from the current values of r [T x heads].
inline std::vector<IndexSet> retention_index_sets(const Tensor& r, std::size_t sink, std::size_t w) {
    std::vector<IndexSet> idx;
    for (std::size_t h = 0; h < r.dim(1); ++h) {
        idx.push_back(build_index_set(r.dim(0), h, r, sink, w));
    }
    return idx;
}

}  // namespace ad

}  // namespace evictd
