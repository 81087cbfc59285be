// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "evictd/autodiff.hpp"
#include "evictd/tensor.hpp"

// Token positions are 0-based throughout: the sink is {j < s}, and query i admits the window
// {i - w <= j <= i} (w + 1 tokens including itself).

namespace evictd {

/// Per-query sorted list of admitted key positions for one head.
using IndexSet = std::vector<std::vector<std::uint32_t>>;

inline bool in_window(std::size_t i, std::size_t j, std::size_t w) {
    return j <= i && j + w >= i;
}

/// Sink, retained or in-window: the admission rule for a single (query, key) pair.
inline bool admitted(std::size_t i, std::size_t j, std::size_t s, std::size_t w, double r) {
    return j <= i && (j < s || r > 0.5 || j + w >= i);
}

/// Index set of one head; r holds that head's retention score per token (length >= T).
inline IndexSet build_index_set(std::size_t T, std::span<const double> r, std::size_t s, std::size_t w) {
    EVICTD_CHECK(w >= 1, ParameterError, "build_index_set: w must be >= 1");
    EVICTD_CHECK(r.size() >= T, DimensionError, "build_index_set: missing retention scores");
    IndexSet idx(T);
    for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            if (admitted(i, j, s, w, r[j])) {
                idx[i].push_back(static_cast<std::uint32_t>(j));
            }
        }
    }
    return idx;
}

/// Index set of head h from a score matrix r [T x heads].
inline IndexSet build_index_set(std::size_t T, std::size_t head, const Tensor& r, std::size_t s, std::size_t w) {
    EVICTD_CHECK(r.rank() == 2 && r.dim(0) >= T && head < r.dim(1), DimensionError, "build_index_set: bad score matrix");
    std::vector<double> col(T);
    for (std::size_t j = 0; j < T; ++j) {
        col[j] = r(j, head);
    }
    return build_index_set(T, col, s, w);
}

inline IndexSet full_causal_index_set(std::size_t T) {
    IndexSet idx(T);
    for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            idx[i].push_back(static_cast<std::uint32_t>(j));
        }
    }
    return idx;
}

inline double default_scale(std::size_t head_dim) {
    return 1.0 / std::sqrt(static_cast<double>(head_dim));
}

/// Ground truth: per-row softmax restricted to idx[i], computed with an explicit loop.
template <typename Scalar>
BasicTensor<Scalar> masked_attention_oracle(const BasicTensor<Scalar>& q,
                                            const BasicTensor<Scalar>& k,
                                            const BasicTensor<Scalar>& v,
                                            const IndexSet& idx,
                                            double scale) {
    EVICTD_CHECK(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 && q.dim(1) == k.dim(1) && k.dim(0) == v.dim(0),
                 DimensionError,
                 "masked_attention_oracle: q/k/v shapes do not agree");
    EVICTD_CHECK(idx.size() == q.dim(0), DimensionError, "masked_attention_oracle: one index list per query");
    const std::size_t dk = q.dim(1), dv = v.dim(1);
    BasicTensor<Scalar> out({q.dim(0), dv});
    for (std::size_t i = 0; i < q.dim(0); ++i) {
        EVICTD_CHECK(!idx[i].empty(), ContractViolation, "masked_attention_oracle: empty index set for a query");
        std::vector<double> scores(idx[i].size());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t n = 0; n < idx[i].size(); ++n) {
            const std::size_t j = idx[i][n];
            EVICTD_CHECK(j < k.dim(0), DimensionError, "masked_attention_oracle: index out of range");
            double acc = 0.0;
            for (std::size_t c = 0; c < dk; ++c) {
                acc += static_cast<double>(q(i, c)) * static_cast<double>(k(j, c));
            }
            scores[n] = acc * scale;
            mx = std::max(mx, scores[n]);
        }
        double denom = 0.0;
        for (double& sc : scores) {
            sc = std::exp(sc - mx);
            denom += sc;
        }
        for (std::size_t n = 0; n < idx[i].size(); ++n) {
            const std::size_t j = idx[i][n];
            for (std::size_t c = 0; c < dv; ++c) {
                out(i, c) += static_cast<Scalar>(scores[n] / denom * static_cast<double>(v(j, c)));
            }
        }
    }
    return out;
}

/// softmax(QK^T * scale) V with query i reading keys 0..i. T = 0 gives an empty output.
template <typename Scalar>
BasicTensor<Scalar> dense_causal_attention(const BasicTensor<Scalar>& q,
                                           const BasicTensor<Scalar>& k,
                                           const BasicTensor<Scalar>& v,
                                           double scale) {
    EVICTD_CHECK(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 && q.dim(0) == k.dim(0) && k.dim(0) == v.dim(0) &&
                     q.dim(1) == k.dim(1),
                 DimensionError,
                 "dense_causal_attention: q/k/v shapes do not agree");
    const std::size_t T = q.dim(0), dk = q.dim(1), dv = v.dim(1);
    BasicTensor<Scalar> out({T, dv});
    std::vector<double> scores(T);
    for (std::size_t i = 0; i < T; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < dk; ++c) {
                acc += static_cast<double>(q(i, c)) * static_cast<double>(k(j, c));
            }
            scores[j] = acc * scale;
            mx = std::max(mx, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            denom += scores[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
            const double p = scores[j] / denom;
            for (std::size_t c = 0; c < dv; ++c) {
                out(i, c) += static_cast<Scalar>(p * static_cast<double>(v(j, c)));
            }
        }
    }
    return out;
}

/// Sliding-window attention: row i attends max(0, i-w+1)..i.
template <typename Scalar>
BasicTensor<Scalar> swa_attention(const BasicTensor<Scalar>& q,
                                  const BasicTensor<Scalar>& k,
                                  const BasicTensor<Scalar>& v,
                                  std::size_t w,
                                  double scale) {
    EVICTD_CHECK(w >= 1, ParameterError, "swa_attention: w must be >= 1");
    IndexSet idx(q.dim(0));
    for (std::size_t i = 0; i < q.dim(0); ++i) {
        for (std::size_t j = i + 1 > w ? i + 1 - w : 0; j <= i; ++j) {
            idx[i].push_back(static_cast<std::uint32_t>(j));
        }
    }
    return masked_attention_oracle(q, k, v, idx, scale);
}

// ---------------------------------------------------------------------------------------------
// Two-stage tiled SWA + compacted-KV attention

/// Read-only view of a KV segment: row n of k/v (width dim) belongs to token positions[n].
template <typename Scalar>
struct KvView {
    std::span<const Scalar> k;
    std::span<const Scalar> v;
    std::span<const std::size_t> positions;
    std::size_t dim = 0;

    std::size_t count() const {
        return positions.size();
    }

    static KvView of(const BasicTensor<Scalar>& k, const BasicTensor<Scalar>& v, std::span<const std::size_t> positions) {
        EVICTD_CHECK(k.rank() == 2 && v.rank() == 2 && k.dim(0) == positions.size() && v.dim(0) == positions.size() &&
                         k.dim(1) == v.dim(1),
                     DimensionError,
                     "KvView: key/value/position counts disagree");
        return KvView{k.data(), v.data(), positions, k.dim(1)};
    }
};

enum class TileStage : std::uint8_t { swa, sparse };
enum class TileDecision : std::uint8_t { computed, skipped };

struct TileRecord {
    std::size_t query_tile = 0;
    TileStage stage = TileStage::swa;
    std::size_t segment = 0;  // index of the window view (stage swa) or 0 (stage sparse)
    std::size_t begin = 0;    // first row of the KV tile within its segment
    std::size_t end = 0;
    TileDecision decision = TileDecision::computed;
};

/// Audit trail of which KV tiles each query tile computed or skipped.
struct TilePlan {
    std::size_t tile = 0;
    std::vector<TileRecord> records;

    std::size_t count(TileStage stage, TileDecision decision) const {
        return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [&](const TileRecord& r) {
            return r.stage == stage && r.decision == decision;
        }));
    }
};

struct TwoStageOptions {
    std::size_t w = 1;
    std::size_t tile = 16;
    double scale = 1.0;
};

namespace detail {

template <typename Scalar>
struct OnlineSoftmaxRow {
    double max = -std::numeric_limits<double>::infinity();
    double denom = 0.0;
    std::vector<double> acc;
};

}  // namespace detail

/**
 * Attention of each query over (window views, stage 1) and (compacted segment, stage 2) with one
 * online softmax accumulator per query.
 *
 * Stage 1 admits window entries with i - w <= pos <= i. Stage 2 admits compacted entries with
 * pos < i - w; compacted entries that fall inside a query's window are masked so nothing is
 * counted twice. A KV tile whose every pair would be rejected is skipped without touching its keys.
 * The physical order of compacted entries is irrelevant; duplicated compacted positions mean the
 * cache layout is corrupt and raise ContractViolation.
 */
template <typename Scalar>
BasicTensor<Scalar> two_stage_sparse_attention(const BasicTensor<Scalar>& q,
                                               std::span<const std::size_t> query_positions,
                                               std::span<const KvView<Scalar>> window,
                                               const KvView<Scalar>& compact,
                                               const TwoStageOptions& opt,
                                               TilePlan* plan = nullptr) {
    EVICTD_CHECK(opt.tile >= 1 && opt.w >= 1, ParameterError, "two_stage_sparse_attention: tile and w must be >= 1");
    EVICTD_CHECK(q.rank() == 2 && query_positions.size() == q.dim(0),
                 DimensionError,
                 "two_stage_sparse_attention: one position per query row");
    const std::size_t d = q.dim(1);
    for (const auto& view : window) {
        EVICTD_CHECK(view.count() == 0 || view.dim == d, DimensionError, "two_stage_sparse_attention: window width");
    }
    EVICTD_CHECK(compact.count() == 0 || compact.dim == d, DimensionError, "two_stage_sparse_attention: compact width");
    {
        std::vector<std::size_t> sorted(compact.positions.begin(), compact.positions.end());
        std::sort(sorted.begin(), sorted.end());
        EVICTD_CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
                     ContractViolation,
                     "two_stage_sparse_attention: duplicate positions in the compacted segment (layout corruption)");
    }
    if (plan) {
        plan->tile = opt.tile;
        plan->records.clear();
    }

    const std::size_t T = q.dim(0);
    const std::size_t w = opt.w;
    BasicTensor<Scalar> out({T, d});
    std::vector<double> m(opt.tile), l(opt.tile), acc(opt.tile * d), s(opt.tile * opt.tile);

    auto run_tile = [&](std::size_t q0, std::size_t q1, const KvView<Scalar>& view, std::size_t k0, std::size_t k1,
                        TileStage stage) {
        for (std::size_t i = q0; i < q1; ++i) {
            const std::size_t qi = query_positions[i];
            const Scalar* qrow = q.data().data() + i * d;
            const std::size_t li = i - q0;
            double tile_max = -std::numeric_limits<double>::infinity();
            double* srow = s.data() + li * opt.tile;
            for (std::size_t n = k0; n < k1; ++n) {
                const std::size_t pj = view.positions[n];
                const bool ok = stage == TileStage::swa ? in_window(qi, pj, w) : (pj + w < qi);
                if (!ok) {
                    srow[n - k0] = -std::numeric_limits<double>::infinity();
                    continue;
                }
                const Scalar* krow = view.k.data() + n * d;
                double dotp = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    dotp += static_cast<double>(qrow[c]) * static_cast<double>(krow[c]);
                }
                srow[n - k0] = dotp * opt.scale;
                tile_max = std::max(tile_max, srow[n - k0]);
            }
            if (tile_max == -std::numeric_limits<double>::infinity()) {
                continue;
            }
            const double new_max = std::max(m[li], tile_max);
            const double correction = std::exp(m[li] - new_max);
            l[li] *= correction;
            double* arow = acc.data() + li * d;
            for (std::size_t c = 0; c < d; ++c) {
                arow[c] *= correction;
            }
            for (std::size_t n = k0; n < k1; ++n) {
                if (srow[n - k0] == -std::numeric_limits<double>::infinity()) {
                    continue;
                }
                const double p = std::exp(srow[n - k0] - new_max);
                l[li] += p;
                const Scalar* vrow = view.v.data() + n * d;
                for (std::size_t c = 0; c < d; ++c) {
                    arow[c] += p * static_cast<double>(vrow[c]);
                }
            }
            m[li] = new_max;
        }
    };

    auto bounds = [](std::span<const std::size_t> pos, std::size_t b, std::size_t e) {
        auto [lo, hi] = std::minmax_element(pos.begin() + static_cast<std::ptrdiff_t>(b),
                                            pos.begin() + static_cast<std::ptrdiff_t>(e));
        return std::pair<std::size_t, std::size_t>{*lo, *hi};
    };

    for (std::size_t q0 = 0, qt = 0; q0 < T; q0 += opt.tile, ++qt) {
        const std::size_t q1 = std::min(T, q0 + opt.tile);
        const auto [qmin, qmax] = bounds(query_positions, q0, q1);
        std::fill(m.begin(), m.end(), -std::numeric_limits<double>::infinity());
        std::fill(l.begin(), l.end(), 0.0);
        std::fill(acc.begin(), acc.end(), 0.0);

        // Stage 1: sliding window over the original KVs.
        for (std::size_t seg = 0; seg < window.size(); ++seg) {
            const auto& view = window[seg];
            for (std::size_t k0 = 0; k0 < view.count(); k0 += opt.tile) {
                const std::size_t k1 = std::min(view.count(), k0 + opt.tile);
                const auto [pmin, pmax] = bounds(view.positions, k0, k1);
                const bool skip = pmin > qmax || pmax + w < qmin;
                if (plan) {
                    plan->records.push_back(
                        {qt, TileStage::swa, seg, k0, k1, skip ? TileDecision::skipped : TileDecision::computed});
                }
                if (!skip) {
                    run_tile(q0, q1, view, k0, k1, TileStage::swa);
                }
            }
        }
        // Stage 2: compacted out-of-window entries.
        for (std::size_t k0 = 0; k0 < compact.count(); k0 += opt.tile) {
            const std::size_t k1 = std::min(compact.count(), k0 + opt.tile);
            const auto [pmin, pmax] = bounds(compact.positions, k0, k1);
            const bool skip = pmin + w >= qmax;
            if (plan) {
                plan->records.push_back(
                    {qt, TileStage::sparse, 0, k0, k1, skip ? TileDecision::skipped : TileDecision::computed});
            }
            if (!skip) {
                run_tile(q0, q1, compact, k0, k1, TileStage::sparse);
            }
        }

        for (std::size_t i = q0; i < q1; ++i) {
            const std::size_t li = i - q0;
            EVICTD_CHECK(l[li] > 0.0, ContractViolation, "two_stage_sparse_attention: query admits no keys");
            for (std::size_t c = 0; c < d; ++c) {
                out(i, c) = static_cast<Scalar>(acc[li * d + c] / l[li]);
            }
        }
    }
    return out;
}

/// Convenience form for a prefill: the window is the full sequence k/v at positions 0..T-1.
template <typename Scalar>
BasicTensor<Scalar> two_stage_sparse_attention(const BasicTensor<Scalar>& q,
                                               const BasicTensor<Scalar>& k_window,
                                               const BasicTensor<Scalar>& v_window,
                                               const BasicTensor<Scalar>& k_compact,
                                               const BasicTensor<Scalar>& v_compact,
                                               std::span<const std::size_t> compact_positions,
                                               const TwoStageOptions& opt,
                                               TilePlan* plan = nullptr) {
    std::vector<std::size_t> pos(q.dim(0));
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::vector<std::size_t> wpos(k_window.dim(0));
    std::iota(wpos.begin(), wpos.end(), std::size_t{0});
    const KvView<Scalar> wv = KvView<Scalar>::of(k_window, v_window, wpos);
    const KvView<Scalar> cv = k_compact.empty() && compact_positions.empty()
                                  ? KvView<Scalar>{{}, {}, {}, q.dim(1)}
                                  : KvView<Scalar>::of(k_compact, v_compact, compact_positions);
    return two_stage_sparse_attention<Scalar>(q, pos, std::span<const KvView<Scalar>>(&wv, 1), cv, opt, plan);
}

// ---------------------------------------------------------------------------------------------
// Differentiable single-head masked attention

namespace ad {

/**
 * Masked attention over explicit index sets. Rows with an empty set produce zeros when
 * allow_empty_rows is true (the NSA branches need this for the first block).
 */
inline Var masked_attention(Var q, Var k, Var v, const IndexSet& idx, double scale, bool allow_empty_rows = false) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    EVICTD_CHECK(qv.dim(1) == kv.dim(1) && kv.dim(0) == vv.dim(0) && idx.size() == qv.dim(0),
                 DimensionError,
                 "masked_attention: shapes do not agree");
    const std::size_t T = qv.dim(0), dk = qv.dim(1), dv = vv.dim(1);
    Tensor out({T, dv});
    std::vector<std::vector<double>> probs(T);
    for (std::size_t i = 0; i < T; ++i) {
        if (idx[i].empty()) {
            EVICTD_CHECK(allow_empty_rows, ContractViolation, "masked_attention: empty index set for a query");
            continue;
        }
        auto& p = probs[i];
        p.resize(idx[i].size());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t n = 0; n < idx[i].size(); ++n) {
            const std::size_t j = idx[i][n];
            double acc = 0.0;
            for (std::size_t c = 0; c < dk; ++c) {
                acc += qv(i, c) * kv(j, c);
            }
            p[n] = acc * scale;
            mx = std::max(mx, p[n]);
        }
        double denom = 0.0;
        for (double& x : p) {
            x = std::exp(x - mx);
            denom += x;
        }
        for (std::size_t n = 0; n < idx[i].size(); ++n) {
            p[n] /= denom;
            const std::size_t j = idx[i][n];
            for (std::size_t c = 0; c < dv; ++c) {
                out(i, c) += p[n] * vv(j, c);
            }
        }
    }
    return q.tape->record(std::move(out), {q, k, v}, [q, k, v, idx, probs, scale](Tape& t, const Tensor& g) {
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        Tensor* gq = t.grad_slot(q);
        Tensor* gk = t.grad_slot(k);
        Tensor* gv = t.grad_slot(v);
        const std::size_t dk = qv.dim(1), dv = vv.dim(1);
        std::vector<double> dp;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto& p = probs[i];
            if (p.empty()) {
                continue;
            }
            dp.assign(p.size(), 0.0);
            double weighted = 0.0;
            for (std::size_t n = 0; n < p.size(); ++n) {
                const std::size_t j = idx[i][n];
                double acc = 0.0;
                for (std::size_t c = 0; c < dv; ++c) {
                    acc += g(i, c) * vv(j, c);
                    if (gv) {
                        (*gv)(j, c) += p[n] * g(i, c);
                    }
                }
                dp[n] = acc;
                weighted += p[n] * acc;
            }
            for (std::size_t n = 0; n < p.size(); ++n) {
                const std::size_t j = idx[i][n];
                const double ds = p[n] * (dp[n] - weighted) * scale;
                for (std::size_t c = 0; c < dk; ++c) {
                    if (gq) {
                        (*gq)(i, c) += ds * kv(j, c);
                    }
                    if (gk) {
                        (*gk)(j, c) += ds * qv(i, c);
                    }
                }
            }
        }
    });
}

}  // namespace ad

}  // namespace evictd
