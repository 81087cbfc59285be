// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "evictd/autodiff.hpp"
#include "evictd/tensor.hpp"

// Matrix-state recurrences: plain linear attention and the gated delta rule.
// State S of a head is [d_v x d_k]; the read-out is o_t = S_t q_t.

namespace evictd {

struct GdnState {
    std::size_t dk = 0;
    std::size_t dv = 0;
    std::vector<double> S;  // row-major [dv x dk]

    GdnState() = default;
    GdnState(std::size_t key_dim, std::size_t value_dim) : dk(key_dim), dv(value_dim), S(key_dim * value_dim, 0.0) {}

    double& at(std::size_t r, std::size_t c) {
        return S[r * dk + c];
    }
    double at(std::size_t r, std::size_t c) const {
        return S[r * dk + c];
    }
    bool all_finite() const {
        for (double x : S) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
        return true;
    }
};

namespace detail {

inline void check_step(const GdnState& st, std::span<const double> q, std::span<const double> k, std::span<const double> v) {
    EVICTD_CHECK(q.size() == st.dk && k.size() == st.dk && v.size() == st.dv,
                 DimensionError,
                 "recurrence: q/k must have d_k entries and v d_v entries");
}

inline std::vector<double> read_out(const GdnState& st, std::span<const double> q) {
    std::vector<double> o(st.dv, 0.0);
    for (std::size_t r = 0; r < st.dv; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < st.dk; ++c) {
            acc += st.at(r, c) * q[c];
        }
        o[r] = acc;
    }
    return o;
}

}  // namespace detail

/// S <- S + v k^T, o = S q.
inline std::vector<double> linear_attn_step(GdnState& st,
                                            std::span<const double> q,
                                            std::span<const double> k,
                                            std::span<const double> v) {
    detail::check_step(st, q, k, v);
    for (std::size_t r = 0; r < st.dv; ++r) {
        for (std::size_t c = 0; c < st.dk; ++c) {
            st.at(r, c) += v[r] * k[c];
        }
    }
    return detail::read_out(st, q);
}

/**
 * Gated delta rule: S <- alpha * S (I - beta k k^T) + beta v k^T, then o = S q.
 * Expanded as alpha * (S - beta (S k) k^T) + beta v k^T.
 */
inline std::vector<double> gdn_step(GdnState& st,
                                    std::span<const double> q,
                                    std::span<const double> k,
                                    std::span<const double> v,
                                    double alpha,
                                    double beta) {
    detail::check_step(st, q, k, v);
    EVICTD_CHECK(alpha >= 0.0 && alpha <= 1.0 && beta >= 0.0 && beta <= 1.0,
                 ParameterError,
                 "gdn_step: gates must satisfy alpha in (0,1], beta in [0,1]");
    std::vector<double> sk(st.dv, 0.0);
    for (std::size_t r = 0; r < st.dv; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < st.dk; ++c) {
            acc += st.at(r, c) * k[c];
        }
        sk[r] = acc;
    }
    for (std::size_t r = 0; r < st.dv; ++r) {
        for (std::size_t c = 0; c < st.dk; ++c) {
            st.at(r, c) = alpha * (st.at(r, c) - beta * sk[r] * k[c]) + beta * v[r] * k[c];
        }
    }
    return detail::read_out(st, q);
}

/// Gate-free shape description of a multi-head recurrence over [T x heads*dim] inputs.
struct GdnShape {
    std::size_t heads = 1;
    std::size_t dk = 16;
    std::size_t dv = 16;
};

/**
 * Runs gdn_step over a whole sequence for every head.
 * q, k [T x heads*dk]; v [T x heads*dv]; alpha, beta [T x heads]. States are updated in place.
 */
inline Tensor gdn_layer_forward(const Tensor& q,
                                const Tensor& k,
                                const Tensor& v,
                                const Tensor& alpha,
                                const Tensor& beta,
                                const GdnShape& shape,
                                std::vector<GdnState>& states) {
    const std::size_t T = q.dim(0), H = shape.heads;
    EVICTD_CHECK(q.shape() == k.shape() && q.dim(1) == H * shape.dk && v.dim(0) == T && v.dim(1) == H * shape.dv &&
                     alpha.dim(0) == T && alpha.dim(1) == H && beta.shape() == alpha.shape(),
                 DimensionError,
                 "gdn_layer_forward: inconsistent shapes");
    if (states.size() != H) {
        states.assign(H, GdnState(shape.dk, shape.dv));
    }
    Tensor out({T, H * shape.dv});
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t h = 0; h < H; ++h) {
            const auto o = gdn_step(states[h],
                                    q.row(t).subspan(h * shape.dk, shape.dk),
                                    k.row(t).subspan(h * shape.dk, shape.dk),
                                    v.row(t).subspan(h * shape.dv, shape.dv),
                                    alpha(t, h),
                                    beta(t, h));
            std::copy(o.begin(), o.end(), out.row(t).begin() + static_cast<std::ptrdiff_t>(h * shape.dv));
        }
    }
    return out;
}

inline Tensor gdn_layer_forward(const Tensor& q,
                                const Tensor& k,
                                const Tensor& v,
                                const Tensor& alpha,
                                const Tensor& beta,
                                const GdnShape& shape) {
    std::vector<GdnState> states;
    return gdn_layer_forward(q, k, v, alpha, beta, shape, states);
}

namespace ad {

/**
 * Differentiable gated delta rule from a zero state. Intermediate states are kept for the
 * backward sweep, which walks time in reverse carrying dS.
 */
inline Var gdn(Var q, Var k, Var v, Var alpha, Var beta, const GdnShape& shape) {
    const std::size_t T = q.value().dim(0), H = shape.heads, dk = shape.dk, dv = shape.dv;
    std::vector<GdnState> states(H, GdnState(dk, dv));
    // history[t * H + h] = state after step t
    auto history = std::make_shared<std::vector<GdnState>>();
    history->reserve(T * H);
    Tensor out({T, H * dv});
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    const Tensor& av = alpha.value();
    const Tensor& bv = beta.value();
    EVICTD_CHECK(kv.shape() == qv.shape() && qv.dim(1) == H * dk && vv.dim(0) == T && vv.dim(1) == H * dv &&
                     av.dim(0) == T && av.dim(1) == H && bv.shape() == av.shape(),
                 DimensionError,
                 "gdn: inconsistent shapes");
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t h = 0; h < H; ++h) {
            const auto o = gdn_step(states[h], qv.row(t).subspan(h * dk, dk), kv.row(t).subspan(h * dk, dk),
                                    vv.row(t).subspan(h * dv, dv), av(t, h), bv(t, h));
            std::copy(o.begin(), o.end(), out.row(t).begin() + static_cast<std::ptrdiff_t>(h * dv));
            history->push_back(states[h]);
        }
    }
    return q.tape->record(std::move(out), {q, k, v, alpha, beta}, [=](Tape& tp, const Tensor& g) {
        const Tensor& qv = tp.value(q);
        const Tensor& kv = tp.value(k);
        const Tensor& vv = tp.value(v);
        const Tensor& av = tp.value(alpha);
        const Tensor& bv = tp.value(beta);
        Tensor dq(qv.shape()), dkt(kv.shape()), dvt(vv.shape()), da(av.shape()), db(bv.shape());
        const GdnState zero(dk, dv);
        for (std::size_t h = 0; h < H; ++h) {
            std::vector<double> dS(dk * dv, 0.0), sk(dv), dSk(dv), dStv(dk), Stdsk(dk), dSt_sk(dk);
            for (std::size_t t = T; t-- > 0;) {
                const GdnState& cur = (*history)[t * H + h];
                const GdnState& prev = t ? (*history)[(t - 1) * H + h] : zero;
                const auto qt = qv.row(t).subspan(h * dk, dk);
                const auto kt = kv.row(t).subspan(h * dk, dk);
                const auto vt = vv.row(t).subspan(h * dv, dv);
                const auto gt = g.row(t).subspan(h * dv, dv);
                const double a = av(t, h), b = bv(t, h);
                // o = S_t q
                for (std::size_t c = 0; c < dk; ++c) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < dv; ++r) {
                        acc += cur.at(r, c) * gt[r];
                    }
                    dq(t, h * dk + c) += acc;
                }
                for (std::size_t r = 0; r < dv; ++r) {
                    for (std::size_t c = 0; c < dk; ++c) {
                        dS[r * dk + c] += gt[r] * qt[c];
                    }
                }
                for (std::size_t r = 0; r < dv; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t c = 0; c < dk; ++c) {
                        s1 += prev.at(r, c) * kt[c];
                        s2 += dS[r * dk + c] * kt[c];
                    }
                    sk[r] = s1;
                    dSk[r] = s2;
                }
                double dot_s = 0.0, sk_dsk = 0.0, v_dsk = 0.0;
                for (std::size_t i = 0; i < dk * dv; ++i) {
                    dot_s += dS[i] * prev.S[i];
                }
                for (std::size_t r = 0; r < dv; ++r) {
                    sk_dsk += sk[r] * dSk[r];
                    v_dsk += (vt[r] - a * sk[r]) * dSk[r];
                }
                da(t, h) = dot_s - b * sk_dsk;
                db(t, h) = v_dsk;
                for (std::size_t r = 0; r < dv; ++r) {
                    dvt(t, h * dv + r) = b * dSk[r];
                }
                for (std::size_t c = 0; c < dk; ++c) {
                    double x1 = 0.0, x2 = 0.0, x3 = 0.0;
                    for (std::size_t r = 0; r < dv; ++r) {
                        x1 += dS[r * dk + c] * vt[r];
                        x2 += prev.at(r, c) * dSk[r];
                        x3 += dS[r * dk + c] * sk[r];
                    }
                    dkt(t, h * dk + c) = b * x1 - a * b * (x2 + x3);
                }
                // dS_{t-1} = alpha (dS - beta (dS k) k^T)
                for (std::size_t r = 0; r < dv; ++r) {
                    for (std::size_t c = 0; c < dk; ++c) {
                        dS[r * dk + c] = a * (dS[r * dk + c] - b * dSk[r] * kt[c]);
                    }
                }
            }
        }
        tp.accumulate(q, dq);
        tp.accumulate(k, dkt);
        tp.accumulate(v, dvt);
        tp.accumulate(alpha, da);
        tp.accumulate(beta, db);
    });
}

}  // namespace ad

}  // namespace evictd
