// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <deque>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "evictd/attention.hpp"
#include "evictd/lte_scorer.hpp"
#include "evictd/rope.hpp"

// Constant-size inference cache for one LTE attention layer.
//
// Every head owns a circular window of w post-RoPE KV slots and an out-of-window segment of at most
// b slots (sink included). Tokens leaving the window are kept only if their retention score is
// above 0.5 (sinks always), replacing the lowest-scored unprotected entry once the segment is full.

namespace evictd {

struct CacheConfig {
    std::size_t heads = 1;
    std::size_t head_dim = 16;
    std::size_t window = 32;    // w
    std::size_t capacity = 16;  // b, sink slots included
    std::size_t sink = 2;       // s
    std::size_t tile = 16;

    void validate() const {
        EVICTD_CHECK(heads >= 1 && head_dim >= 2, ConfigError, "cache: heads and head_dim must be positive");
        EVICTD_CHECK(capacity >= sink,
                     ConfigError,
                     "cache: capacity b=" + std::to_string(capacity) + " is smaller than the sink s=" + std::to_string(sink));
        EVICTD_CHECK(window >= kReceptiveField,
                     ConfigError,
                     "cache: window w=" + std::to_string(window) + " must cover the scorer receptive field R=" +
                         std::to_string(kReceptiveField));
        EVICTD_CHECK(tile >= 1, ConfigError, "cache: tile must be >= 1");
    }
};

/// A KV pair that just left the window.
struct PoppedEntry {
    std::vector<double> k;
    std::vector<double> v;
    std::size_t position = 0;
};

enum class RetainOutcome { appended, replaced, dropped };

/**
 * Two-segment KV store of a single head.
 *
 * Window slot order is physical (write cursor `next`), not logical; out-segment slots are in
 * arrival order. Attention masks by position, so neither order matters to the output.
 */
class HeadCache {
public:
    HeadCache() = default;
    HeadCache(std::size_t window, std::size_t capacity, std::size_t head_dim)
        : m_window(window),
          m_capacity(capacity),
          m_dim(head_dim),
          m_wk(window * head_dim),
          m_wv(window * head_dim),
          m_wpos(window),
          m_ok(capacity * head_dim),
          m_ov(capacity * head_dim),
          m_opos(capacity),
          m_oscore(capacity),
          m_oprotected(capacity) {}

    std::size_t window_size() const {
        return m_window;
    }
    std::size_t capacity() const {
        return m_capacity;
    }
    std::size_t dim() const {
        return m_dim;
    }
    std::size_t window_filled() const {
        return m_filled;
    }
    std::size_t next_slot() const {
        return m_next;
    }
    std::size_t occupancy() const {
        return m_occupancy;
    }
    std::size_t stored() const {
        return m_filled + m_occupancy;
    }

    /// Writes at the cursor; returns the overwritten (oldest) entry once the window is full.
    std::optional<PoppedEntry> push_window(std::span<const double> k, std::span<const double> v, std::size_t position) {
        std::optional<PoppedEntry> popped;
        if (m_filled == m_window) {
            popped = PoppedEntry{std::vector<double>(m_wk.begin() + static_cast<std::ptrdiff_t>(m_next * m_dim),
                                                     m_wk.begin() + static_cast<std::ptrdiff_t>((m_next + 1) * m_dim)),
                                 std::vector<double>(m_wv.begin() + static_cast<std::ptrdiff_t>(m_next * m_dim),
                                                     m_wv.begin() + static_cast<std::ptrdiff_t>((m_next + 1) * m_dim)),
                                 m_wpos[m_next]};
        } else {
            ++m_filled;
        }
        std::copy(k.begin(), k.end(), m_wk.begin() + static_cast<std::ptrdiff_t>(m_next * m_dim));
        std::copy(v.begin(), v.end(), m_wv.begin() + static_cast<std::ptrdiff_t>(m_next * m_dim));
        m_wpos[m_next] = position;
        m_next = (m_next + 1) % m_window;
        return popped;
    }

    /// Rotates the ring so the oldest entry sits in slot 0 and the cursor follows the newest.
    void rotate_to_origin() {
        EVICTD_CHECK(m_filled == m_window, ContractViolation, "cache: rotation requested on a window that is not full");
        const auto shift = static_cast<std::ptrdiff_t>(m_next);
        std::rotate(m_wk.begin(), m_wk.begin() + shift * static_cast<std::ptrdiff_t>(m_dim), m_wk.end());
        std::rotate(m_wv.begin(), m_wv.begin() + shift * static_cast<std::ptrdiff_t>(m_dim), m_wv.end());
        std::rotate(m_wpos.begin(), m_wpos.begin() + shift, m_wpos.end());
        m_next = 0;
    }

    /**
     * Out-of-window admission for a popped entry: sinks are always kept, other entries only with
     * score > 0.5, appended while there is room and otherwise swapped with the lowest-scored
     * unprotected entry iff strictly better.
     */
    RetainOutcome retain(const PoppedEntry& e, double score, bool protect) {
        if (!protect && !(score > 0.5)) {
            return RetainOutcome::dropped;
        }
        if (m_occupancy < m_capacity) {
            write_out(m_occupancy++, e, score, protect);
            return RetainOutcome::appended;
        }
        std::size_t victim = m_capacity;
        double lowest = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < m_occupancy; ++i) {
            if (!m_oprotected[i] && m_oscore[i] < lowest) {
                lowest = m_oscore[i];
                victim = i;
            }
        }
        EVICTD_CHECK(!protect || victim < m_capacity, ContractViolation, "cache: no room left for a sink entry");
        if (victim == m_capacity || !(protect || score > lowest)) {
            return RetainOutcome::dropped;
        }
        write_out(victim, e, score, protect);
        return RetainOutcome::replaced;
    }

    /// Positions of window slots in physical order (only the filled ones).
    std::span<const std::size_t> window_positions() const {
        return std::span<const std::size_t>(m_wpos).first(m_filled);
    }
    std::span<const double> window_keys() const {
        return std::span<const double>(m_wk).first(m_filled * m_dim);
    }
    std::span<const double> window_values() const {
        return std::span<const double>(m_wv).first(m_filled * m_dim);
    }

    std::span<const std::size_t> out_positions() const {
        return std::span<const std::size_t>(m_opos).first(m_occupancy);
    }
    std::span<const double> out_keys() const {
        return std::span<const double>(m_ok).first(m_occupancy * m_dim);
    }
    std::span<const double> out_values() const {
        return std::span<const double>(m_ov).first(m_occupancy * m_dim);
    }
    std::span<const double> out_scores() const {
        return std::span<const double>(m_oscore).first(m_occupancy);
    }
    bool out_protected(std::size_t slot) const {
        return m_oprotected[slot] != 0;
    }

    KvView<double> window_view() const {
        return KvView<double>{window_keys(), window_values(), window_positions(), m_dim};
    }
    KvView<double> out_view() const {
        return KvView<double>{out_keys(), out_values(), out_positions(), m_dim};
    }

    /// Logical window contents, oldest first.
    std::vector<std::size_t> logical_window() const {
        std::vector<std::size_t> pos;
        const std::size_t start = m_filled == m_window ? m_next : 0;
        for (std::size_t i = 0; i < m_filled; ++i) {
            pos.push_back(m_wpos[(start + i) % m_window]);
        }
        return pos;
    }

    /// Reorders the out segment by a permutation of its slots (diagnostics: order must not matter).
    void permute_out(const std::vector<std::size_t>& perm) {
        EVICTD_CHECK(perm.size() == m_occupancy, DimensionError, "cache: permutation size mismatch");
        HeadCache copy = *this;
        for (std::size_t i = 0; i < perm.size(); ++i) {
            const std::size_t src = perm[i];
            std::copy_n(copy.m_ok.begin() + static_cast<std::ptrdiff_t>(src * m_dim), m_dim,
                        m_ok.begin() + static_cast<std::ptrdiff_t>(i * m_dim));
            std::copy_n(copy.m_ov.begin() + static_cast<std::ptrdiff_t>(src * m_dim), m_dim,
                        m_ov.begin() + static_cast<std::ptrdiff_t>(i * m_dim));
            m_opos[i] = copy.m_opos[src];
            m_oscore[i] = copy.m_oscore[src];
            m_oprotected[i] = copy.m_oprotected[src];
        }
    }

private:
    void write_out(std::size_t slot, const PoppedEntry& e, double score, bool protect) {
        std::copy(e.k.begin(), e.k.end(), m_ok.begin() + static_cast<std::ptrdiff_t>(slot * m_dim));
        std::copy(e.v.begin(), e.v.end(), m_ov.begin() + static_cast<std::ptrdiff_t>(slot * m_dim));
        m_opos[slot] = e.position;
        m_oscore[slot] = score;
        m_oprotected[slot] = protect ? 1 : 0;
    }

    std::size_t m_window = 0;
    std::size_t m_capacity = 0;
    std::size_t m_dim = 0;
    std::vector<double> m_wk, m_wv;
    std::vector<std::size_t> m_wpos;
    std::size_t m_next = 0;
    std::size_t m_filled = 0;
    std::vector<double> m_ok, m_ov;
    std::vector<std::size_t> m_opos;
    std::vector<double> m_oscore;
    std::vector<std::uint8_t> m_oprotected;
    std::size_t m_occupancy = 0;
};

/// Single-head decode-time admission of a popped entry (sinks are protected).
inline RetainOutcome decode_push(HeadCache& cache, const PoppedEntry& popped, double score, std::size_t sink) {
    return cache.retain(popped, score, popped.position < sink);
}

/**
 * Fills one head's cache from a prompt of T tokens.
 *
 * k_post/v are [T x d] rows of this head; scores[j] must be defined for every j < T - w. The
 * window receives the last min(T, w) tokens; the out segment receives the sinks already out of
 * the window plus every out-of-window token with r > 0.5, truncated to the top-b by score (sinks
 * pinned, ties keep the lower position) and stored in position order.
 */
inline HeadCache prefill_head(std::span<const double> k_post,
                              std::span<const double> v,
                              std::size_t T,
                              std::span<const double> scores,
                              const CacheConfig& cfg) {
    EVICTD_CHECK(cfg.capacity >= cfg.sink, ConfigError, "cache: capacity b is smaller than the sink s");
    const std::size_t d = cfg.head_dim;
    HeadCache cache(cfg.window, cfg.capacity, d);
    const std::size_t boundary = T > cfg.window ? T - cfg.window : 0;  // positions < boundary are out of window
    EVICTD_CHECK(scores.size() >= boundary, ContractViolation, "prefill: missing scores for out-of-window tokens");

    std::vector<std::size_t> sinks, candidates;
    for (std::size_t j = 0; j < boundary; ++j) {
        if (j < cfg.sink) {
            sinks.push_back(j);
        } else if (scores[j] > 0.5) {
            candidates.push_back(j);
        }
    }
    const std::size_t room = cfg.capacity - sinks.size();
    if (candidates.size() > room) {
        std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
            return scores[a] > scores[b];
        });
        candidates.resize(room);
    }
    std::vector<std::size_t> kept = sinks;
    kept.insert(kept.end(), candidates.begin(), candidates.end());
    std::sort(kept.begin(), kept.end());
    for (std::size_t j : kept) {
        PoppedEntry e{{k_post.begin() + static_cast<std::ptrdiff_t>(j * d), k_post.begin() + static_cast<std::ptrdiff_t>((j + 1) * d)},
                      {v.begin() + static_cast<std::ptrdiff_t>(j * d), v.begin() + static_cast<std::ptrdiff_t>((j + 1) * d)},
                      j};
        cache.retain(e, scores[j], j < cfg.sink);
    }
    for (std::size_t j = boundary; j < T; ++j) {
        cache.push_window(k_post.subspan(j * d, d), v.subspan(j * d, d), j);
    }
    return cache;
}

struct HeadReport {
    std::size_t occupancy = 0;
    std::size_t capacity = 0;
    std::size_t protected_entries = 0;
    double occupancy_ratio = 0.0;
    double min_score = 0.0;
    double max_score = 0.0;
    double mean_score = 0.0;
};

/// Occupancy statistics of one head; score statistics cover unprotected entries only.
inline HeadReport cache_report(const HeadCache& cache) {
    HeadReport rep;
    rep.occupancy = cache.occupancy();
    rep.capacity = cache.capacity();
    rep.occupancy_ratio = cache.capacity() ? static_cast<double>(cache.occupancy()) / static_cast<double>(cache.capacity()) : 0.0;
    std::size_t n = 0;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, total = 0.0;
    for (std::size_t i = 0; i < cache.occupancy(); ++i) {
        if (cache.out_protected(i)) {
            ++rep.protected_entries;
            continue;
        }
        const double s = cache.out_scores()[i];
        lo = std::min(lo, s);
        hi = std::max(hi, s);
        total += s;
        ++n;
    }
    if (n) {
        rep.min_score = lo;
        rep.max_score = hi;
        rep.mean_score = total / static_cast<double>(n);
    }
    return rep;
}

enum class ScoringPolicy { lazy, eager };

/// Deferred-scoring bookkeeping shared by all heads of a layer.
struct LazyState {
    /// Oldest position without a score (all earlier positions are scored).
    std::size_t next_unscored = 0;
    /// Position of pending.front(): scored tokens that are still inside the window.
    std::size_t pending_first = 0;
    std::deque<std::vector<double>> pending;  // per position, one score per head
    /// Absolute position of window slot 0 used by the most recent pre-RoPE recovery.
    std::size_t recovery_offset = 0;
    std::size_t invocations = 0;
};

/**
 * Prefill/decode driver for one attention layer: per-head caches, the lazy scoring scheduler and
 * two-stage attention over the cache segments.
 *
 * Token positions start at 0. Decoding token n attends to the out segments, the window (n-w..n-1)
 * and itself; afterwards n is pushed and n-w leaves the window, which must already be scored.
 */
class LteLayerCache {
public:
    LteLayerCache(CacheConfig cfg, const LteScorerParams& scorer, const SinusoidTable& table,
                  ScoringPolicy policy = ScoringPolicy::lazy, bool record_history = false)
        : m_cfg(cfg), m_scorer(&scorer), m_table(&table), m_policy(policy), m_record(record_history) {
        m_cfg.validate();
        EVICTD_CHECK(scorer.heads == cfg.heads && scorer.head_dim == cfg.head_dim,
                     ParameterError,
                     "cache: scorer geometry does not match the cache");
        EVICTD_CHECK(table.head_dim() == cfg.head_dim, ParameterError, "cache: rope table head_dim mismatch");
        m_heads.assign(cfg.heads, HeadCache(cfg.window, cfg.capacity, cfg.head_dim));
    }

    const CacheConfig& config() const {
        return m_cfg;
    }
    std::size_t length() const {
        return m_length;
    }
    const HeadCache& head(std::size_t h) const {
        return m_heads[h];
    }
    HeadCache& head_mut(std::size_t h) {
        return m_heads[h];
    }
    const LazyState& lazy_state() const {
        return m_lazy;
    }
    std::size_t scorer_invocations() const {
        return m_lazy.invocations;
    }
    /// Every score computed so far, by position (only with record_history).
    const std::vector<std::vector<double>>& score_history() const {
        return m_history;
    }
    double attention_scale() const {
        return default_scale(m_cfg.head_dim);
    }

    /**
     * Prefill with q (post-RoPE), k_pre (pre-RoPE) and v, all [T x heads*d]. Scores every token
     * whose right context is present, fills the caches and returns the attention output.
     */
    Tensor prefill(const Tensor& q, const Tensor& k_pre, const Tensor& v) {
        EVICTD_CHECK(m_length == 0, ContractViolation, "cache: prefill on a non-empty cache");
        const std::size_t T = k_pre.dim(0), H = m_cfg.heads, d = m_cfg.head_dim;
        EVICTD_CHECK(q.shape() == k_pre.shape() && v.shape() == k_pre.shape() && k_pre.dim(1) == H * d,
                     DimensionError,
                     "cache: prefill inputs must all be [T x heads*head_dim]");
        if (T == 0) {
            return Tensor({0, H * d});
        }
        std::vector<std::size_t> pos(T);
        std::iota(pos.begin(), pos.end(), std::size_t{0});
        const Tensor k_post = apply_rope(k_pre, pos, *m_table);

        Tensor scores({T, H});
        std::size_t scored = 0;
        if (T > kHalfReceptive) {
            // Same round trip as the decode path so a token's score never depends on how it arrived.
            const Tensor k_rt = invert_rope(k_post, pos, 0, *m_table);
            ScoredRange sr = score_range(k_rt, v, *m_scorer, ScoreOptions{Mode::eval, 0, 0, false});
            ++m_lazy.invocations;
            scored = sr.count();
            for (std::size_t j = 0; j < scored; ++j) {
                for (std::size_t h = 0; h < H; ++h) {
                    scores(j, h) = sr.r(j, h);
                }
                record(j, sr.r.row(j));
            }
        }
        const std::size_t boundary = T > m_cfg.window ? T - m_cfg.window : 0;
        for (std::size_t h = 0; h < H; ++h) {
            const Tensor kh = head_slice(k_post, h), vh = head_slice(v, h);
            std::vector<double> rh(T);
            for (std::size_t j = 0; j < T; ++j) {
                rh[j] = scores(j, h);
            }
            m_heads[h] = prefill_head(kh.data(), vh.data(), T, rh, m_cfg);
        }
        m_lazy.next_unscored = scored;
        m_lazy.pending_first = boundary;
        for (std::size_t j = boundary; j < scored; ++j) {
            m_lazy.pending.emplace_back(scores.row(j).begin(), scores.row(j).end());
        }
        m_length = T;

        Tensor out({T, H * d});
        for (std::size_t h = 0; h < H; ++h) {
            const Tensor qh = head_slice(q, h), kh = head_slice(k_post, h), vh = head_slice(v, h);
            const HeadCache& c = m_heads[h];
            std::vector<std::size_t> cpos(c.out_positions().begin(), c.out_positions().end());
            Tensor ck({cpos.size(), d}, std::vector<double>(c.out_keys().begin(), c.out_keys().end()));
            Tensor cv({cpos.size(), d}, std::vector<double>(c.out_values().begin(), c.out_values().end()));
            const Tensor oh = two_stage_sparse_attention(qh, kh, vh, ck, cv, cpos,
                                                         TwoStageOptions{m_cfg.window, m_cfg.tile, attention_scale()});
            write_head_slice(out, h, oh);
        }
        return out;
    }

    /// Decodes token at position length() given its post-RoPE query and pre-RoPE key / value rows.
    Tensor decode(std::span<const double> q_row, std::span<const double> k_pre_row, std::span<const double> v_row) {
        const std::size_t H = m_cfg.heads, d = m_cfg.head_dim, n = m_length;
        EVICTD_CHECK(q_row.size() == H * d && k_pre_row.size() == H * d && v_row.size() == H * d,
                     DimensionError,
                     "cache: decode rows must have heads*head_dim entries");
        Tensor k_pre({1, H * d}, std::vector<double>(k_pre_row.begin(), k_pre_row.end()));
        const Tensor k_post = apply_rope(k_pre, {n}, *m_table);
        const Tensor v({1, H * d}, std::vector<double>(v_row.begin(), v_row.end()));

        lazy_schedule_tick(k_post, v);

        Tensor out({1, H * d});
        const std::vector<std::size_t> self_pos{n};
        for (std::size_t h = 0; h < H; ++h) {
            const Tensor qh({1, d}, std::vector<double>(q_row.begin() + static_cast<std::ptrdiff_t>(h * d),
                                                        q_row.begin() + static_cast<std::ptrdiff_t>((h + 1) * d)));
            const std::span<const double> kself = k_post.data().subspan(h * d, d);
            const std::span<const double> vself = v.data().subspan(h * d, d);
            const std::array<KvView<double>, 2> windows{m_heads[h].window_view(), KvView<double>{kself, vself, self_pos, d}};
            const Tensor oh = two_stage_sparse_attention<double>(
                qh, self_pos, windows, m_heads[h].out_view(), TwoStageOptions{m_cfg.window, m_cfg.tile, attention_scale()});
            std::copy(oh.data().begin(), oh.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(h * d));
        }

        for (std::size_t h = 0; h < H; ++h) {
            auto popped = m_heads[h].push_window(k_post.data().subspan(h * d, d), v.data().subspan(h * d, d), n);
            if (!popped) {
                continue;
            }
            EVICTD_CHECK(!m_lazy.pending.empty() && m_lazy.pending_first == popped->position,
                         ContractViolation,
                         "cache: token " + std::to_string(popped->position) + " left the window without a score");
            decode_push(m_heads[h], *popped, m_lazy.pending.front()[h], m_cfg.sink);
        }
        if (n >= m_cfg.window) {
            m_lazy.pending.pop_front();
            ++m_lazy.pending_first;
        }
        ++m_length;
        return out;
    }

    /// Cache contents as JSON: per head, entries {position, score, segment, protected}.
    nlohmann::json dump() const {
        nlohmann::json heads = nlohmann::json::array();
        for (std::size_t h = 0; h < m_cfg.heads; ++h) {
            const HeadCache& c = m_heads[h];
            nlohmann::json entries = nlohmann::json::array();
            for (std::size_t i = 0; i < c.occupancy(); ++i) {
                entries.push_back({{"position", c.out_positions()[i]},
                                   {"score", c.out_scores()[i]},
                                   {"segment", "out"},
                                   {"protected", c.out_protected(i)}});
            }
            for (std::size_t p : c.logical_window()) {
                nlohmann::json score = nullptr;
                if (p >= m_lazy.pending_first && p - m_lazy.pending_first < m_lazy.pending.size()) {
                    score = m_lazy.pending[p - m_lazy.pending_first][h];
                }
                entries.push_back({{"position", p}, {"score", score}, {"segment", "window"}, {"protected", p < m_cfg.sink}});
            }
            heads.push_back({{"head", h}, {"entries", entries}});
        }
        return {{"length", m_length}, {"heads", heads}};
    }

private:
    /**
     * Runs before token n (= m_length) is pushed. Lazy policy: once the receptive field of the
     * oldest unscored token would lose its leftmost token (n - w) on this push, rotate the windows,
     * recover pre-RoPE keys for window slots 0..w-1 at offset n - w and score every token up to
     * n - R//2 in one batch. Eager policy: score token n - R//2 every step.
     */
    void lazy_schedule_tick(const Tensor& k_post_self, const Tensor& v_self) {
        const std::size_t n = m_length, w = m_cfg.window;
        if (m_policy == ScoringPolicy::lazy) {
            if (n < w) {
                return;
            }
            const std::size_t j0 = m_lazy.next_unscored;
            const std::size_t left = j0 >= kHalfReceptive ? j0 - kHalfReceptive : 0;
            if (left > n - w) {
                return;
            }
            EVICTD_CHECK(left == n - w, ContractViolation, "cache: lazy scorer missed its trigger");
            score_window(k_post_self, v_self, n - w, n);
        } else {
            if (n < kHalfReceptive) {
                return;
            }
            const std::size_t target = n - kHalfReceptive;
            if (target < m_lazy.next_unscored) {
                return;
            }
            const std::size_t from = target >= kHalfReceptive ? target - kHalfReceptive : 0;
            score_window(k_post_self, v_self, from, n);
        }
    }

    // Scores with inputs at positions [from, n]: window slots holding [from, n-1] plus token n.
    void score_window(const Tensor& k_post_self, const Tensor& v_self, std::size_t from, std::size_t n) {
        const std::size_t H = m_cfg.heads, d = m_cfg.head_dim, rows = n - from + 1;
        Tensor k_in({rows, H * d}), v_in({rows, H * d});
        for (std::size_t h = 0; h < H; ++h) {
            HeadCache& c = m_heads[h];
            if (c.window_filled() == c.window_size() && c.next_slot() != 0) {
                c.rotate_to_origin();
            }
            const auto wpos = c.window_positions();
            const std::size_t slot0 = c.window_filled() ? wpos[0] : n;
            for (std::size_t r = 0; r + 1 < rows; ++r) {
                const std::size_t slot = from + r - slot0;
                EVICTD_CHECK(slot < c.window_filled() && wpos[slot] == from + r,
                             ContractViolation,
                             "cache: scorer input is no longer inside the window");
                std::copy_n(c.window_keys().begin() + static_cast<std::ptrdiff_t>(slot * d), d,
                            k_in.data().begin() + static_cast<std::ptrdiff_t>(r * H * d + h * d));
                std::copy_n(c.window_values().begin() + static_cast<std::ptrdiff_t>(slot * d), d,
                            v_in.data().begin() + static_cast<std::ptrdiff_t>(r * H * d + h * d));
            }
            std::copy_n(k_post_self.data().begin() + static_cast<std::ptrdiff_t>(h * d), d,
                        k_in.data().begin() + static_cast<std::ptrdiff_t>((rows - 1) * H * d + h * d));
            std::copy_n(v_self.data().begin() + static_cast<std::ptrdiff_t>(h * d), d,
                        v_in.data().begin() + static_cast<std::ptrdiff_t>((rows - 1) * H * d + h * d));
        }
        // Window rows are rotated by their absolute position: slot index + offset.
        std::vector<std::size_t> slots(rows);
        std::iota(slots.begin(), slots.end(), std::size_t{0});
        m_lazy.recovery_offset = from;
        const Tensor k_pre = invert_rope(k_in, slots, from, *m_table);

        const ScoredRange sr = score_range(k_pre, v_in, *m_scorer, ScoreOptions{Mode::eval, 0, from, false});
        ++m_lazy.invocations;
        for (std::size_t i = 0; i < sr.count(); ++i) {
            const std::size_t p = sr.first + i;
            if (p < m_lazy.next_unscored) {
                continue;
            }
            EVICTD_CHECK(p == m_lazy.next_unscored, ContractViolation, "cache: scores produced out of order");
            if (m_lazy.pending.empty()) {
                m_lazy.pending_first = p;
            }
            m_lazy.pending.emplace_back(sr.r.row(i).begin(), sr.r.row(i).end());
            record(p, sr.r.row(i));
            ++m_lazy.next_unscored;
        }
    }

    void record(std::size_t position, std::span<const double> row) {
        if (!m_record) {
            return;
        }
        if (m_history.size() <= position) {
            m_history.resize(position + 1);
        }
        m_history[position].assign(row.begin(), row.end());
    }

    Tensor head_slice(const Tensor& x, std::size_t h) const {
        const std::size_t d = m_cfg.head_dim, T = x.dim(0);
        Tensor out({T, d});
        for (std::size_t t = 0; t < T; ++t) {
            std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(t * x.dim(1) + h * d), d,
                        out.data().begin() + static_cast<std::ptrdiff_t>(t * d));
        }
        return out;
    }

    void write_head_slice(Tensor& x, std::size_t h, const Tensor& part) const {
        const std::size_t d = m_cfg.head_dim;
        for (std::size_t t = 0; t < part.dim(0); ++t) {
            std::copy_n(part.data().begin() + static_cast<std::ptrdiff_t>(t * d), d,
                        x.data().begin() + static_cast<std::ptrdiff_t>(t * x.dim(1) + h * d));
        }
    }

    CacheConfig m_cfg;
    const LteScorerParams* m_scorer;
    const SinusoidTable* m_table;
    ScoringPolicy m_policy;
    bool m_record;
    std::vector<HeadCache> m_heads;
    LazyState m_lazy;
    std::size_t m_length = 0;
    std::vector<std::vector<double>> m_history;
};

}  // namespace evictd
