// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "evictd/checkpoint.hpp"
#include "evictd/gdn.hpp"
#include "evictd/nsa.hpp"
#include "evictd/trainer.hpp"

// Property suites, benchmarks, retention reports and the run/train drivers behind the CLI.

namespace evictd {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitIo = 3 };

/// Worker count: EVICTD_THREADS when set to a positive integer, else the hardware concurrency.
inline std::size_t thread_budget() {
    if (const char* env = std::getenv("EVICTD_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end != env && n > 0) {
            return static_cast<std::size_t>(n);
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(0..n-1) on up to thread_budget() threads. Exceptions are rethrown on the caller.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(n, thread_budget());
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

// ---------------------------------------------------------------------------------------------
// Property checks

struct PropertyResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

inline void to_json(nlohmann::json& j, const PropertyResult& r) {
    j = nlohmann::json{{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}};
}

namespace checks {

namespace detail {

inline std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

inline PropertyResult guarded(const std::string& name, const std::function<PropertyResult()>& body) {
    try {
        return body();
    } catch (const std::exception& e) {
        return {name, false, std::string("exception: ") + e.what()};
    }
}

// max |a-b| / max(max |b|, floor)
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
    double num = 0.0, den = floor;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(a[i] - b[i]));
        den = std::max(den, std::abs(b[i]));
    }
    return num / den;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Tensor head_slice(const Tensor& x, std::size_t h, std::size_t d) {
    Tensor out({x.dim(0), d});
    for (std::size_t t = 0; t < x.dim(0); ++t) {
        std::copy_n(x.row(t).begin() + static_cast<std::ptrdiff_t>(h * d), d, out.row(t).begin());
    }
    return out;
}

}  // namespace detail

/**
 * Two-stage tiled attention against the explicit masked softmax over the admission index sets,
 * on random (T, d, w, s, tile, r) draws. Also checks that every skipped tile holds no admitted pair.
 */
inline PropertyResult two_stage_exactness(std::uint64_t seed, std::size_t configs = 200, double tol = 1e-10) {
    const std::string name = "two_stage_matches_masked_oracle";
    return detail::guarded(name, [&] {
        Rng rng(derive_seed(seed, name));
        double worst = 0.0;
        std::size_t skipped = 0;
        for (std::size_t n = 0; n < configs; ++n) {
            const std::size_t T = detail::pick(rng, 1, 128), d = 2 * detail::pick(rng, 1, 8);
            const std::size_t w = detail::pick(rng, 1, 40), s = detail::pick(rng, 0, 6), tile = detail::pick(rng, 1, 32);
            const double keep = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            const Tensor q = normal_tensor({T, d}, rng), k = normal_tensor({T, d}, rng), v = normal_tensor({T, d}, rng);
            std::vector<double> r(T);
            std::vector<std::size_t> cpos;
            for (std::size_t j = 0; j < T; ++j) {
                r[j] = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < keep ? 0.75 : 0.25;
                if (j < s || r[j] > 0.5) {
                    cpos.push_back(j);
                }
            }
            std::shuffle(cpos.begin(), cpos.end(), rng);  // physical order is irrelevant
            Tensor ck({cpos.size(), d}), cv({cpos.size(), d});
            for (std::size_t m = 0; m < cpos.size(); ++m) {
                std::copy(k.row(cpos[m]).begin(), k.row(cpos[m]).end(), ck.row(m).begin());
                std::copy(v.row(cpos[m]).begin(), v.row(cpos[m]).end(), cv.row(m).begin());
            }
            const double scale = default_scale(d);
            TilePlan plan;
            const Tensor got = two_stage_sparse_attention(q, k, v, ck, cv, cpos, TwoStageOptions{w, tile, scale}, &plan);
            const Tensor want = masked_attention_oracle(q, k, v, build_index_set(T, r, s, w), scale);
            worst = std::max(worst, max_abs_diff(got, want));
            for (const TileRecord& rec : plan.records) {
                if (rec.decision != TileDecision::skipped) {
                    continue;
                }
                ++skipped;
                for (std::size_t i = rec.query_tile * tile; i < std::min(T, (rec.query_tile + 1) * tile); ++i) {
                    for (std::size_t m = rec.begin; m < rec.end; ++m) {
                        const std::size_t j = rec.stage == TileStage::swa ? m : cpos[m];
                        const bool admitted_here = rec.stage == TileStage::swa ? in_window(i, j, w) : j + w < i;
                        if (admitted_here) {
                            return PropertyResult{name, false, "skipped tile holds admitted pair (" + std::to_string(i) + ", " +
                                                                   std::to_string(j) + ")"};
                        }
                    }
                }
            }
        }
        return PropertyResult{name, worst <= tol,
                              std::to_string(configs) + " configs, max |diff| " + detail::fmt(worst) + ", " +
                                  std::to_string(skipped) + " skipped tiles audited"};
    });
}

/// One random LTE layer cache workload.
struct CacheWorkload {
    CacheConfig cfg;
    LteScorerParams scorer;
    std::size_t prompt = 0;
    Tensor q, k, v;  // [n x heads*d]; q already rotated, k pre-rotation
};

inline CacheWorkload random_cache_workload(Rng& rng, std::size_t length_factor, bool cap_binding) {
    CacheWorkload wl;
    const std::size_t H = detail::pick(rng, 1, 3), d = 4 * detail::pick(rng, 1, 3);
    const std::size_t w = detail::pick(rng, kReceptiveField, 40), s = detail::pick(rng, 0, 4);
    const std::size_t b = cap_binding ? detail::pick(rng, std::max<std::size_t>(s, 1), 24) : 0;
    const std::size_t n = length_factor * (w + std::max<std::size_t>(b, 1));
    wl.cfg = CacheConfig{H, d, w, cap_binding ? b : n, s, detail::pick(rng, 1, 16)};
    wl.scorer = LteScorerParams::init(H, d, rng());
    // Shift the final bias so some streams keep most tokens and some keep few.
    const double shift = std::uniform_real_distribution<double>(-1.0, 2.0)(rng);
    for (std::size_t h = 0; h < H; ++h) {
        wl.scorer.head.bias[h] = shift;
    }
    wl.prompt = detail::pick(rng, 1, std::min<std::size_t>(n, 3 * w));
    wl.q = normal_tensor({n, H * d}, rng);
    wl.k = normal_tensor({n, H * d}, rng);
    wl.v = normal_tensor({n, H * d}, rng);
    return wl;
}

inline Tensor rows(const Tensor& x, std::size_t begin, std::size_t count) {
    Tensor out({count, x.dim(1)});
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(begin * x.dim(1)), count * x.dim(1), out.data().begin());
    return out;
}

/// Instrumented decode over streams of length 10*(w+b): occupancy never exceeds w + b per head.
inline PropertyResult occupancy_bound(std::uint64_t seed, std::size_t streams = 12) {
    const std::string name = "cache_occupancy_within_w_plus_b";
    return detail::guarded(name, [&] {
        Rng rng(derive_seed(seed, name));
        std::size_t steps = 0, peak_out = 0, max_b = 0;
        for (std::size_t n = 0; n < streams; ++n) {
            const CacheWorkload wl = random_cache_workload(rng, 10, true);
            const SinusoidTable table(wl.cfg.head_dim);
            LteLayerCache cache(wl.cfg, wl.scorer, table);
            const std::size_t total = wl.q.dim(0);
            cache.prefill(rows(wl.q, 0, wl.prompt), rows(wl.k, 0, wl.prompt), rows(wl.v, 0, wl.prompt));
            auto audit = [&](std::size_t at) -> std::string {
                for (std::size_t h = 0; h < wl.cfg.heads; ++h) {
                    const HeadCache& c = cache.head(h);
                    peak_out = std::max(peak_out, c.occupancy());
                    if (c.window_filled() + c.occupancy() > wl.cfg.window + wl.cfg.capacity || c.occupancy() > wl.cfg.capacity) {
                        return "stream " + std::to_string(n) + " head " + std::to_string(h) + " holds " +
                               std::to_string(c.window_filled() + c.occupancy()) + " > w + b at length " + std::to_string(at);
                    }
                }
                return {};
            };
            if (auto bad = audit(wl.prompt); !bad.empty()) {
                return PropertyResult{name, false, bad};
            }
            for (std::size_t t = wl.prompt; t < total; ++t) {
                cache.decode(wl.q.row(t), wl.k.row(t), wl.v.row(t));
                ++steps;
                if (auto bad = audit(t + 1); !bad.empty()) {
                    return PropertyResult{name, false, bad};
                }
            }
            max_b = std::max(max_b, wl.cfg.capacity);
        }
        return PropertyResult{name, true,
                              std::to_string(streams) + " streams, " + std::to_string(steps) + " decode steps, peak out-segment " +
                                  std::to_string(peak_out) + " (largest b " + std::to_string(max_b) + ")"};
    });
}

/// Lazy deferred scoring against per-step scoring: invocation bound and bit-identical scores.
inline PropertyResult lazy_cadence(std::uint64_t seed, std::size_t streams = 8) {
    const std::string name = "lazy_scoring_cadence_and_bit_match";
    return detail::guarded(name, [&] {
        Rng rng(derive_seed(seed, name));
        std::size_t worst_calls = 0, worst_bound = 0;
        for (std::size_t n = 0; n < streams; ++n) {
            const CacheWorkload wl = random_cache_workload(rng, 10, n % 2 == 0);
            const SinusoidTable table(wl.cfg.head_dim);
            LteLayerCache lazy(wl.cfg, wl.scorer, table, ScoringPolicy::lazy, true);
            LteLayerCache eager(wl.cfg, wl.scorer, table, ScoringPolicy::eager, true);
            const Tensor qp = rows(wl.q, 0, wl.prompt), kp = rows(wl.k, 0, wl.prompt), vp = rows(wl.v, 0, wl.prompt);
            if (!(lazy.prefill(qp, kp, vp) == eager.prefill(qp, kp, vp))) {
                return PropertyResult{name, false, "prefill outputs differ"};
            }
            const std::size_t before = lazy.scorer_invocations(), L = wl.q.dim(0) - wl.prompt;
            for (std::size_t t = wl.prompt; t < wl.q.dim(0); ++t) {
                const Tensor a = lazy.decode(wl.q.row(t), wl.k.row(t), wl.v.row(t));
                const Tensor b = eager.decode(wl.q.row(t), wl.k.row(t), wl.v.row(t));
                // Window rotation changes the physical tile order, so outputs agree to rounding only.
                if (max_abs_diff(a, b) > 1e-12) {
                    return PropertyResult{name, false, "decode output differs at position " + std::to_string(t)};
                }
            }
            const auto& hl = lazy.score_history();
            const auto& he = eager.score_history();
            const std::size_t common = std::min(hl.size(), he.size());
            for (std::size_t j = 0; j < common; ++j) {
                if (!hl[j].empty() && !he[j].empty() && hl[j] != he[j]) {
                    return PropertyResult{name, false, "score of position " + std::to_string(j) + " differs"};
                }
            }
            const std::size_t period = wl.cfg.window - kReceptiveField;
            const std::size_t bound = period == 0 ? L + 1 : (L + period - 1) / period + 1;
            const std::size_t calls = lazy.scorer_invocations() - before;
            if (calls > bound) {
                return PropertyResult{name, false,
                                      std::to_string(calls) + " scorer calls over " + std::to_string(L) + " steps, bound " +
                                          std::to_string(bound)};
            }
            if (calls * std::max<std::size_t>(worst_bound, 1) >= worst_calls * std::max<std::size_t>(bound, 1)) {
                worst_calls = calls;
                worst_bound = bound;
            }
        }
        return PropertyResult{name, true,
                              std::to_string(streams) + " streams bit-identical; tightest " + std::to_string(worst_calls) +
                                  " calls vs bound " + std::to_string(worst_bound)};
    });
}

/// Small runnable model for the pipeline checks.
inline ModelConfig pipeline_config(Rng& rng, std::size_t capacity) {
    ModelConfig c;
    c.name = "pipeline";
    c.pattern = detail::pick(rng, 0, 1) ? "GL" : "SLGL";
    c.heads = c.kv_heads = c.gdn_heads = 2;
    c.head_dim = 8;
    c.d_model = 16;
    c.window = detail::pick(rng, kReceptiveField, 24);
    c.sink = detail::pick(rng, 0, 3);
    c.capacity = std::max(capacity, c.sink);
    return c;
}

/**
 * Prefill + decode of the whole stack against a from-scratch masked oracle over the full history
 * with the cache's own scores. cap_binding = false uses a capacity no stream can exceed and the
 * plain admission rule; true uses a small capacity and the reference retention policy.
 */
inline PropertyResult decode_replay(std::uint64_t seed, std::size_t streams = 10, bool cap_binding = false, double tol = 1e-10) {
    const std::string name = cap_binding ? "decode_replay_with_binding_cap" : "decode_replay_matches_masked_oracle";
    return detail::guarded(name, [&] {
        Rng rng(derive_seed(seed, name));
        double worst = 0.0;
        std::size_t rows_checked = 0;
        for (std::size_t n = 0; n < streams; ++n) {
            const std::size_t T = detail::pick(rng, 120, 220);
            const ModelConfig c = pipeline_config(rng, cap_binding ? detail::pick(rng, 4, 12) : T);
            const ModelParams m = ModelParams::init(c, rng());
            std::vector<int> ids(T);
            for (int& id : ids) {
                id = static_cast<int>(detail::pick(rng, 0, c.vocab - 1));
            }
            const std::size_t prompt = detail::pick(rng, 1, 3 * c.window);
            InferenceSession sess(m, ScoringPolicy::lazy, true);
            sess.prefill(std::vector<int>(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(prompt)));
            for (std::size_t t = prompt; t < T; ++t) {
                sess.decode(ids[t]);
            }
            const ReplayReport rep = replay_check(sess, tol, cap_binding);
            worst = std::max(worst, rep.max_abs_diff);
            rows_checked += rep.rows_checked;
            if (!rep.ok) {
                return PropertyResult{name, false,
                                      "stream " + std::to_string(n) + " (" + c.pattern + ") max |diff| " + detail::fmt(rep.max_abs_diff)};
            }
        }
        return PropertyResult{name, true,
                              std::to_string(streams) + " streams, " + std::to_string(rows_checked) + " decode rows, max |diff| " +
                                  detail::fmt(worst)};
    });
}

/// RoPE inverse round trip and relative-position invariance of rotated dot products.
inline PropertyResult rope_properties(std::uint64_t seed, std::size_t trials = 50) {
    const std::string name = "rope_inverse_and_relative_position";
    return detail::guarded(name, [&] {
        Rng rng(derive_seed(seed, name));
        double round_trip = 0.0, relative = 0.0;
        for (std::size_t n = 0; n < trials; ++n) {
            const std::size_t d = 2 * detail::pick(rng, 1, 16), heads = detail::pick(rng, 1, 3), T = detail::pick(rng, 1, 32);
            const SinusoidTable table(d);
            const Tensor x = normal_tensor({T, heads * d}, rng);
            std::vector<std::size_t> pos(T), slots(T);
            const std::size_t offset = detail::pick(rng, 0, 5000);
            for (std::size_t t = 0; t < T; ++t) {
                slots[t] = t;
                pos[t] = offset + t;
            }
            round_trip = std::max(round_trip, max_abs_diff(invert_rope(apply_rope(x, pos, table), slots, offset, table), x));
            const Tensor q = normal_tensor({1, d}, rng), k = normal_tensor({1, d}, rng);
            const std::size_t m = detail::pick(rng, 0, 3000), nn = detail::pick(rng, 0, 3000), shift = detail::pick(rng, 1, 3000);
            const double a = dot(apply_rope(q, {m}, table).row(0), apply_rope(k, {nn}, table).row(0));
            const double b = dot(apply_rope(q, {m + shift}, table).row(0), apply_rope(k, {nn + shift}, table).row(0));
            relative = std::max(relative, std::abs(a - b));
        }
        const bool ok = round_trip <= 1e-12 && relative <= 1e-9;
        return PropertyResult{name, ok, "round trip " + detail::fmt(round_trip) + ", shift drift " + detail::fmt(relative)};
    });
}

/// Gated delta rule: identity gates keep the state, sequence forward equals stepping, chunking is exact.
inline PropertyResult gdn_properties(std::uint64_t seed, std::size_t trials = 20) {
    const std::string name = "gdn_recurrence_consistency";
    return detail::guarded(name, [&] {
        Rng rng(derive_seed(seed, name));
        for (std::size_t n = 0; n < trials; ++n) {
            const std::size_t dk = detail::pick(rng, 1, 8), dv = detail::pick(rng, 1, 8), T = detail::pick(rng, 2, 40);
            GdnState st(dk, dv);
            for (double& x : st.S) {
                x = std::normal_distribution<double>(0.0, 1.0)(rng);
            }
            const GdnState before = st;
            const Tensor q = normal_tensor({1, dk}, rng), k = normal_tensor({1, dk}, rng), v = normal_tensor({1, dv}, rng);
            gdn_step(st, q.row(0), k.row(0), v.row(0), 1.0, 0.0);
            if (st.S != before.S) {
                return PropertyResult{name, false, "alpha = 1, beta = 0 changed the state"};
            }
            const GdnShape shape{detail::pick(rng, 1, 3), dk, dv};
            const Tensor Q = normal_tensor({T, shape.heads * dk}, rng), K = normal_tensor({T, shape.heads * dk}, rng);
            const Tensor V = normal_tensor({T, shape.heads * dv}, rng);
            const Tensor A = uniform_tensor({T, shape.heads}, rng, 0.0, 1.0), B = uniform_tensor({T, shape.heads}, rng, 0.0, 1.0);
            const Tensor whole = gdn_layer_forward(Q, K, V, A, B, shape);
            std::vector<GdnState> states;
            const std::size_t cut = detail::pick(rng, 1, T - 1);
            Tensor first = gdn_layer_forward(rows(Q, 0, cut), rows(K, 0, cut), rows(V, 0, cut), rows(A, 0, cut), rows(B, 0, cut), shape, states);
            Tensor second = gdn_layer_forward(rows(Q, cut, T - cut), rows(K, cut, T - cut), rows(V, cut, T - cut), rows(A, cut, T - cut),
                                              rows(B, cut, T - cut), shape, states);
            if (!(rows(whole, 0, cut) == first) || !(rows(whole, cut, T - cut) == second)) {
                return PropertyResult{name, false, "chunked recurrence differs from the whole-sequence pass"};
            }
            ad::Tape tape;
            const Tensor tape_out = ad::gdn(tape.constant(Q), tape.constant(K), tape.constant(V), tape.constant(A), tape.constant(B), shape).value();
            if (!(tape_out == whole)) {
                return PropertyResult{name, false, "tape forward differs from gdn_layer_forward"};
            }
        }
        return PropertyResult{name, true, std::to_string(trials) + " trials"};
    });
}

/// NSA: selected tokens per query <= M*K, and each branch in isolation reproduces its oracle bit for bit.
inline PropertyResult nsa_budget_and_isolation(std::uint64_t seed, std::size_t trials = 60) {
    const std::string name = "nsa_budget_and_branch_isolation";
    return detail::guarded(name, [&] {
        Rng rng(derive_seed(seed, name));
        std::size_t max_selected = 0;
        for (std::size_t n = 0; n < trials; ++n) {
            NsaConfig cfg;
            cfg.block = detail::pick(rng, 1, 8);
            cfg.top_k = detail::pick(rng, 1, 5);
            cfg.window = detail::pick(rng, 1, 24);
            cfg.pool = detail::pick(rng, 0, 1) ? PoolMode::learned_mlp : PoolMode::mean;
            const std::size_t T = detail::pick(rng, 1, 96), d = 2 * detail::pick(rng, 1, 6);
            const Tensor q = normal_tensor({T, d}, rng), k = normal_tensor({T, d}, rng), v = normal_tensor({T, d}, rng);
            const NsaParams params = NsaParams::init(d, cfg, rng());
            const NsaOutput full = nsa_forward(q, k, v, cfg, params);
            for (std::size_t i = 0; i < T; ++i) {
                max_selected = std::max(max_selected, full.index.selected[i].size());
                if (full.index.selected[i].size() > cfg.block * cfg.top_k) {
                    return PropertyResult{name, false,
                                          "query " + std::to_string(i) + " selected " + std::to_string(full.index.selected[i].size()) +
                                              " tokens > M*K"};
                }
            }
            const double scale = default_scale(d);
            const std::array<std::array<double, 3>, 3> unit{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
            // Compressed branch oracle: row-wise softmax over the pooled blocks, zero without blocks.
            const BlockIndex bi = build_block_index(k, v, cfg, &params);
            Tensor cmp({T, d});
            for (std::size_t i = 0; i < T; ++i) {
                if (full.index.compressed[i].empty()) {
                    continue;
                }
                const Tensor qi({1, d}, std::vector<double>(q.row(i).begin(), q.row(i).end()));
                const Tensor o = masked_attention_oracle(qi, bi.k, bi.v, IndexSet{full.index.compressed[i]}, scale);
                std::copy(o.data().begin(), o.data().end(), cmp.row(i).begin());
            }
            const std::array<Tensor, 3> oracle{masked_attention_oracle(q, k, v, full.index.selected_all, scale), cmp,
                                               masked_attention_oracle(q, k, v, full.index.sliding, scale)};
            for (std::size_t b = 0; b < 3; ++b) {
                const NsaOutput iso = nsa_forward(q, k, v, cfg, params, unit[b]);
                const Tensor& branch = b == 0 ? full.selected : b == 1 ? full.compressed : full.sliding;
                if (!(iso.out == branch)) {
                    return PropertyResult{name, false, "branch " + std::to_string(b) + " in isolation differs from its stored output"};
                }
                if (max_abs_diff(iso.out, oracle[b]) > 0.0) {
                    return PropertyResult{name, false, "branch " + std::to_string(b) + " differs from the masked oracle"};
                }
            }
        }
        return PropertyResult{name, true,
                              std::to_string(trials) + " instances, max selected tokens " + std::to_string(max_selected)};
    });
}


/// Compares the tape gradient of f at x with central differences; returns the relative error.
inline double gradient_gap(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& tape_grad) {
    return detail::relative_error(tape_grad, finite_difference_oracle(f, x, 1e-6));
}

/**
 * Tape gradients of the scorer CNN, the gated delta rule and the gated NSA forward against
 * central finite differences on random instances (relative error <= tol).
 */
inline PropertyResult finite_difference_suite(std::uint64_t seed, std::size_t instances = 3, double tol = 1e-5) {
    const std::string name = "gradients_match_finite_differences";
    return detail::guarded(name, [&] {
        Rng rng(derive_seed(seed, name));
        double worst_scorer = 0.0, worst_gdn = 0.0, worst_nsa = 0.0;
        for (std::size_t n = 0; n < instances; ++n) {
            // scorer: inputs and every weight tensor
            {
                const std::size_t H = detail::pick(rng, 1, 2), d = 4 * detail::pick(rng, 1, 2), T = detail::pick(rng, 8, 20);
                LteScorerParams p = LteScorerParams::init(H, d, rng(), 1.0);
                for (double& x : p.head.weight.storage()) {
                    x /= kScorerHeadInitScale;  // full-scale head so the check is not dominated by tiny values
                }
                const Tensor k = normal_tensor({T, H * d}, rng), v = normal_tensor({T, H * d}, rng), c = normal_tensor({T, H}, rng);
                auto loss_of = [&](const Tensor& kk, const Tensor& vv, const LteScorerParams& pp) {
                    const Tensor r = score_tokens(kk, vv, pp);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < r.size(); ++i) {
                        acc += r[i] * c[i];
                    }
                    return acc;
                };
                ad::Tape tape;
                ad::Var kv = tape.parameter(k), vv = tape.parameter(v);
                const ad::ScorerVars sv = ad::bind(tape, p, true);
                tape.backward(ad::weighted_sum(ad::score_tokens(kv, vv, sv, H, d, Mode::eval, 0), c));
                worst_scorer = std::max(worst_scorer, gradient_gap([&](const Tensor& x) { return loss_of(x, v, p); }, k, tape.grad(kv)));
                worst_scorer = std::max(worst_scorer, gradient_gap([&](const Tensor& x) { return loss_of(k, x, p); }, v, tape.grad(vv)));
                for (std::size_t l = 0; l < kScorerLayers; ++l) {
                    worst_scorer = std::max(worst_scorer, gradient_gap(
                                                              [&](const Tensor& x) {
                                                                  LteScorerParams q = p;
                                                                  q.layers[l].weight = x;
                                                                  return loss_of(k, v, q);
                                                              },
                                                              p.layers[l].weight, tape.grad(sv.weight[l])));
                }
                worst_scorer = std::max(worst_scorer, gradient_gap(
                                                          [&](const Tensor& x) {
                                                              LteScorerParams q = p;
                                                              q.head.weight = x;
                                                              return loss_of(k, v, q);
                                                          },
                                                          p.head.weight, tape.grad(sv.head_weight)));
            }
            // gated delta rule: q, k, v, alpha, beta
            {
                const GdnShape shape{detail::pick(rng, 1, 2), detail::pick(rng, 2, 5), detail::pick(rng, 2, 5)};
                const std::size_t T = detail::pick(rng, 4, 12);
                std::array<Tensor, 5> in{normal_tensor({T, shape.heads * shape.dk}, rng), normal_tensor({T, shape.heads * shape.dk}, rng),
                                         normal_tensor({T, shape.heads * shape.dv}, rng), uniform_tensor({T, shape.heads}, rng, 0.2, 0.9),
                                         uniform_tensor({T, shape.heads}, rng, 0.1, 0.9)};
                for (auto* t : {&in[0], &in[1]}) {
                    for (double& x : t->storage()) {
                        x *= 0.5;
                    }
                }
                const Tensor c = normal_tensor({T, shape.heads * shape.dv}, rng);
                auto loss_of = [&](const std::array<Tensor, 5>& a) {
                    const Tensor o = gdn_layer_forward(a[0], a[1], a[2], a[3], a[4], shape);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < o.size(); ++i) {
                        acc += o[i] * c[i];
                    }
                    return acc;
                };
                ad::Tape tape;
                std::array<ad::Var, 5> vars;
                for (std::size_t i = 0; i < 5; ++i) {
                    vars[i] = tape.parameter(in[i]);
                }
                tape.backward(ad::weighted_sum(ad::gdn(vars[0], vars[1], vars[2], vars[3], vars[4], shape), c));
                for (std::size_t i = 0; i < 5; ++i) {
                    worst_gdn = std::max(worst_gdn, gradient_gap(
                                                        [&](const Tensor& x) {
                                                            auto a = in;
                                                            a[i] = x;
                                                            return loss_of(a);
                                                        },
                                                        in[i], tape.grad(vars[i])));
                }
            }
            // gated NSA: q, k, v, gate weights, learned pooling weights
            {
                NsaConfig cfg;
                cfg.block = detail::pick(rng, 2, 4);
                cfg.top_k = detail::pick(rng, 1, 2);
                cfg.window = detail::pick(rng, 2, 6);
                cfg.pool = n % 2 == 0 ? PoolMode::mean : PoolMode::learned_mlp;
                const std::size_t T = detail::pick(rng, 10, 20), d = 2 * detail::pick(rng, 1, 3);
                const Tensor q = normal_tensor({T, d}, rng), k = normal_tensor({T, d}, rng), v = normal_tensor({T, d}, rng);
                const NsaParams params = NsaParams::init(d, cfg, rng());
                const Tensor c = normal_tensor({T, d}, rng);
                auto loss_of = [&](const Tensor& qq, const Tensor& kk, const Tensor& vv, const NsaParams& pp) {
                    const Tensor o = nsa_forward(qq, kk, vv, cfg, pp).out;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < o.size(); ++i) {
                        acc += o[i] * c[i];
                    }
                    return acc;
                };
                ad::Tape tape;
                ad::Var qv = tape.parameter(q), kv = tape.parameter(k), vv = tape.parameter(v);
                const ad::NsaVars pv = ad::bind(tape, params);
                tape.backward(ad::weighted_sum(ad::nsa_forward(qv, kv, vv, pv, cfg), c));
                worst_nsa = std::max(worst_nsa, gradient_gap([&](const Tensor& x) { return loss_of(x, k, v, params); }, q, tape.grad(qv)));
                worst_nsa = std::max(worst_nsa, gradient_gap([&](const Tensor& x) { return loss_of(q, x, v, params); }, k, tape.grad(kv)));
                worst_nsa = std::max(worst_nsa, gradient_gap([&](const Tensor& x) { return loss_of(q, k, x, params); }, v, tape.grad(vv)));
                worst_nsa = std::max(worst_nsa, gradient_gap(
                                                    [&](const Tensor& x) {
                                                        NsaParams pp = params;
                                                        pp.gate_w = x;
                                                        return loss_of(q, k, v, pp);
                                                    },
                                                    params.gate_w, tape.grad(pv.gate_w)));
                if (pv.phi_k) {
                    worst_nsa = std::max(worst_nsa, gradient_gap(
                                                        [&](const Tensor& x) {
                                                            NsaParams pp = params;
                                                            pp.phi_k->w1 = x;
                                                            return loss_of(q, k, v, pp);
                                                        },
                                                        params.phi_k->w1, tape.grad(pv.phi_k->w1)));
                }
            }
        }
        const double worst = std::max({worst_scorer, worst_gdn, worst_nsa});
        return PropertyResult{name, worst <= tol,
                              std::to_string(instances) + " instances each; relative error scorer " + detail::fmt(worst_scorer) +
                                  ", gdn " + detail::fmt(worst_gdn) + ", nsa " + detail::fmt(worst_nsa)};
    });
}

/**
 * Straight-through surrogate: ste_backward is the inner product <v, dL/dv'>, and the gradient the
 * gated attention sends to r equals sum_i p[i,j] <v[j], g[i]> over flag-controlled pairs, computed
 * here from an independent softmax.
 */
inline PropertyResult ste_exactness(std::uint64_t seed, std::size_t trials = 20, double tol = 1e-12) {
    const std::string name = "straight_through_gradient_exact";
    return detail::guarded(name, [&] {
        Rng rng(derive_seed(seed, name));
        double worst = 0.0;
        for (std::size_t n = 0; n < trials; ++n) {
            const std::size_t H = detail::pick(rng, 1, 3), d = detail::pick(rng, 1, 6), T = detail::pick(rng, 2, 40);
            const std::size_t s = detail::pick(rng, 0, 3), w = detail::pick(rng, 1, 10);
            const Tensor q = normal_tensor({T, H * d}, rng), k = normal_tensor({T, H * d}, rng), v = normal_tensor({T, H * d}, rng);
            const Tensor r = uniform_tensor({T, H}, rng, 0.0, 1.0), c = normal_tensor({T, H * d}, rng);
            // direct form
            const Tensor g = normal_tensor({T, H * d}, rng);
            const Tensor direct = ste_backward(v, binarize(r), g, H);
            for (std::size_t j = 0; j < T; ++j) {
                for (std::size_t h = 0; h < H; ++h) {
                    double acc = 0.0;
                    for (std::size_t e = 0; e < d; ++e) {
                        acc += v(j, h * d + e) * g(j, h * d + e);
                    }
                    worst = std::max(worst, std::abs(acc - direct(j, h)));
                }
            }
            // through the gated attention
            ad::Tape tape;
            ad::Var rv = tape.parameter(r);
            const double scale = default_scale(d);
            ad::Var out = ad::multihead_attention(tape.constant(q), tape.constant(k), tape.constant(v), H,
                                                  ad::retention_index_sets(r, s, w), scale, ad::RetentionGate{rv, s, w});
            tape.backward(ad::weighted_sum(out, c));
            const Tensor& got = tape.grad(rv);
            for (std::size_t h = 0; h < H; ++h) {
                const IndexSet idx = build_index_set(T, h, r, s, w);
                std::vector<double> want(T, 0.0);
                for (std::size_t i = 0; i < T; ++i) {
                    std::vector<double> logit;
                    double mx = -1e300;
                    for (std::uint32_t j : idx[i]) {
                        double acc = 0.0;
                        for (std::size_t e = 0; e < d; ++e) {
                            acc += q(i, h * d + e) * k(j, h * d + e);
                        }
                        logit.push_back(acc * scale);
                        mx = std::max(mx, logit.back());
                    }
                    double z = 0.0;
                    for (double& x : logit) {
                        x = std::exp(x - mx);
                        z += x;
                    }
                    for (std::size_t m = 0; m < idx[i].size(); ++m) {
                        const std::size_t j = idx[i][m];
                        if (!retention_controlled(i, j, s, w)) {
                            continue;
                        }
                        double acc = 0.0;
                        for (std::size_t e = 0; e < d; ++e) {
                            acc += v(j, h * d + e) * c(i, h * d + e);
                        }
                        want[j] += logit[m] / z * acc;
                    }
                }
                for (std::size_t j = 0; j < T; ++j) {
                    worst = std::max(worst, std::abs(want[j] - got(j, h)));
                }
            }
        }
        return PropertyResult{name, worst <= tol, std::to_string(trials) + " trials, max |diff| " + detail::fmt(worst)};
    });
}

/**
 * Controller against a closed-form geometric oracle (u = 6 so the EMA weight is 1/2 and every
 * c_bar is exact, step factor 2, b = 16). Phases: over-dense (doubling up to the clamp at 1),
 * dead band, empty (halving until elimination), over-dense again (re-enable at 1e-9, doubling),
 * dead band (frozen).
 */
inline PropertyResult controller_oracle() {
    const std::string name = "controller_matches_geometric_oracle";
    return detail::guarded(name, [&] {
        ControllerConfig cfg;
        cfg.period = 6;
        cfg.step_factor = 2.0;
        cfg.cap = 16.0;
        SparsityController ctrl(cfg);
        struct Phase {
            long begin, end;
            double count;
        };
        const std::array<Phase, 5> phases{{{0, 192, 32.0}, {192, 252, 15.5}, {252, 456, 0.0}, {456, 492, 40.0}, {492, 552, 15.5}}};
        double prev = cfg.lambda_init;
        bool clamped = false, eliminated = false, reenabled = false;
        for (std::size_t ph = 0; ph < phases.size(); ++ph) {
            const Phase& P = phases[ph];
            for (long step = P.begin; step < P.end; ++step) {
                const bool updated = ctrl.update(Tensor::filled({1, 1}, P.count), step);
                const double got = ctrl.lambda()[0];
                if (updated != (step % cfg.period == 0)) {
                    return PropertyResult{name, false, "update flag wrong at step " + std::to_string(step)};
                }
                const long k = (step - P.begin) / cfg.period + 1;  // updates so far in this phase
                double want = prev;
                if (updated) {
                    switch (ph) {
                        case 0:
                            want = std::min(1.0, std::ldexp(1e-9, static_cast<int>(k)));
                            break;
                        case 1:
                            want = 1.0;
                            break;
                        case 2:
                            want = std::ldexp(1.0, -static_cast<int>(k)) < 1e-9 ? 0.0 : std::ldexp(1.0, -static_cast<int>(k));
                            break;
                        case 3:
                            want = std::ldexp(1e-9, static_cast<int>(k) - 1);
                            break;
                        default:
                            want = k == 1 ? std::ldexp(1e-9, 6) : prev;
                            break;
                    }
                }
                if (got != want) {
                    return PropertyResult{name, false,
                                          "step " + std::to_string(step) + ": lambda " + detail::fmt(got) + ", oracle " + detail::fmt(want)};
                }
                if (!(got >= 0.0 && got <= 1.0) || (got > 0.0 && got < 1e-9)) {
                    return PropertyResult{name, false, "lambda left [0, 1] or kept a sub-floor value"};
                }
                clamped = clamped || got == 1.0;
                eliminated = eliminated || (ph == 2 && got == 0.0);
                reenabled = reenabled || (ph == 3 && got == 1e-9);
                prev = got;
            }
        }
        const bool ok = clamped && eliminated && reenabled;
        return PropertyResult{name, ok, ok ? "clamp, elimination, re-enable and dead band all observed" : "a controller phase was not observed"};
    });
}

/// With retention frozen at r = 1 and no sparsity term, an L stack trains bit-identically to the dense A stack.
inline PropertyResult frozen_equivalence(std::uint64_t seed, std::size_t steps = 4) {
    const std::string name = "frozen_retention_matches_dense_training";
    return detail::guarded(name, [&] {
        ModelConfig lte = ModelConfig::preset("toy");
        lte.seq_len = 40;
        lte.pattern = "GL";
        lte.frozen_retention = true;
        ModelConfig dense = lte;
        dense.pattern = "GA";
        dense.frozen_retention = false;
        TrainConfig tc;
        tc.steps = steps;
        tc.batch = 2;
        tc.sparsity = false;
        tc.dense_warmup = 0;
        tc.seed = seed;
        const TrainResult a = train_toy(lte, tc);
        const TrainResult b = train_toy(dense, tc);
        for (std::size_t i = 0; i < steps; ++i) {
            if (a.log[i].loss != b.log[i].loss) {
                return PropertyResult{name, false, "loss differs at step " + std::to_string(i)};
            }
        }
        for (const auto& [n, t] : b.state.params.tensors) {
            if (!(a.state.params.at(n) == t)) {
                return PropertyResult{name, false, "parameter " + n + " differs after training"};
            }
        }
        return PropertyResult{name, true, std::to_string(steps) + " steps, losses and parameters bit-identical"};
    });
}

}  // namespace checks

// ---------------------------------------------------------------------------------------------
// Suites

inline const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"attention", "cache", "rope", "gdn", "nsa", "training"};
    return names;
}

inline bool is_suite(const std::string& s) {
    const auto& n = suite_names();
    return s == "all" || std::find(n.begin(), n.end(), s) != n.end();
}

struct SuiteReport {
    std::string suite;
    std::uint64_t seed = 0;
    std::vector<PropertyResult> results;

    bool passed() const {
        return std::all_of(results.begin(), results.end(), [](const PropertyResult& r) { return r.passed; });
    }
};

inline nlohmann::json to_json(const SuiteReport& r) {
    return nlohmann::json{{"suite", r.suite}, {"seed", r.seed}, {"passed", r.passed()}, {"properties", r.results}};
}

/// Property checks of one suite ("all" = every suite); independent checks run in parallel.
inline SuiteReport run_suite(const std::string& suite, std::uint64_t seed) {
    EVICTD_CHECK(is_suite(suite), ParameterError, "unknown suite '" + suite + "'");
    using Check = std::function<PropertyResult()>;
    std::vector<Check> jobs;
    auto want = [&](const char* s) { return suite == "all" || suite == s; };
    if (want("attention")) {
        jobs.push_back([=] { return checks::two_stage_exactness(seed); });
        jobs.push_back([=] { return checks::ste_exactness(seed); });
    }
    if (want("cache")) {
        jobs.push_back([=] { return checks::occupancy_bound(seed); });
        jobs.push_back([=] { return checks::lazy_cadence(seed); });
        jobs.push_back([=] { return checks::decode_replay(seed, 10, false); });
        jobs.push_back([=] { return checks::decode_replay(seed, 6, true); });
    }
    if (want("rope")) {
        jobs.push_back([=] { return checks::rope_properties(seed); });
    }
    if (want("gdn")) {
        jobs.push_back([=] { return checks::gdn_properties(seed); });
    }
    if (want("nsa")) {
        jobs.push_back([=] { return checks::nsa_budget_and_isolation(seed); });
    }
    if (want("gdn") || want("nsa") || want("training")) {
        jobs.push_back([=] { return checks::finite_difference_suite(seed); });
    }
    if (want("training")) {
        jobs.push_back([] { return checks::controller_oracle(); });
        jobs.push_back([=] { return checks::frozen_equivalence(seed); });
    }
    SuiteReport rep{suite, seed, std::vector<PropertyResult>(jobs.size())};
    parallel_for(jobs.size(), [&](std::size_t i) { rep.results[i] = jobs[i](); });
    return rep;
}


// ---------------------------------------------------------------------------------------------
// Configuration files

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

inline nlohmann::json to_json(const RunConfig& c) {
    return nlohmann::json{{"model", c.model}, {"train", c.train}};
}

/**
 * A preset name (toy, 0.4b-shape, 1.4b-shape) or a JSON file. The file is either
 * {"model": {...}, "train": {...}} or a bare model object; missing keys keep preset values.
 */
inline RunConfig load_run_config(const std::string& spec) {
    RunConfig rc;
    if (spec.empty()) {
        return rc;
    }
    if (!std::filesystem::exists(spec)) {
        rc.model = ModelConfig::preset(spec);
        return rc;
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(spec));
        if (j.contains("model") || j.contains("train")) {
            rc.model = j.value("model", nlohmann::json::object()).get<ModelConfig>();
            rc.train = j.value("train", nlohmann::json::object()).get<TrainConfig>();
        } else {
            rc.model = j.get<ModelConfig>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + spec + "': " + e.what());
    }
    return rc;
}

// ---------------------------------------------------------------------------------------------
// Benchmarks

inline const std::vector<std::string>& mixer_names() {
    static const std::vector<std::string> names{"swa", "lte", "dense", "nsa"};
    return names;
}

struct BenchRow {
    std::string mixer;
    std::size_t n = 0;
    double mean_ms = 0.0;
    double p50 = 0.0;
    double p90 = 0.0;
};

/// Mean of the middle runs (the outer (reps-3)/2 on each side are dropped once reps > 3), p50 and p90.
inline BenchRow summarize_runs(std::string mixer, std::size_t n, std::vector<double> ms) {
    EVICTD_CHECK(!ms.empty(), ParameterError, "bench: no timed runs");
    std::sort(ms.begin(), ms.end());
    const std::size_t drop = ms.size() > 3 ? (ms.size() - 3) / 2 : 0;
    double total = 0.0;
    for (std::size_t i = drop; i < ms.size() - drop; ++i) {
        total += ms[i];
    }
    auto quantile = [&](double q) {
        const double x = q * static_cast<double>(ms.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(x));
        const std::size_t hi = std::min(lo + 1, ms.size() - 1);
        return ms[lo] + (ms[hi] - ms[lo]) * (x - static_cast<double>(lo));
    };
    return BenchRow{std::move(mixer), n, total / static_cast<double>(ms.size() - 2 * drop), quantile(0.5), quantile(0.9)};
}

/**
 * Token-mixing prefill of one layer over N tokens (every head), float kernels. dense is the
 * two-stage kernel with w = N; swa uses the configured window and no compacted segment; lte adds a
 * half-full out-of-window segment of b/2 entries older than every query's window; nsa is the
 * three-branch forward. Inputs are built outside the timed region and one warm-up pass is discarded.
 */
inline BenchRow bench_mixer(const ModelConfig& c, const std::string& mixer, std::size_t N, std::size_t reps, std::uint64_t seed) {
    EVICTD_CHECK(std::find(mixer_names().begin(), mixer_names().end(), mixer) != mixer_names().end(),
                 ParameterError,
                 "bench: unknown mixer '" + mixer + "' (expected swa, lte, dense or nsa)");
    EVICTD_CHECK(N >= 1 && reps >= 1, ParameterError, "bench: lengths and reps must be >= 1");
    const std::size_t H = c.heads, d = c.head_dim;
    Rng rng(derive_seed(seed, "bench." + mixer + "." + std::to_string(N)));
    std::function<void()> body;

    struct FloatHead {
        BasicTensor<float> q, k, v, ck, cv;
    };
    std::vector<FloatHead> fh;
    std::vector<std::size_t> qpos(N), cpos;
    std::vector<std::array<Tensor, 3>> dh;
    NsaConfig ncfg;
    ncfg.window = c.window;
    const NsaParams nparams = NsaParams::init(d, ncfg, derive_seed(seed, "bench.nsa"));
    std::size_t produced = 0;

    if (mixer == "nsa") {
        for (std::size_t h = 0; h < H; ++h) {
            dh.push_back({normal_tensor({N, d}, rng), normal_tensor({N, d}, rng), normal_tensor({N, d}, rng)});
        }
        body = [&] {
            for (const auto& t : dh) {
                produced += nsa_forward(t[0], t[1], t[2], ncfg, nparams).out.size();
            }
        };
    } else {
        const std::size_t w = mixer == "dense" ? N : c.window;
        const std::size_t compact = mixer == "lte" ? c.capacity / 2 : 0;
        const std::size_t offset = compact ? compact + w + 1 : 0;
        std::iota(qpos.begin(), qpos.end(), offset);
        cpos.resize(compact);
        std::iota(cpos.begin(), cpos.end(), std::size_t{0});
        for (std::size_t h = 0; h < H; ++h) {
            fh.push_back({normal_tensor<float>({N, d}, rng), normal_tensor<float>({N, d}, rng), normal_tensor<float>({N, d}, rng),
                          normal_tensor<float>({compact, d}, rng), normal_tensor<float>({compact, d}, rng)});
        }
        const TwoStageOptions opt{w, 16, default_scale(d)};
        body = [&, opt] {
            for (const auto& t : fh) {
                const KvView<float> win = KvView<float>::of(t.k, t.v, qpos);
                const KvView<float> cmp = cpos.empty() ? KvView<float>{{}, {}, {}, d} : KvView<float>::of(t.ck, t.cv, cpos);
                produced += two_stage_sparse_attention<float>(t.q, qpos, std::span<const KvView<float>>(&win, 1), cmp, opt).size();
            }
        };
    }
    body();  // warm-up
    std::vector<double> ms;
    for (std::size_t r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        body();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    EVICTD_CHECK(produced > 0, ContractViolation, "bench: kernel produced no output");
    return summarize_runs(mixer, N, std::move(ms));
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os << "mixer,N,mean_ms,p50,p90\n";
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%zu,%.4f,%.4f,%.4f\n", r.mixer.c_str(), r.n, r.mean_ms, r.p50, r.p90);
        os << buf;
    }
    return os.str();
}

// ---------------------------------------------------------------------------------------------
// Retention report

/// Streams drawn from the training distribution of the model's passkey task.
inline std::vector<std::vector<int>> training_streams(const ModelConfig& c, const TrainConfig& t, std::size_t samples, std::uint64_t seed) {
    PasskeyConfig task = t.task;
    task.seq_len = c.seq_len;
    task.near_distance = c.window - 1;
    Rng rng(derive_seed(seed, "retention.samples"));
    std::vector<std::vector<int>> out;
    for (auto& s : passkey_batch(task, rng, samples, task.min_distance)) {
        out.push_back(std::move(s.tokens));
    }
    return out;
}

struct RetentionReport {
    std::vector<std::size_t> layers;  // model layer index of each LTE layer
    Tensor rates;                     // [lte layers x heads]
};

inline RetentionReport retention_report(const ModelParams& m, const TrainConfig& t, std::size_t samples, std::uint64_t seed) {
    EVICTD_CHECK(samples >= 1, ParameterError, "retention-report: need at least one sample");
    RetentionReport rep;
    for (std::size_t l = 0; l < m.config.layers(); ++l) {
        if (mixer_kind(m.config.pattern[l]) == MixerKind::lte) {
            rep.layers.push_back(l);
        }
    }
    rep.rates = retention_rates(m, training_streams(m.config, t, samples, seed));
    return rep;
}

inline std::string retention_csv(const RetentionReport& r) {
    std::ostringstream os;
    os << "layer";
    const std::size_t H = r.rates.rank() == 2 ? r.rates.dim(1) : 0;
    for (std::size_t h = 0; h < H; ++h) {
        os << ",head_" << h;
    }
    os << "\n";
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
        os << r.layers[i];
        for (std::size_t h = 0; h < H; ++h) {
            char buf[32];
            std::snprintf(buf, sizeof buf, ",%.6f", r.rates(i, h));
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------------------------
// run: prefill/decode over a token stream

struct RunOptions {
    ModelConfig model;
    std::string checkpoint;  // empty: fresh initialization from the seed
    std::string mode = "decode";
    std::size_t length = 300;
    std::size_t prompt = 0;  // decode mode: tokens prefilled before decoding; 0 picks min(seq_len, length / 4)
    bool check = false;
    double tolerance = 1e-10;
    std::uint64_t seed = 0;
};

struct RunOutcome {
    nlohmann::json doc;
    bool check_ok = true;
};

/// Token ids uniform over the vocabulary; deterministic in the seed.
inline std::vector<int> random_stream(std::size_t vocab, std::size_t length, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "run.stream"));
    std::uniform_int_distribution<int> pick(0, static_cast<int>(vocab) - 1);
    std::vector<int> ids(length);
    for (int& x : ids) {
        x = pick(rng);
    }
    return ids;
}

inline RunOutcome run_stream(const RunOptions& opt) {
    EVICTD_CHECK(opt.mode == "prefill" || opt.mode == "decode", ParameterError, "run: mode must be prefill or decode");
    EVICTD_CHECK(opt.length >= 1, ParameterError, "run: length must be >= 1");
    const ModelParams params = opt.checkpoint.empty() ? ModelParams::init(opt.model, opt.seed)
                                                       : load_checkpoint(opt.checkpoint).state.params;
    params.config.validate_runnable();
    const std::vector<int> ids = random_stream(params.config.vocab, opt.length, opt.seed);
    InferenceSession session(params, ScoringPolicy::lazy, opt.check);
    std::size_t prompt = opt.length;
    if (opt.mode == "decode") {
        prompt = opt.prompt ? std::min(opt.prompt, opt.length) : std::max<std::size_t>(1, std::min(params.config.seq_len, opt.length / 4));
    }
    Tensor logits = session.prefill(std::vector<int>(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(prompt)));
    std::vector<int> predictions;
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
        predictions.push_back(static_cast<int>(argmax_row(logits, i)));
    }
    for (std::size_t i = prompt; i < ids.size(); ++i) {
        logits = session.decode(ids[i]);
        predictions.push_back(static_cast<int>(argmax_row(logits, logits.dim(0) - 1)));
    }
    RunOutcome res;
    nlohmann::json caches = nlohmann::json::array();
    for (std::size_t l = 0; l < params.config.layers(); ++l) {
        if (const LteLayerCache* c = session.cache(l)) {
            nlohmann::json reports = nlohmann::json::array();
            for (std::size_t h = 0; h < params.config.heads; ++h) {
                const HeadReport r = cache_report(c->head(h));
                reports.push_back({{"occupancy", r.occupancy},
                                   {"capacity", r.capacity},
                                   {"protected", r.protected_entries},
                                   {"window_filled", c->head(h).window_filled()}});
            }
            caches.push_back({{"layer", l},
                              {"scorer_invocations", c->scorer_invocations()},
                              {"heads", reports},
                              {"contents", c->dump()}});
        }
    }
    const Tensor& last = logits;
    const auto final_row = last.row(last.dim(0) - 1);
    res.doc = {{"mode", opt.mode},
               {"length", opt.length},
               {"prompt", prompt},
               {"tokens", ids},
               {"predictions", predictions},
               {"final_logits", std::vector<double>(final_row.begin(), final_row.end())},
               {"caches", caches}};
    if (opt.check) {
        const ReplayReport rep = replay_check(session, opt.tolerance);
        res.check_ok = rep.ok;
        res.doc["check"] = {{"passed", rep.ok},
                            {"layers", rep.layers_checked},
                            {"rows", rep.rows_checked},
                            {"max_abs_diff", rep.max_abs_diff},
                            {"tolerance", opt.tolerance}};
    }
    RunManifest man{"run", opt.seed, params.config, hex64(params.content_hash()), {}};
    man.config["mode"] = opt.mode;
    if (!opt.checkpoint.empty()) {
        man.config["checkpoint"] = opt.checkpoint;
    }
    res.doc["manifest"] = manifest_json(man);
    return res;
}

// ---------------------------------------------------------------------------------------------
// train: checkpoints and metrics

struct TrainOptions {
    RunConfig config;
    std::string out;      // checkpoint path
    std::string metrics;  // NDJSON path, empty: <out>.metrics.ndjson
    std::string resume;   // checkpoint to continue from
};

struct TrainOutcome {
    Checkpoint checkpoint;
    bool diverged = false;
    std::size_t first_step = 0;
    double seconds = 0.0;
};

inline std::string metrics_path(const TrainOptions& opt) {
    return opt.metrics.empty() ? opt.out + ".metrics.ndjson" : opt.metrics;
}

/**
 * Trains (or resumes) and writes the checkpoint and metrics log atomically. A diverged run keeps
 * its last finite state in the checkpoint with status "failed". A resumed run appends its records
 * after the resumed log's existing lines.
 */
inline TrainOutcome train_to_checkpoint(const TrainOptions& opt) {
    EVICTD_CHECK(!opt.out.empty(), ParameterError, "train: --out is required");
    RunConfig rc = opt.config;
    std::optional<Checkpoint> prior;
    std::string log;
    if (!opt.resume.empty()) {
        prior = load_checkpoint(opt.resume);
        EVICTD_CHECK(!prior->failed, ConfigError, "train: cannot resume a failed checkpoint (" + prior->failure + ")");
        rc.model = prior->state.params.config;
        const std::size_t steps = rc.train.steps;
        rc.train = prior->train;  // the data stream and schedule must stay those of the original run
        rc.train.steps = std::max(steps, prior->state.step);
        const std::string old_log = opt.resume + ".metrics.ndjson";
        if (std::filesystem::exists(old_log)) {
            log = read_file(old_log);
        }
    }
    TrainOutcome res;
    res.first_step = prior ? prior->state.step : 0;
    std::ostringstream lines;
    const TrainResult tr = train_toy(rc.model, rc.train, [&](const MetricsRecord& r) { lines << metrics_json(r).dump() << "\n"; },
                                     prior ? &prior->state : nullptr);
    res.diverged = tr.diverged;
    res.seconds = tr.seconds;
    res.checkpoint.state = tr.state;
    res.checkpoint.train = rc.train;
    res.checkpoint.failed = tr.diverged;
    res.checkpoint.failure = tr.failure;
    res.checkpoint.manifest = RunManifest{"train", rc.train.seed, to_json(rc), hex64(tr.state.params.content_hash()),
                                          {opt.out, metrics_path(opt)}};
    if (prior) {
        res.checkpoint.manifest.config["resumed_from"] = opt.resume;
        res.checkpoint.manifest.config["resumed_step"] = prior->state.step;
    }
    save_checkpoint(opt.out, res.checkpoint);
    write_atomic(metrics_path(opt), log + lines.str());
    return res;
}

}  // namespace evictd
