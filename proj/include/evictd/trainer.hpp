// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "evictd/controller.hpp"
#include "evictd/model.hpp"

// Passkey retrieval task, AdamW with warmup + cosine decay, and the toy training loop with the
// adaptive sparsity controller.

namespace evictd {

// ---------------------------------------------------------------------------------------------
// Passkey task

/// Vocabulary: BOS, NEEDLE, QUERY, then value tokens, then filler tokens.
struct PasskeyConfig {
    std::size_t seq_len = 96;
    std::size_t values = 16;
    std::size_t fillers = 16;
    double distractor_rate = 0.3;  // filler positions that carry a random value token instead
    std::size_t min_distance = 2;  // training distances are uniform in [min_distance, seq_len - 3]
    double near_fraction = 0.5;    // share of training streams drawn from [min_distance, near_distance]
    std::size_t near_distance = 0;

    static constexpr int kBos = 0;
    static constexpr int kNeedle = 1;
    static constexpr int kQuery = 2;

    std::size_t vocab() const {
        return 3 + values + fillers;
    }
    int value_token(std::size_t i) const {
        return static_cast<int>(3 + i);
    }
    int filler_token(std::size_t i) const {
        return static_cast<int>(3 + values + i);
    }
    std::size_t max_distance() const {
        return seq_len - 3;
    }
};

/**
 * One stream: BOS, noise, NEEDLE, VALUE, noise, QUERY. `distance` is query position minus value
 * position; the only supervised target is the value at the query position.
 */
struct PasskeySample {
    std::vector<int> tokens;
    std::vector<int> targets;  // -1 everywhere except the final position
    int answer = 0;
    std::size_t needle_pos = 0;
    std::size_t value_pos = 0;
    std::size_t query_pos = 0;
    std::size_t distance = 0;
};

inline PasskeySample passkey_sample(const PasskeyConfig& cfg, Rng& rng, std::size_t distance) {
    const std::size_t T = cfg.seq_len;
    EVICTD_CHECK(T >= 4 && distance >= 1 && distance < T && distance <= cfg.max_distance(),
                 ParameterError,
                 "passkey: distance must lie in [1, T-3] (got " + std::to_string(distance) + " for T=" + std::to_string(T) + ")");
    std::uniform_int_distribution<std::size_t> pick_value(0, cfg.values - 1), pick_filler(0, cfg.fillers - 1);
    std::bernoulli_distribution distractor(cfg.distractor_rate);
    PasskeySample s;
    s.tokens.resize(T);
    s.targets.assign(T, -1);
    s.tokens[0] = PasskeyConfig::kBos;
    s.query_pos = T - 1;
    s.value_pos = s.query_pos - distance;
    s.needle_pos = s.value_pos - 1;
    s.distance = distance;
    s.answer = cfg.value_token(pick_value(rng));
    for (std::size_t t = 1; t + 1 < T; ++t) {
        s.tokens[t] = distractor(rng) ? cfg.value_token(pick_value(rng)) : cfg.filler_token(pick_filler(rng));
    }
    // Past the needle every value id occurs equally often (the answer included), so token counts
    // after the needle carry no information about the answer.
    const std::size_t tail = distance - 1, m = static_cast<std::size_t>(cfg.distractor_rate * static_cast<double>(distance)) / cfg.values;
    if (m >= 1 && cfg.values * m - 1 <= tail) {
        std::vector<std::size_t> slots(tail);
        std::iota(slots.begin(), slots.end(), s.value_pos + 1);
        std::shuffle(slots.begin(), slots.end(), rng);
        std::size_t n = 0;
        for (std::size_t v = 0; v < cfg.values; ++v) {
            const std::size_t copies = cfg.value_token(v) == s.answer ? m - 1 : m;
            for (std::size_t c = 0; c < copies; ++c) {
                s.tokens[slots[n++]] = cfg.value_token(v);
            }
        }
        for (; n < tail; ++n) {
            s.tokens[slots[n]] = cfg.filler_token(pick_filler(rng));
        }
    }
    s.tokens[s.needle_pos] = PasskeyConfig::kNeedle;
    s.tokens[s.value_pos] = s.answer;
    s.tokens[s.query_pos] = PasskeyConfig::kQuery;
    s.targets[s.query_pos] = s.answer;
    return s;
}

/// Deterministic single stream for (seed, T, distance).
inline PasskeySample passkey_task(std::uint64_t seed, std::size_t T, std::size_t distance, PasskeyConfig cfg = {}) {
    cfg.seq_len = T;
    Rng rng(derive_seed(seed, "passkey"));
    return passkey_sample(cfg, rng, distance);
}

inline std::vector<PasskeySample> passkey_batch(const PasskeyConfig& cfg, Rng& rng, std::size_t count, std::size_t min_distance) {
    std::uniform_int_distribution<std::size_t> dist(min_distance, cfg.max_distance());
    std::uniform_int_distribution<std::size_t> near(min_distance, std::max(min_distance, std::min(cfg.near_distance, cfg.max_distance())));
    std::bernoulli_distribution pick_near(cfg.near_fraction);
    std::vector<PasskeySample> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t d = cfg.near_fraction > 0.0 && pick_near(rng) ? near(rng) : dist(rng);
        out.push_back(passkey_sample(cfg, rng, d));
    }
    return out;
}

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
    const auto r = logits.row(row);
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

/// Exact-match accuracy of the cached inference path on streams with distance >= min_distance.
inline double passkey_accuracy(const ModelParams& m,
                               const PasskeyConfig& cfg,
                               std::size_t samples,
                               std::uint64_t seed,
                               std::size_t min_distance) {
    Rng rng(derive_seed(seed, "passkey.eval"));
    const auto batch = passkey_batch(cfg, rng, samples, min_distance);
    std::size_t hits = 0;
    for (const auto& s : batch) {
        InferenceSession sess(m);
        const Tensor logits = sess.prefill(s.tokens);
        hits += static_cast<int>(argmax_row(logits, s.query_pos)) == s.answer ? 1 : 0;
    }
    return samples ? static_cast<double>(hits) / static_cast<double>(samples) : 0.0;
}

// ---------------------------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t warmup = 50;
    std::size_t total = 1000;
    double min_lr_ratio = 0.1;
    double clip = 1.0;  // global gradient-norm clip, 0 disables

    double lr_at(std::size_t step) const {
        if (step < warmup) {
            return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
        }
        const double span = total > warmup ? static_cast<double>(total - warmup) : 1.0;
        const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
        const double cosine = 0.5 * (1.0 + std::cos(std::acos(-1.0) * progress));
        return lr * (min_lr_ratio + (1.0 - min_lr_ratio) * cosine);
    }
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : m_cfg(cfg) {}

    const AdamWConfig& config() const {
        return m_cfg;
    }
    ParamMap& first_moment() {
        return m_m;
    }
    ParamMap& second_moment() {
        return m_v;
    }
    const ParamMap& first_moment() const {
        return m_m;
    }
    const ParamMap& second_moment() const {
        return m_v;
    }

    /// One update of every parameter that has a gradient. Returns the pre-clip gradient norm.
    double step(ParamMap& params, const ParamMap& grads, std::size_t step) {
        double sq = 0.0;
        for (const auto& [name, g] : grads) {
            for (double x : g.storage()) {
                sq += x * x;
            }
        }
        const double norm = std::sqrt(sq);
        const double clip = m_cfg.clip > 0.0 && norm > m_cfg.clip ? m_cfg.clip / norm : 1.0;
        const double lr = m_cfg.lr_at(step);
        const double t = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(m_cfg.beta1, t), bc2 = 1.0 - std::pow(m_cfg.beta2, t);
        for (const auto& [name, g] : grads) {
            Tensor& p = params.at(name);
            Tensor& m = slot(m_m, name, p.shape());
            Tensor& v = slot(m_v, name, p.shape());
            const bool decay = p.rank() >= 2;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i] * clip;
                m[i] = m_cfg.beta1 * m[i] + (1.0 - m_cfg.beta1) * gi;
                v[i] = m_cfg.beta2 * v[i] + (1.0 - m_cfg.beta2) * gi * gi;
                const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + m_cfg.eps);
                p[i] -= lr * (upd + (decay ? m_cfg.weight_decay * p[i] : 0.0));
            }
        }
        return norm;
    }

private:
    static Tensor& slot(ParamMap& map, const std::string& name, const Shape& shape) {
        auto it = map.find(name);
        if (it == map.end()) {
            it = map.emplace(name, Tensor(shape)).first;
        }
        return it->second;
    }

    AdamWConfig m_cfg;
    ParamMap m_m, m_v;
};

// ---------------------------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 8;
    AdamWConfig optim;
    bool sparsity = true;
    long update_period = 32;
    double step_factor = 2.0;  // the toy run has ~31 controller updates, 1.2 cannot lift lambda off 1e-9 in time
    bool train_scorer = true;
    std::size_t dense_warmup = 1000;  // steps during which LTE layers attend to every token
    std::uint64_t seed = 0;
    PasskeyConfig task;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"steps", c.steps},
                       {"batch", c.batch},
                       {"lr", c.optim.lr},
                       {"warmup", c.optim.warmup},
                       {"weight_decay", c.optim.weight_decay},
                       {"clip", c.optim.clip},
                       {"min_lr_ratio", c.optim.min_lr_ratio},
                       {"sparsity", c.sparsity},
                       {"update_period", c.update_period},
                       {"step_factor", c.step_factor},
                       {"train_scorer", c.train_scorer},
                       {"dense_warmup", c.dense_warmup},
                       {"seed", c.seed},
                       {"distractor_rate", c.task.distractor_rate},
                       {"min_distance", c.task.min_distance},
                       {"near_fraction", c.task.near_fraction}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) {
            j.at(key).get_to(field);
        }
    };
    get("steps", c.steps);
    get("batch", c.batch);
    get("lr", c.optim.lr);
    get("warmup", c.optim.warmup);
    get("weight_decay", c.optim.weight_decay);
    get("clip", c.optim.clip);
    get("min_lr_ratio", c.optim.min_lr_ratio);
    get("sparsity", c.sparsity);
    get("update_period", c.update_period);
    get("step_factor", c.step_factor);
    get("train_scorer", c.train_scorer);
    get("dense_warmup", c.dense_warmup);
    get("seed", c.seed);
    get("distractor_rate", c.task.distractor_rate);
    get("min_distance", c.task.min_distance);
    get("near_fraction", c.task.near_fraction);
}

struct MetricsRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double lm_loss = 0.0;
    double sparsity_loss = 0.0;
    std::vector<std::vector<double>> c;       // [lte layer][head], batch mean
    std::vector<std::vector<double>> lambda;  // [lte layer][head]
    double grad_norm = 0.0;
    double lr = 0.0;
};

inline nlohmann::json metrics_json(const MetricsRecord& r) {
    return nlohmann::json{{"step", r.step},
                          {"loss", r.loss},
                          {"lm_loss", r.lm_loss},
                          {"sparsity_loss", r.sparsity_loss},
                          {"c", r.c},
                          {"lambda", r.lambda},
                          {"grad_norm", r.grad_norm},
                          {"lr", r.lr}};
}

/// Everything needed to continue a run.
struct TrainState {
    ModelParams params;
    ParamMap adam_m, adam_v;
    Tensor lambda, c_bar;
    bool controller_seen = false;
    std::size_t step = 0;  // number of completed steps
};

struct TrainResult {
    TrainState state;
    std::vector<MetricsRecord> log;
    bool diverged = false;
    std::string failure;
    double seconds = 0.0;
};

namespace detail {

inline std::vector<std::vector<double>> rows_of(const Tensor& t) {
    std::vector<std::vector<double>> out(t.dim(0));
    for (std::size_t i = 0; i < t.dim(0); ++i) {
        out[i].assign(t.row(i).begin(), t.row(i).end());
    }
    return out;
}

}  // namespace detail

/**
 * Trains the toy model on the passkey task. Loss = mean answer cross-entropy + mean sparsity
 * penalty; the controller sees batch-mean retained counts after each optimizer step. A non-finite
 * loss stops the run and returns the last finite state with diverged = true.
 */
inline TrainResult train_toy(const ModelConfig& mcfg,
                             const TrainConfig& tcfg,
                             const std::function<void(const MetricsRecord&)>& on_step = {},
                             const TrainState* resume = nullptr) {
    mcfg.validate_runnable();
    EVICTD_CHECK(mcfg.vocab >= tcfg.task.vocab(), ConfigError, "train: model vocabulary smaller than the task vocabulary");
    EVICTD_CHECK(tcfg.batch >= 1, ConfigError, "train: batch must be >= 1");
    PasskeyConfig task = tcfg.task;
    task.seq_len = mcfg.seq_len;
    task.near_distance = mcfg.window - 1;
    const auto t0 = std::chrono::steady_clock::now();

    TrainResult res;
    res.state = resume ? *resume : TrainState{ModelParams::init(mcfg, tcfg.seed), {}, {}, {}, {}, false, 0};
    ModelParams& params = res.state.params;
    EVICTD_CHECK(params.config.pattern == mcfg.pattern, ConfigError, "train: resume state does not match the model config");

    const std::size_t n_lte = mcfg.frozen_retention ? 0 : mcfg.lte_layers();
    SparsityController ctrl(ControllerConfig{std::max<std::size_t>(n_lte, 1), mcfg.heads, tcfg.update_period, tcfg.step_factor,
                                             static_cast<double>(mcfg.capacity)});
    if (resume && resume->lambda.size() > 0) {
        ctrl.restore(resume->lambda, resume->c_bar, resume->controller_seen);
    }
    AdamWConfig ocfg = tcfg.optim;
    ocfg.total = tcfg.steps;
    AdamW opt(ocfg);
    opt.first_moment() = res.state.adam_m;
    opt.second_moment() = res.state.adam_v;
    const SinusoidTable table(mcfg.head_dim, mcfg.rope_base);
    const bool train_scorer = tcfg.train_scorer && !mcfg.frozen_retention;

    for (std::size_t step = res.state.step; step < tcfg.steps; ++step) {
        Rng rng(derive_seed(tcfg.seed, "batch." + std::to_string(step)));
        const auto batch = passkey_batch(task, rng, tcfg.batch, task.min_distance);
        ad::Tape tape;
        const VarMap P = bind_params(tape, params, true, train_scorer && step >= tcfg.dense_warmup);
        std::vector<ad::Var> lm_terms, sp_terms;
        Tensor counts({std::max<std::size_t>(n_lte, 1), mcfg.heads});
        for (std::size_t b = 0; b < batch.size(); ++b) {
            ForwardAux aux;
            const ForwardOptions fo{Mode::train, derive_seed(tcfg.seed, "dropout." + std::to_string(step) + "." + std::to_string(b)),
                                    step < tcfg.dense_warmup};
            ad::Var logits = forward_logits(P, mcfg, batch[b].tokens, table, fo, &aux);
            lm_terms.push_back(ad::cross_entropy(logits, batch[b].targets));
            for (std::size_t li = 0; li < aux.retention.size(); ++li) {
                const Tensor& r = aux.retention[li].value();
                const auto c = retained_counts(r, mcfg.sink, mcfg.window);
                for (std::size_t h = 0; h < mcfg.heads; ++h) {
                    counts(li, h) += c[h] / static_cast<double>(batch.size());
                }
                if (tcfg.sparsity) {
                    std::vector<double> lam(ctrl.lambda().row(li).begin(), ctrl.lambda().row(li).end());
                    sp_terms.push_back(ad::sparsity_loss(aux.retention[li], std::move(lam), mcfg.sink));
                }
            }
        }
        auto mean_of = [&](const std::vector<ad::Var>& terms) {
            ad::Var acc = terms.front();
            for (std::size_t i = 1; i < terms.size(); ++i) {
                acc = ad::add(acc, terms[i]);
            }
            return ad::scale(acc, 1.0 / static_cast<double>(batch.size()));
        };
        const ad::Var lm = mean_of(lm_terms);
        ad::Var loss = lm;
        double sp_value = 0.0;
        if (!sp_terms.empty()) {
            const ad::Var sp = mean_of(sp_terms);
            sp_value = sp.value()[0];
            loss = ad::add(lm, sp);
        }
        const double loss_value = loss.value()[0];
        if (!std::isfinite(loss_value)) {
            res.diverged = true;
            res.failure = "non-finite loss " + std::to_string(loss_value) + " at step " + std::to_string(step) +
                          " (lm " + std::to_string(lm.value()[0]) + ", sparsity " + std::to_string(sp_value) + ")";
            break;
        }
        tape.backward(loss);
        ParamMap grads;
        for (const auto& [name, var] : P) {
            if (tape.requires_grad(var)) {
                grads.emplace(name, tape.grad(var));
            }
        }
        MetricsRecord rec;
        rec.lr = ocfg.lr_at(step);
        rec.grad_norm = opt.step(params.tensors, grads, step);
        if (n_lte > 0 && step >= tcfg.dense_warmup) {
            ctrl.update(counts, static_cast<long>(step - tcfg.dense_warmup));
        }
        rec.step = step;
        rec.loss = loss_value;
        rec.lm_loss = lm.value()[0];
        rec.sparsity_loss = sp_value;
        if (n_lte > 0) {
            rec.c = detail::rows_of(counts);
            rec.lambda = detail::rows_of(ctrl.lambda());
        }
        res.log.push_back(rec);
        if (on_step) {
            on_step(rec);
        }
        res.state.step = step + 1;
    }
    res.state.adam_m = opt.first_moment();
    res.state.adam_v = opt.second_moment();
    res.state.lambda = ctrl.lambda();
    res.state.c_bar = ctrl.c_bar();
    res.state.controller_seen = ctrl.initialised();
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

// ---------------------------------------------------------------------------------------------
// Retention statistics

/// Mean out-of-window retention rate per (LTE layer, head) over the given streams, eval mode.
inline Tensor retention_rates(const ModelParams& m, const std::vector<std::vector<int>>& streams) {
    const ModelConfig& c = m.config;
    const SinusoidTable table(c.head_dim, c.rope_base);
    Tensor rates({c.lte_layers(), c.heads});
    for (const auto& ids : streams) {
        ad::Tape tape;
        const VarMap P = bind_params(tape, m, false);
        ForwardAux aux;
        forward_logits(P, c, ids, table, ForwardOptions{}, &aux);
        for (std::size_t li = 0; li < aux.retention.size(); ++li) {
            const Tensor& r = aux.retention[li].value();
            const auto counts = retained_counts(r, c.sink, c.window);
            const std::size_t T = r.dim(0);
            const double population = T > c.window + 1 + c.sink ? static_cast<double>(T - c.window - 1 - c.sink) : 1.0;
            for (std::size_t h = 0; h < c.heads; ++h) {
                rates(li, h) += counts[h] / population / static_cast<double>(streams.size());
            }
        }
    }
    return rates;
}

/// Population coefficient of variation of all entries.
inline double coefficient_of_variation(const Tensor& x) {
    if (x.size() == 0) {
        return 0.0;
    }
    double mean = 0.0;
    for (double v : x.storage()) {
        mean += v;
    }
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x.storage()) {
        var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(x.size());
    return mean != 0.0 ? std::sqrt(var) / mean : 0.0;
}

}  // namespace evictd
