// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: every criterion at its stated tolerance, one PASS/FAIL line each.
// Exit status is nonzero when any criterion fails. `--only 3,8` runs a subset.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <optional>
#include <set>
#include <sstream>

#include "evictd/harness.hpp"

using namespace evictd;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

Outcome from(const PropertyResult& r) {
    return {r.passed, r.name + ": " + r.detail};
}

Outcome both(const PropertyResult& a, const PropertyResult& b) {
    return {a.passed && b.passed, a.name + ": " + a.detail + "; " + b.name + ": " + b.detail};
}

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

// Trained SL model of the first retrieval seed, reused by the heterogeneity check.
std::optional<ModelParams> g_trained;

Outcome retrieval() {
    const std::array<std::uint64_t, 3> seeds{0, 1, 2};
    const std::size_t samples = 100;
    std::ostringstream os;
    bool every_gap = true;
    double sum_l = 0.0, sum_s = 0.0;
    for (std::uint64_t seed : seeds) {
        double acc[2] = {0.0, 0.0};
        for (int k = 0; k < 2; ++k) {
            ModelConfig m = ModelConfig::preset("toy");
            m.pattern = k == 0 ? "SL" : "SS";
            TrainConfig t;
            t.seed = seed;
            const TrainResult r = train_toy(m, t);
            if (r.diverged) {
                return {false, "seed " + std::to_string(seed) + " " + m.pattern + " diverged: " + r.failure};
            }
            PasskeyConfig task = t.task;
            task.seq_len = m.seq_len;
            acc[k] = passkey_accuracy(r.state.params, task, samples, derive_seed(seed, "acceptance"), 4 * m.window + 1);
            if (k == 0) {
                double peak = 0.0;
                for (double c : r.state.c_bar.storage()) {
                    peak = std::max(peak, c);
                }
                os << "seed " << seed << ": LTE " << fmt("%.2f", acc[0]) << " (c_bar max " << fmt("%.1f", peak) << " <= b "
                   << m.capacity << (peak <= static_cast<double>(m.capacity) ? "" : " VIOLATED") << ")";
                if (seed == seeds.front()) {
                    g_trained = r.state.params;
                }
            }
        }
        os << ", SWA " << fmt("%.2f", acc[1]) << "; ";
        every_gap = every_gap && acc[0] - acc[1] >= 0.4;
        sum_l += acc[0];
        sum_s += acc[1];
    }
    const double mean_l = sum_l / 3.0, mean_s = sum_s / 3.0;
    const bool strict = mean_l >= 0.8 && mean_s <= 0.2;
    os << "mean LTE " << fmt("%.3f", mean_l) << " (>= 0.8), mean SWA " << fmt("%.3f", mean_s) << " (<= 0.2), gap >= 0.4 on every seed: "
       << (every_gap ? "yes" : "no") << "; needle distance >= 4w+1, " << samples << " streams per model";
    return {strict || every_gap, os.str()};
}

Outcome cost_scaling() {
    const ModelConfig c = ModelConfig::preset("toy");
    const std::size_t reps = 7;
    double ratio[2];
    const char* mixers[2] = {"dense", "lte"};
    std::ostringstream os;
    for (int k = 0; k < 2; ++k) {
        const BenchRow a = bench_mixer(c, mixers[k], 2048, reps, 0);
        const BenchRow b = bench_mixer(c, mixers[k], 4096, reps, 0);
        ratio[k] = b.mean_ms / a.mean_ms;
        os << mixers[k] << " " << fmt("%.2f", a.mean_ms) << " -> " << fmt("%.2f", b.mean_ms) << " ms (ratio " << fmt("%.2f", ratio[k])
           << (k == 0 ? ", want [3.2, 4.8]); " : ", want [1.6, 2.6])");
    }
    return {ratio[0] >= 3.2 && ratio[0] <= 4.8 && ratio[1] >= 1.6 && ratio[1] <= 2.6, os.str()};
}

Outcome heterogeneity() {
    if (!g_trained) {
        ModelConfig m = ModelConfig::preset("toy");
        const TrainResult r = train_toy(m, TrainConfig{});
        g_trained = r.state.params;
    }
    const RetentionReport rep = retention_report(*g_trained, TrainConfig{}, 16, 0);
    bool bounded = true;
    std::ostringstream os;
    os << "rates";
    for (double x : rep.rates.storage()) {
        bounded = bounded && x >= 0.0 && x <= 1.0;
        os << " " << fmt("%.3f", x);
    }
    const double cv = coefficient_of_variation(rep.rates);
    os << ", coefficient of variation " << fmt("%.3f", cv) << " (want > 0.1), 16 streams";
    return {bounded && cv > 0.1, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::strcmp(argv[i], "--only") == 0) {
            std::stringstream ss(argv[i + 1]);
            for (std::string item; std::getline(ss, item, ',');) {
                only.insert(std::stoi(item));
            }
        }
    }
    const std::uint64_t seed = 20260;
    struct Criterion {
        int id;
        const char* title;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "sparse attention exactness", [&] { return from(checks::two_stage_exactness(seed, 200, 1e-10)); }},
        {2, "constant-space bound", [&] { return from(checks::occupancy_bound(seed)); }},
        {3, "decode replay equivalence", [&] { return from(checks::decode_replay(seed, 10, false, 1e-10)); }},
        {4, "lazy scoring cadence", [&] { return from(checks::lazy_cadence(seed)); }},
        {5, "gradient suite", [&] { return both(checks::ste_exactness(seed, 20, 1e-12), checks::finite_difference_suite(seed, 3, 1e-5)); }},
        {6, "controller behaviour", [] { return from(checks::controller_oracle()); }},
        {7, "retrieval efficacy", retrieval},
        {8, "cost scaling", cost_scaling},
        {9, "retention heterogeneity", heterogeneity},
        {10, "block-sparse constant budget", [&] { return from(checks::nsa_budget_and_isolation(seed)); }},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.count(c.id)) {
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += o.passed ? 0 : 1;
        std::printf("%s [%d] %s (%.1f s): %s\n", o.passed ? "PASS" : "FAIL", c.id, c.title, secs, o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
