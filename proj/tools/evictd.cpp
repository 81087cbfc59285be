// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

// evictd: verify, bench, retention-report, run and train.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "evictd/harness.hpp"

namespace {

using namespace evictd;

void emit(const std::string& out, const std::string& text) {
    if (out.empty() || out == "-") {
        std::cout << text;
        std::cout.flush();
    } else {
        write_atomic(out, text);
    }
}

std::vector<std::size_t> parse_lengths(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || v == 0) {
            throw ParameterError("--lengths: '" + item + "' is not a positive integer");
        }
        out.push_back(static_cast<std::size_t>(v));
    }
    if (out.empty()) {
        throw ParameterError("--lengths: empty list");
    }
    if (!std::is_sorted(out.begin(), out.end())) {
        throw ParameterError("--lengths: lengths must be sorted ascending");
    }
    return out;
}

std::vector<std::string> parse_mixers(const std::string& csv) {
    if (csv == "all") {
        return mixer_names();
    }
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(item);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"evictd: learned token eviction for hybrid linear attention, desk-scale harness"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all help");

    std::string config, out, suite = "all", lengths = "512,1024,2048,4096", mixers = "all", checkpoint, resume, metrics,
                             mode = "decode";
    std::uint64_t seed = 0;
    std::size_t reps = 5, steps = 0, samples = 16, length = 300, prompt = 0;
    bool check = false, seed_set = false, steps_set = false;

    auto* verify = app.add_subcommand("verify", "Run property suites against independent oracles");
    verify->add_option("--suite", suite, "attention, cache, rope, gdn, nsa, training or all")->capture_default_str();
    verify->add_option("--seed", seed, "Seed")->capture_default_str();
    verify->add_option("--out", out, "JSON report path (default stdout)");

    auto* bench = app.add_subcommand("bench", "Time token-mixing prefill at several lengths (CSV)");
    bench->add_option("--mixer", mixers, "swa, lte, dense, nsa, a comma list, or all")->capture_default_str();
    bench->add_option("--lengths", lengths, "Ascending comma-separated sequence lengths")->capture_default_str();
    bench->add_option("--reps", reps, "Timed repetitions per length")->capture_default_str();
    bench->add_option("--config", config, "Preset name or JSON config file");
    bench->add_option("--seed", seed, "Seed")->capture_default_str();
    bench->add_option("--out", out, "CSV path (default stdout)");

    auto* report = app.add_subcommand("retention-report", "Per-layer, per-head out-of-window retention rates (CSV)");
    report->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
    report->add_option("--samples", samples, "Number of passkey streams")->capture_default_str();
    report->add_option("--seed", seed, "Seed")->capture_default_str();
    report->add_option("--out", out, "CSV path (default stdout)");

    auto* run = app.add_subcommand("run", "Prefill or decode a token stream through the cached stack");
    run->add_option("--mode", mode, "prefill or decode")->capture_default_str()->check(CLI::IsMember({"prefill", "decode"}));
    run->add_option("--config", config, "Preset name or JSON config file");
    run->add_option("--checkpoint", checkpoint, "Use trained parameters instead of a fresh initialization");
    run->add_option("--length", length, "Stream length")->capture_default_str();
    run->add_option("--prompt", prompt, "Tokens prefilled before decoding (0: automatic)")->capture_default_str();
    run->add_flag("--check", check, "Verify outputs against the from-scratch replay oracle");
    run->add_option("--seed", seed, "Seed")->capture_default_str();
    run->add_option("--out", out, "JSON output path (default stdout)");

    auto* train = app.add_subcommand("train", "Train the toy model on the passkey task");
    train->add_option("--config", config, "Preset name or JSON config file");
    train->add_option("--steps", steps, "Total optimizer steps");
    train->add_option("--seed", seed, "Seed");
    train->add_option("--out", out, "Checkpoint path")->required();
    train->add_option("--metrics", metrics, "NDJSON metrics path (default <out>.metrics.ndjson)");
    train->add_option("--resume", resume, "Continue from this checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    seed_set = app.got_subcommand(train) && train->count("--seed") > 0;
    steps_set = app.got_subcommand(train) && train->count("--steps") > 0;

    try {
        if (app.got_subcommand(verify)) {
            if (!is_suite(suite)) {
                std::cerr << "error: unknown suite '" << suite << "'\n\n" << verify->help();
                return kExitUsage;
            }
            const SuiteReport rep = run_suite(suite, seed);
            for (const auto& r : rep.results) {
                std::cerr << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
            }
            emit(out, to_json(rep).dump(2) + "\n");
            return rep.passed() ? kExitOk : kExitFailure;
        }
        if (app.got_subcommand(bench)) {
            const RunConfig rc = load_run_config(config);
            rc.model.validate();
            const auto ns = parse_lengths(lengths);
            EVICTD_CHECK(reps >= 1, ParameterError, "--reps must be >= 1");
            std::vector<BenchRow> rows;
            for (const auto& m : parse_mixers(mixers)) {
                for (std::size_t n : ns) {
                    rows.push_back(bench_mixer(rc.model, m, n, reps, seed));
                }
            }
            emit(out, bench_csv(rows));
            return kExitOk;
        }
        if (app.got_subcommand(report)) {
            const Checkpoint ck = load_checkpoint(checkpoint);
            const RetentionReport rep = retention_report(ck.state.params, ck.train, samples, seed);
            emit(out, retention_csv(rep));
            return kExitOk;
        }
        if (app.got_subcommand(run)) {
            RunOptions ro;
            ro.model = load_run_config(config).model;
            ro.checkpoint = checkpoint;
            ro.mode = mode;
            ro.length = length;
            ro.prompt = prompt;
            ro.check = check;
            ro.seed = seed;
            const RunOutcome res = run_stream(ro);
            emit(out, res.doc.dump(2) + "\n");
            if (check) {
                std::cerr << (res.check_ok ? "replay check passed" : "replay check FAILED") << " (max |diff| "
                          << res.doc["check"]["max_abs_diff"].get<double>() << ")\n";
            }
            return res.check_ok ? kExitOk : kExitFailure;
        }
        if (app.got_subcommand(train)) {
            TrainOptions to;
            to.config = load_run_config(config);
            if (steps_set) {
                to.config.train.steps = steps;
            }
            if (seed_set) {
                to.config.train.seed = seed;
            }
            to.out = out;
            to.metrics = metrics;
            to.resume = resume;
            const TrainOutcome res = train_to_checkpoint(to);
            std::cerr << "trained steps " << res.first_step << ".." << res.checkpoint.state.step << " in " << res.seconds
                      << " s; checkpoint " << out << "\n";
            if (res.diverged) {
                std::cerr << "error: " << res.checkpoint.failure << " (partial checkpoint marked failed)\n";
                return kExitFailure;
            }
            return kExitOk;
        }
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ParameterError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}
