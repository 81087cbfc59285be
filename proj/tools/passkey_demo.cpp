// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

// Passkey walkthrough: train (or load) the SWA+LTE toy model, show what the constant-size cache
// keeps for one far-needle stream, and report retrieval accuracy near and far.
//
//   passkey_demo                 train the default recipe (a few minutes on one core)
//   passkey_demo model.ckpt      reuse a checkpoint written by `evictd train`

#include <cstdio>
#include <string>

#include "evictd/harness.hpp"

using namespace evictd;

int main(int argc, char** argv) {
    try {
        ModelParams params;
        TrainConfig train;
        if (argc > 1) {
            const Checkpoint ck = load_checkpoint(argv[1]);
            params = ck.state.params;
            train = ck.train;
            std::printf("loaded %s (step %zu)\n", argv[1], ck.state.step);
        } else {
            const ModelConfig m = ModelConfig::preset("toy");
            std::printf("training pattern %s for %zu steps...\n", m.pattern.c_str(), train.steps);
            const TrainResult r = train_toy(m, train, [](const MetricsRecord& rec) {
                if ((rec.step + 1) % 250 == 0) {
                    std::printf("  step %5zu  loss %.3f\n", rec.step + 1, rec.loss);
                }
            });
            if (r.diverged) {
                std::fprintf(stderr, "training diverged: %s\n", r.failure.c_str());
                return 1;
            }
            params = r.state.params;
            std::printf("done in %.0f s\n", r.seconds);
        }
        const ModelConfig& c = params.config;
        PasskeyConfig task = train.task;
        task.seq_len = c.seq_len;

        const std::size_t far = 4 * c.window + 1;
        const PasskeySample s = passkey_task(7, c.seq_len, far + 10, task);
        InferenceSession session(params);
        const Tensor logits = session.prefill(s.tokens);
        std::printf("\nstream of %zu tokens, needle at %zu, value %d at %zu, query at %zu (w = %zu, b = %zu)\n", s.tokens.size(),
                    s.needle_pos, s.answer, s.value_pos, s.query_pos, c.window, c.capacity);
        for (std::size_t l = 0; l < c.layers(); ++l) {
            const LteLayerCache* cache = session.cache(l);
            if (!cache) {
                continue;
            }
            for (std::size_t h = 0; h < c.heads; ++h) {
                std::printf("  layer %zu head %zu keeps out of window:", l, h);
                for (std::size_t p : cache->head(h).out_positions()) {
                    std::printf(" %zu%s", p, p == s.value_pos ? "*" : "");
                }
                std::printf("\n");
            }
        }
        const int guess = static_cast<int>(argmax_row(logits, s.query_pos));
        std::printf("  prediction %d, answer %d: %s   (* marks the value token)\n\n", guess, s.answer, guess == s.answer ? "hit" : "miss");

        PasskeyConfig near = task;
        near.near_fraction = 1.0;
        near.near_distance = c.window - 1;
        std::printf("accuracy, distance < w:    %.2f\n", passkey_accuracy(params, near, 100, 1, 2));
        std::printf("accuracy, distance > 4w:   %.2f\n", passkey_accuracy(params, task, 100, 1, far));
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
