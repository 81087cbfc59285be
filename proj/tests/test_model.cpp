// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>

#include "evictd/checkpoint.hpp"
#include "evictd/harness.hpp"
#include "support.hpp"

using namespace evictd;
using evictd::testing::TempDir;

namespace {

ModelConfig cached_model(std::size_t window, std::size_t capacity) {
    ModelConfig c = ModelConfig::preset("toy");
    c.pattern = "GLSL";
    c.window = window;
    c.capacity = capacity;
    return c;
}

}  // namespace

TEST(Config, PresetsHaveTheDocumentedShape) {
    const ModelConfig small = ModelConfig::preset("0.4b-shape");
    EXPECT_EQ(small.layers(), 24u);
    EXPECT_EQ(small.lte_layers(), 12u);
    EXPECT_EQ(small.d_model, 1024u);
    EXPECT_EQ(ModelConfig::preset("1.4b-shape").d_model, 2048u);
    EXPECT_THROW(ModelConfig::preset("7b"), ConfigError);
    EXPECT_THROW(ModelConfig::preset("1.4b-shape").validate_runnable(), ConfigError);
}

TEST(Config, InvariantViolationsAreConfigErrors) {
    ModelConfig c = ModelConfig::preset("toy");
    c.window = kReceptiveField - 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c.pattern = "GS";  // no LTE layer: the receptive-field bound does not apply
    EXPECT_NO_THROW(c.validate());
    c = ModelConfig::preset("toy");
    c.capacity = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ModelConfig::preset("toy");
    c.pattern = "GXL";
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
    ModelConfig c = cached_model(20, 7);
    c.rope_base = 500.0;
    const nlohmann::json j = c;
    EXPECT_EQ(j.get<ModelConfig>().capacity, 7u);
    EXPECT_EQ(j.get<ModelConfig>().pattern, "GLSL");
    EXPECT_EQ(j.get<ModelConfig>().rope_base, 500.0);
    EXPECT_EQ(nlohmann::json(j.get<ModelConfig>()), j);
}

TEST(Inference, DecodeReplaysAgainstTheHistoryOracle) {
    // w = 32, b = 8: the untrained scorer flags most tokens, so the cap binds
    const ModelConfig c = cached_model(32, 8);
    const ModelParams m = ModelParams::init(c, 3);
    InferenceSession s(m, ScoringPolicy::lazy, true);
    const auto ids = random_stream(c.vocab, 300, 4);
    s.prefill(std::vector<int>(ids.begin(), ids.begin() + 40));
    for (std::size_t t = 40; t < ids.size(); ++t) {
        s.decode(ids[t]);
    }
    const ReplayReport rep = replay_check(s, 1e-10, true);
    EXPECT_TRUE(rep.ok) << rep.max_abs_diff;
    EXPECT_EQ(rep.layers_checked, 2u);
    EXPECT_EQ(rep.rows_checked, 2u * 260u);
    EXPECT_EQ(s.cache(1)->head(0).occupancy(), 8u);
}

TEST(Inference, BelowTheCapDecodeMatchesTheTrainingForward) {
    const ModelConfig c = cached_model(16, 200);
    const ModelParams m = ModelParams::init(c, 5);
    const auto ids = random_stream(c.vocab, 120, 6);
    const SinusoidTable table(c.head_dim, c.rope_base);
    const Tensor full = evaluate_logits(m, ids, table);
    InferenceSession s(m);
    const Tensor pre = s.prefill(std::vector<int>(ids.begin(), ids.begin() + 30));
    double worst = 0.0;
    for (std::size_t t = 0; t < 30; ++t) {
        for (std::size_t v = 0; v < c.vocab; ++v) {
            worst = std::max(worst, std::abs(pre(t, v) - full(t, v)));
        }
    }
    for (std::size_t t = 30; t < ids.size(); ++t) {
        const Tensor row = s.decode(ids[t]);
        for (std::size_t v = 0; v < c.vocab; ++v) {
            worst = std::max(worst, std::abs(row(0, v) - full(t, v)));
        }
    }
    EXPECT_LT(worst, 1e-9);
}

TEST(Inference, LazyAndEagerScoringAgree) {
    const ModelConfig c = cached_model(16, 6);
    const ModelParams m = ModelParams::init(c, 7);
    const auto ids = random_stream(c.vocab, 150, 8);
    InferenceSession lazy(m, ScoringPolicy::lazy), eager(m, ScoringPolicy::eager);
    lazy.prefill({ids.front()});
    eager.prefill({ids.front()});
    for (std::size_t t = 1; t < ids.size(); ++t) {
        EXPECT_LT(max_abs_diff(lazy.decode(ids[t]), eager.decode(ids[t])), 1e-10);
    }
    EXPECT_LT(lazy.cache(1)->scorer_invocations(), eager.cache(1)->scorer_invocations());
}

TEST(Inference, RejectsMisuse) {
    ModelConfig c = ModelConfig::preset("toy");
    const ModelParams m = ModelParams::init(c, 1);
    InferenceSession s(m);
    EXPECT_THROW(s.prefill({}), ParameterError);
    s.prefill({1, 2, 3});
    EXPECT_THROW(s.prefill({1}), ContractViolation);
    EXPECT_THROW(s.decode(static_cast<int>(c.vocab)), ParameterError);
    c.frozen_retention = true;
    const ModelParams frozen = ModelParams::init(c, 1);
    EXPECT_THROW(InferenceSession{frozen}, ConfigError);
}

TEST(Params, InitIsDeterministicAndHashed) {
    const ModelConfig c = ModelConfig::preset("toy");
    const ModelParams a = ModelParams::init(c, 11), b = ModelParams::init(c, 11), other = ModelParams::init(c, 12);
    EXPECT_EQ(a.content_hash(), b.content_hash());
    EXPECT_NE(a.content_hash(), other.content_hash());
    for (const auto& spec : parameter_specs(c)) {
        EXPECT_EQ(a.at(spec.name).shape(), spec.shape) << spec.name;
    }
}

TEST(Checkpoint, RoundTripPreservesEverything) {
    TempDir dir("ckpt_roundtrip");
    const ModelConfig c = ModelConfig::preset("toy");
    TrainConfig t;
    t.steps = 2;
    t.batch = 2;
    t.dense_warmup = 0;
    t.update_period = 1;
    const TrainResult r = train_toy(c, t);
    Checkpoint ck{r.state, t, false, {}, {}};
    save_checkpoint(dir.file("a.ckpt"), ck);
    const Checkpoint back = load_checkpoint(dir.file("a.ckpt"));
    EXPECT_EQ(back.state.step, 2u);
    EXPECT_EQ(back.state.params.content_hash(), r.state.params.content_hash());
    EXPECT_EQ(back.state.lambda, r.state.lambda);
    EXPECT_EQ(back.state.c_bar, r.state.c_bar);
    for (const auto& [n, x] : r.state.adam_v) {
        EXPECT_EQ(back.state.adam_v.at(n), x) << n;
    }
    EXPECT_EQ(back.train.steps, 2u);
    EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
}

TEST(Checkpoint, BadInputsAreIoErrors) {
    TempDir dir("ckpt_bad");
    EXPECT_THROW(load_checkpoint(dir.file("missing.ckpt")), IoError);
    std::ofstream(dir.file("junk.ckpt")) << "not json";
    EXPECT_THROW(load_checkpoint(dir.file("junk.ckpt")), IoError);
    std::ofstream(dir.file("magic.ckpt")) << R"({"magic":"OTHER","version":1})";
    EXPECT_THROW(load_checkpoint(dir.file("magic.ckpt")), IoError);
    std::ofstream(dir.file("version.ckpt")) << R"({"magic":"EVICTD-CKPT","version":99})";
    EXPECT_THROW(load_checkpoint(dir.file("version.ckpt")), IoError);

    const ModelConfig c = ModelConfig::preset("toy");
    Checkpoint ck;
    ck.state.params = ModelParams::init(c, 1);
    nlohmann::json j = nlohmann::json::parse(serialize_checkpoint(ck));
    j["config"]["d_model"] = 64;  // tensors no longer fit the declared shape
    std::ofstream(dir.file("shape.ckpt")) << j.dump();
    EXPECT_THROW(load_checkpoint(dir.file("shape.ckpt")), Error);
}
