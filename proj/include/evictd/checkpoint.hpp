// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "evictd/trainer.hpp"

// JSON checkpoint container, run manifests and atomic file output.

namespace evictd {

inline constexpr const char* kCheckpointMagic = "EVICTD-CKPT";
inline constexpr int kCheckpointVersion = 1;

/// Writes to a sibling temporary file and renames it over the target.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        EVICTD_CHECK(out.good(), IoError, "cannot open '" + tmp.string() + "' for writing");
        out << content;
        out.flush();
        EVICTD_CHECK(out.good(), IoError, "write to '" + tmp.string() + "' failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    EVICTD_CHECK(!ec, IoError, "cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    EVICTD_CHECK(in.good(), IoError, "cannot open '" + path.string() + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline std::string hex64(std::uint64_t x) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << x;
    return os.str();
}

struct RunManifest {
    std::string command;
    std::uint64_t seed = 0;
    nlohmann::json config;
    std::string params_hash;
    std::vector<std::string> outputs;
};

inline nlohmann::json manifest_json(const RunManifest& m) {
    return nlohmann::json{{"command", m.command},
                          {"seed", m.seed},
                          {"config", m.config},
                          {"params_hash", m.params_hash},
                          {"outputs", m.outputs}};
}

inline nlohmann::json tensor_json(const Tensor& t) {
    return nlohmann::json{{"shape", t.shape()}, {"data", t.storage()}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

inline nlohmann::json param_map_json(const ParamMap& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, t] : m) {
        j[name] = tensor_json(t);
    }
    return j;
}

inline ParamMap param_map_from_json(const nlohmann::json& j) {
    ParamMap m;
    for (auto it = j.begin(); it != j.end(); ++it) {
        m.emplace(it.key(), tensor_from_json(it.value()));
    }
    return m;
}

struct Checkpoint {
    TrainState state;
    TrainConfig train;
    bool failed = false;
    std::string failure;
    RunManifest manifest;
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    nlohmann::json j;
    j["magic"] = kCheckpointMagic;
    j["version"] = kCheckpointVersion;
    j["status"] = ck.failed ? "failed" : "ok";
    if (ck.failed) {
        j["failure"] = ck.failure;
    }
    j["config"] = ck.state.params.config;
    j["train"] = ck.train;
    j["step"] = ck.state.step;
    j["tensors"] = param_map_json(ck.state.params.tensors);
    j["optimizer"] = {{"m", param_map_json(ck.state.adam_m)}, {"v", param_map_json(ck.state.adam_v)}};
    if (ck.state.lambda.size() > 0) {
        j["controller"] = {{"lambda", tensor_json(ck.state.lambda)},
                           {"c_bar", tensor_json(ck.state.c_bar)},
                           {"seen", ck.state.controller_seen}};
    }
    j["manifest"] = manifest_json(ck.manifest);
    return j.dump();
}

inline Checkpoint parse_checkpoint(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    EVICTD_CHECK(j.value("magic", std::string()) == kCheckpointMagic, IoError, "not a checkpoint (bad magic)");
    EVICTD_CHECK(j.value("version", 0) == kCheckpointVersion,
                 IoError,
                 "unsupported checkpoint version " + std::to_string(j.value("version", 0)));
    Checkpoint ck;
    try {
        ck.state.params.config = j.at("config").get<ModelConfig>();
        ck.state.params.tensors = param_map_from_json(j.at("tensors"));
        ck.train = j.at("train").get<TrainConfig>();
        ck.state.step = j.at("step").get<std::size_t>();
        ck.state.adam_m = param_map_from_json(j.at("optimizer").at("m"));
        ck.state.adam_v = param_map_from_json(j.at("optimizer").at("v"));
        if (j.contains("controller")) {
            ck.state.lambda = tensor_from_json(j["controller"].at("lambda"));
            ck.state.c_bar = tensor_from_json(j["controller"].at("c_bar"));
            ck.state.controller_seen = j["controller"].at("seen").get<bool>();
        }
        if (j.contains("manifest")) {
            const auto& m = j["manifest"];
            ck.manifest = RunManifest{m.at("command").get<std::string>(), m.at("seed").get<std::uint64_t>(), m.at("config"),
                                      m.at("params_hash").get<std::string>(), m.at("outputs").get<std::vector<std::string>>()};
        }
        ck.failed = j.value("status", std::string("ok")) != "ok";
        ck.failure = j.value("failure", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed checkpoint: ") + e.what());
    }
    for (const auto& spec : parameter_specs(ck.state.params.config)) {
        EVICTD_CHECK(ck.state.params.at(spec.name).shape() == spec.shape,
                     IoError,
                     "checkpoint tensor '" + spec.name + "' has shape " + shape_str(ck.state.params.at(spec.name).shape()) +
                         ", expected " + shape_str(spec.shape));
    }
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    write_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    EVICTD_CHECK(std::filesystem::exists(path), IoError, "checkpoint '" + path.string() + "' does not exist");
    return parse_checkpoint(read_file(path));
}

}  // namespace evictd
