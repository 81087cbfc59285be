// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "evictd/tensor.hpp"

namespace evictd {

using Rng = std::mt19937_64;

inline std::uint64_t fnv1a64(std::string_view text, std::uint64_t hash = 1469598103934665603ULL) {
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 1099511628211ULL;
    }
    return hash;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Independent stream per (seed, name) so adding a parameter never shifts another one's draws.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
    return splitmix64(seed ^ fnv1a64(name));
}

template <typename Scalar = double>
BasicTensor<Scalar> uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    BasicTensor<Scalar> t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : t.storage()) {
        x = static_cast<Scalar>(dist(rng));
    }
    return t;
}

template <typename Scalar = double>
BasicTensor<Scalar> normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
    BasicTensor<Scalar> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.storage()) {
        x = static_cast<Scalar>(dist(rng));
    }
    return t;
}

}  // namespace evictd
