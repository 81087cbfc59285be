// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "evictd/errors.hpp"
#include "evictd/tensor.hpp"

// Feedback loop that adapts the per-(layer, head) sparsity weight lambda so the moving average of
// retained-token counts settles just under the cap b.

namespace evictd {

struct ControllerConfig {
    std::size_t layers = 1;
    std::size_t heads = 1;
    long period = 32;          // u
    double step_factor = 1.2;  // multiplicative adjustment
    double cap = 16.0;         // b
    double lambda_init = 1e-9;
    double floor = 1e-9;       // entries below this are zeroed; also the re-enable value
    double ceiling = 1.0;
    double dead_band = 0.95;   // no change while dead_band*b <= c_bar <= b

    double ema_coefficient() const {
        return 2.0 / (1.0 + static_cast<double>(period) / 2.0);
    }

    void validate() const {
        EVICTD_CHECK(period > 0, ConfigError, "controller: update period u must be positive");
        EVICTD_CHECK(step_factor > 1.0, ConfigError, "controller: step factor must exceed 1");
        EVICTD_CHECK(cap >= 0.0 && layers >= 1 && heads >= 1, ConfigError, "controller: bad cap or geometry");
    }
};

class SparsityController {
public:
    /// Cross-worker reduction of c_bar before an update; identity for a single worker.
    using SyncHook = std::function<void(Tensor& c_bar)>;

    explicit SparsityController(ControllerConfig cfg) : m_cfg(cfg) {
        m_cfg.validate();
        m_lambda = Tensor::filled({cfg.layers, cfg.heads}, cfg.lambda_init);
        m_cbar = Tensor({cfg.layers, cfg.heads});
    }

    const ControllerConfig& config() const {
        return m_cfg;
    }
    const Tensor& lambda() const {
        return m_lambda;
    }
    const Tensor& c_bar() const {
        return m_cbar;
    }
    bool initialised() const {
        return m_seen;
    }
    void set_sync(SyncHook hook) {
        m_sync = std::move(hook);
    }

    /// Restores saved state (checkpoint resume).
    void restore(Tensor lambda, Tensor c_bar, bool seen) {
        EVICTD_CHECK(lambda.shape() == m_lambda.shape() && c_bar.shape() == m_cbar.shape(),
                     DimensionError,
                     "controller: restored state has the wrong shape");
        m_lambda = std::move(lambda);
        m_cbar = std::move(c_bar);
        m_seen = seen;
    }

    /**
     * One training step worth of bookkeeping, after the optimizer step: EMA of counts, then on
     * steps divisible by u the lambda update (scale by factor^s, clamp, eliminate, re-enable).
     * Returns true when lambda was updated.
     */
    bool update(const Tensor& counts, long step) {
        EVICTD_CHECK(counts.shape() == m_lambda.shape(), DimensionError, "controller: counts must be [layers x heads]");
        const double a = m_cfg.ema_coefficient();
        for (std::size_t i = 0; i < counts.size(); ++i) {
            EVICTD_CHECK(counts[i] >= 0.0, ParameterError, "controller: negative retained count");
            m_cbar[i] = m_seen ? a * m_cbar[i] + (1.0 - a) * counts[i] : counts[i];
        }
        m_seen = true;
        if (step % m_cfg.period != 0) {
            return false;
        }
        if (m_sync) {
            m_sync(m_cbar);
        }
        const double b = m_cfg.cap;
        for (std::size_t i = 0; i < m_lambda.size(); ++i) {
            const double c = m_cbar[i];
            const int s = (c > b ? 1 : 0) - (c < m_cfg.dead_band * b ? 1 : 0);
            double l = m_lambda[i] * std::pow(m_cfg.step_factor, s);
            l = std::min(l, m_cfg.ceiling);
            if (l < m_cfg.floor) {
                l = 0.0;
            }
            if (c > b && l == 0.0) {
                l = m_cfg.floor;
            }
            m_lambda[i] = l;
        }
        return true;
    }

private:
    ControllerConfig m_cfg;
    Tensor m_lambda;
    Tensor m_cbar;
    bool m_seen = false;
    SyncHook m_sync;
};

}  // namespace evictd
