// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cmath>
#include <deque>
#include <mutex>
#include <vector>

#include "evictd/autodiff.hpp"
#include "evictd/tensor.hpp"

namespace evictd {

/**
 * Cached cos/sin values of the rotary encoding, indexed by (position, frequency).
 *
 * Dimensions are rotated in interleaved pairs (2i, 2i+1) by angle position * base^(-2i/head_dim).
 * The table grows on demand; growth is serialised by a mutex and existing rows never move, so
 * readers of already-materialised positions need no lock. Call reserve() before sharing a table
 * between threads that may extend it.
 */
class SinusoidTable {
public:
    explicit SinusoidTable(std::size_t head_dim, double base = 10000.0) : m_base(base) {
        EVICTD_CHECK(head_dim % 2 == 0 && head_dim > 0, ParameterError, "rope: head dimension must be even");
        m_freqs.resize(head_dim / 2);
        for (std::size_t i = 0; i < m_freqs.size(); ++i) {
            m_freqs[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        }
    }

    /// Table with explicit per-pair angular frequencies.
    static SinusoidTable with_frequencies(std::vector<double> freqs) {
        SinusoidTable t(2 * freqs.size());
        t.m_freqs = std::move(freqs);
        return t;
    }

    SinusoidTable(const SinusoidTable& other) : m_base(other.m_base), m_freqs(other.m_freqs) {}

    std::size_t head_dim() const {
        return 2 * m_freqs.size();
    }
    std::size_t half_dim() const {
        return m_freqs.size();
    }
    double base() const {
        return m_base;
    }
    double frequency(std::size_t i) const {
        return m_freqs[i];
    }

    void reserve(std::size_t positions) const {
        if (positions > m_ready.load(std::memory_order_acquire)) {
            extend(positions);
        }
    }

    const double* cos_row(std::size_t position) const {
        reserve(position + 1);
        return m_cos[position].data();
    }
    const double* sin_row(std::size_t position) const {
        reserve(position + 1);
        return m_sin[position].data();
    }

private:
    void extend(std::size_t positions) const {
        std::lock_guard<std::mutex> lock(m_mutex);
        while (m_cos.size() < positions) {
            const double p = static_cast<double>(m_cos.size());
            std::vector<double> c(m_freqs.size()), s(m_freqs.size());
            for (std::size_t i = 0; i < m_freqs.size(); ++i) {
                c[i] = std::cos(p * m_freqs[i]);
                s[i] = std::sin(p * m_freqs[i]);
            }
            m_cos.push_back(std::move(c));
            m_sin.push_back(std::move(s));
        }
        m_ready.store(m_cos.size(), std::memory_order_release);
    }

    double m_base;
    std::vector<double> m_freqs;
    mutable std::deque<std::vector<double>> m_cos;
    mutable std::deque<std::vector<double>> m_sin;
    mutable std::atomic<std::size_t> m_ready{0};
    mutable std::mutex m_mutex;
};

namespace detail {

// Rotates every head slice of `row` by the table angle at `position`; sign=-1 rotates backwards
// (same cos, negated sin).
template <typename Scalar>
void rotate_row(Scalar* row, std::size_t width, std::size_t position, const SinusoidTable& table, double sign) {
    const std::size_t hd = table.head_dim();
    const double* c = table.cos_row(position);
    const double* s = table.sin_row(position);
    for (std::size_t base = 0; base < width; base += hd) {
        for (std::size_t i = 0; i < hd / 2; ++i) {
            const double x0 = static_cast<double>(row[base + 2 * i]);
            const double x1 = static_cast<double>(row[base + 2 * i + 1]);
            const double sn = sign * s[i];
            row[base + 2 * i] = static_cast<Scalar>(x0 * c[i] - x1 * sn);
            row[base + 2 * i + 1] = static_cast<Scalar>(x0 * sn + x1 * c[i]);
        }
    }
}

template <typename Scalar>
void check_rope_args(const BasicTensor<Scalar>& x, const std::vector<std::size_t>& positions, const SinusoidTable& table) {
    EVICTD_CHECK(table.head_dim() % 2 == 0, ParameterError, "rope: head dimension must be even");
    EVICTD_CHECK(x.rank() == 2 && x.dim(1) % table.head_dim() == 0,
                 ParameterError,
                 "rope: row width must be a multiple of the (even) head dimension");
    EVICTD_CHECK(positions.size() == x.dim(0), DimensionError, "rope: need one position per row");
}

}  // namespace detail

/// Rotates row t (all heads) of x [T x heads*head_dim] by its position.
template <typename Scalar>
BasicTensor<Scalar> apply_rope(const BasicTensor<Scalar>& x,
                               const std::vector<std::size_t>& positions,
                               const SinusoidTable& table) {
    detail::check_rope_args(x, positions, table);
    BasicTensor<Scalar> out = x;
    for (std::size_t t = 0; t < x.dim(0); ++t) {
        detail::rotate_row(out.data().data() + t * x.dim(1), x.dim(1), positions[t], table, 1.0);
    }
    return out;
}

/**
 * Undoes the rotation of row t at absolute position positions[t] + offset using the cached
 * sinusoids with negated sine. With positions = slot indices 0..n-1 of a window whose slot 0 holds
 * absolute position `offset`, this recovers the pre-rotation keys of the whole window.
 */
template <typename Scalar>
BasicTensor<Scalar> invert_rope(const BasicTensor<Scalar>& x_rotated,
                                const std::vector<std::size_t>& positions,
                                std::size_t offset,
                                const SinusoidTable& table) {
    detail::check_rope_args(x_rotated, positions, table);
    BasicTensor<Scalar> out = x_rotated;
    for (std::size_t t = 0; t < x_rotated.dim(0); ++t) {
        detail::rotate_row(out.data().data() + t * x_rotated.dim(1), x_rotated.dim(1), positions[t] + offset, table, -1.0);
    }
    return out;
}

namespace ad {

/// Differentiable rotary encoding; the backward pass is the inverse rotation.
inline Var rope(Var x, const std::vector<std::size_t>& positions, const SinusoidTable& table) {
    Tensor out = apply_rope(x.value(), positions, table);
    return x.tape->record(std::move(out), {x}, [x, positions, &table](Tape& t, const Tensor& g) {
        t.accumulate(x, invert_rope(g, positions, 0, table));
    });
}

}  // namespace ad

}  // namespace evictd
