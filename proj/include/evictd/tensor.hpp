// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "evictd/errors.hpp"

namespace evictd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/**
 * Dense row-major tensor with value semantics.
 *
 * Element (i0, i1, ..., ik) lives at the usual row-major offset. The scalar type is a template
 * parameter so the same kernels run in double (tests, training) and float (benchmarks).
 */
template <typename Scalar>
class BasicTensor {
public:
    using value_type = Scalar;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape) : m_shape(std::move(shape)), m_data(shape_size(m_shape), Scalar{0}) {}

    BasicTensor(Shape shape, std::vector<Scalar> data) : m_shape(std::move(shape)), m_data(std::move(data)) {
        EVICTD_CHECK(shape_size(m_shape) == m_data.size(),
                     DimensionError,
                     "tensor data length " + std::to_string(m_data.size()) + " does not match shape " +
                         shape_str(m_shape));
    }

    static BasicTensor zeros(Shape shape) {
        return BasicTensor(std::move(shape));
    }

    static BasicTensor filled(Shape shape, Scalar value) {
        BasicTensor t(std::move(shape));
        std::fill(t.m_data.begin(), t.m_data.end(), value);
        return t;
    }

    static BasicTensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
        const std::size_t n = rows.size();
        const std::size_t m = n ? rows.begin()->size() : 0;
        std::vector<Scalar> data;
        data.reserve(n * m);
        for (const auto& row : rows) {
            EVICTD_CHECK(row.size() == m, DimensionError, "ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return BasicTensor({n, m}, std::move(data));
    }

    static BasicTensor vector(std::initializer_list<Scalar> values) {
        return BasicTensor({values.size()}, std::vector<Scalar>(values));
    }

    const Shape& shape() const {
        return m_shape;
    }
    std::size_t rank() const {
        return m_shape.size();
    }
    std::size_t dim(std::size_t axis) const {
        return m_shape.at(axis);
    }
    std::size_t size() const {
        return m_data.size();
    }
    bool empty() const {
        return m_data.empty();
    }
    std::size_t rows() const {
        return m_shape.empty() ? 0 : m_shape.front();
    }
    /// Product of all but the leading dimension.
    std::size_t cols() const {
        return m_shape.empty() ? 0 : m_data.size() / std::max<std::size_t>(m_shape.front(), 1);
    }

    std::span<Scalar> data() {
        return m_data;
    }
    std::span<const Scalar> data() const {
        return m_data;
    }
    std::vector<Scalar>& storage() {
        return m_data;
    }
    const std::vector<Scalar>& storage() const {
        return m_data;
    }

    Scalar& operator[](std::size_t i) {
        return m_data[i];
    }
    const Scalar& operator[](std::size_t i) const {
        return m_data[i];
    }

    Scalar& operator()(std::size_t i, std::size_t j) {
        return m_data[i * m_shape[1] + j];
    }
    const Scalar& operator()(std::size_t i, std::size_t j) const {
        return m_data[i * m_shape[1] + j];
    }

    Scalar& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return m_data[(i * m_shape[1] + j) * m_shape[2] + k];
    }
    const Scalar& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return m_data[(i * m_shape[1] + j) * m_shape[2] + k];
    }

    std::span<Scalar> row(std::size_t i) {
        const std::size_t c = cols();
        return std::span<Scalar>(m_data).subspan(i * c, c);
    }
    std::span<const Scalar> row(std::size_t i) const {
        const std::size_t c = cols();
        return std::span<const Scalar>(m_data).subspan(i * c, c);
    }

    BasicTensor reshaped(Shape shape) const {
        return BasicTensor(std::move(shape), m_data);
    }

    template <typename Other>
    BasicTensor<Other> cast() const {
        return BasicTensor<Other>(m_shape, std::vector<Other>(m_data.begin(), m_data.end()));
    }

    bool all_finite() const {
        for (Scalar x : m_data) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
        return true;
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.m_shape == b.m_shape && a.m_data == b.m_data;
    }

private:
    Shape m_shape;
    std::vector<Scalar> m_data;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

template <typename Scalar>
Scalar max_abs_diff(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
    EVICTD_CHECK(a.shape() == b.shape(),
                 DimensionError,
                 "max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Scalar worst{0};
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max<Scalar>(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

}  // namespace evictd
