// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace evictd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A numeric parameter outside its documented domain (odd head dim, p >= 1, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// A model or cache configuration that violates an invariant (b < s, w < R, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A caller broke a documented precondition of a stateful component.
class ContractViolation : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required.
class EvaluationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

#define EVICTD_CHECK(cond, ErrorType, msg)                 \
    do {                                                   \
        if (!(cond)) {                                     \
            throw ErrorType(std::string(msg));             \
        }                                                  \
    } while (false)

}  // namespace evictd
