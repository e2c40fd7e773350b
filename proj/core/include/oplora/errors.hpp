// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace oplora {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand dimensions disagree, or an index is out of range.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A symmetric system that must be positive definite is not (within tolerance).
class SingularMetricError : public Error {
public:
    SingularMetricError(const std::string& what, std::size_t pivot, char side = '?', int iteration = -1)
        : Error(what), pivot_(pivot), side_(side), iteration_(iteration) {}

    std::size_t pivot() const noexcept { return pivot_; }
    /// 'U', 'V' or '?' when raised outside of lorsum.
    char side() const noexcept { return side_; }
    int iteration() const noexcept { return iteration_; }

private:
    std::size_t pivot_;
    char side_;
    int iteration_;
};

class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public Error {
public:
    using Error::Error;
};

/// A dense full-size operation was requested where it is not allowed.
class PolicyError : public Error {
public:
    using Error::Error;
};

/// An optimizer step found no fresh forward/backward capture to consume.
class StaleCaptureError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    ConfigError(const std::string& field, const std::string& what)
        : Error(field + ": " + what), field_(field) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

} // namespace oplora
