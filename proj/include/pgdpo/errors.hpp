// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pgdpo {

/// Caller broke a precondition (bad shape, mixed tapes, invalid sizes).
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of a function (e.g. U(c) for c <= 0).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Non-finite value produced during a computation.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what, std::size_t where = npos)
        : std::runtime_error(what), where_(where) {}

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    /// Tape node, path, or coordinate index associated with the failure (npos if none).
    std::size_t where() const noexcept { return where_; }

private:
    std::size_t where_;
};

/// Invalid run configuration; the message names the offending field.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint file unreadable, corrupted or of an incompatible version.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace pgdpo
