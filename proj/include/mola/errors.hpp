// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mola {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or dimensions.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value (channel divisibility, temperatures, modes...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// NaN / non-finite values where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// An operation was called outside its documented contract.
class ContractError : public Error {
public:
    using Error::Error;
};

/// A domain invariant (one-hot rows, simplex rows) does not hold.
class InvariantError : public Error {
public:
    using Error::Error;
};

/// Missing or malformed data (metric tables, datasets, checkpoints).
class DataError : public Error {
public:
    using Error::Error;
};

/// A function expected to be deterministic returned different results.
class DeterminismError : public Error {
public:
    using Error::Error;
};

}  // namespace mola
