#pragma once

#include <stdexcept>
#include <string>

namespace l2p {

/// Base class for all library errors. Subclasses map to CLI exit codes:
/// ConfigError -> 2, DatasetError -> 3, NumericError / ContractError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad flag value, infeasible spec, lr <= 0, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (parse failures, mask overlap, ...).
class DatasetError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or degenerate numerics encountered mid-computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// API misuse: violated precondition, double backward, non-deterministic
/// function handed to the gradient checker.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Incompatible tensor dimensions. A flavor of contract violation.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

}  // namespace l2p
