// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cgsd {

/// Bad hyperparameters, bounds or CLI input. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent data. The CLI maps this to exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};

/// Checkpoint written by an incompatible format version.
class VersionError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite loss or similar numeric breakdown. Exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated an API precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

}  // namespace cgsd
