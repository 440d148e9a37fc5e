// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace tristream {

// Every error raised by the library derives from Error. The CLI maps the
// subclasses onto its exit codes (data errors -> 3, numeric failures -> 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: bad hyperparameters, fully masked attention rows,
// unsupported modality combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or a failed numerical check.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed corpus records, bad checkpoints, checksum failures.
class DataError : public Error {
 public:
  using Error::Error;
};

// The streaming scheduler tried to reference state that does not exist yet.
class SchedulingError : public Error {
 public:
  using Error::Error;
};

// Misuse of the autodiff graph (non-scalar loss, consumed graph).
class GraphError : public Error {
 public:
  using Error::Error;
};

}  // namespace tristream
