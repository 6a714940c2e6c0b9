// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace convqa {

// Base of every library error. The CLI maps UsageError to exit code 2 and
// everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Numerically invalid input (NaN, log of a non-positive value).
class ComputationError : public Error {
 public:
  using Error::Error;
};

// An index (token id, label position) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// A caller broke an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input data is internally inconsistent (corpus fields disagree).
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// A file could not be parsed (malformed, truncated).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Bad command line.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace convqa
