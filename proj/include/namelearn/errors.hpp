// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace namelearn {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed by a numeric operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Zero-norm feature passed to a cosine operation.
class DegenerateFeatureError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or mismatched file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, flag or precondition violation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace namelearn
