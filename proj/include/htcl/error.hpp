// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace htcl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or parameter layouts that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid input values (NaN, singular matrices, empty reductions, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Configuration problems; the message starts with the offending field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NotImplementedError : public Error {
 public:
  using Error::Error;
};

}  // namespace htcl
