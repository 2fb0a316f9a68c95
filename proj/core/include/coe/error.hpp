#pragma once

#include <stdexcept>

namespace coe {

// Base class for all coelab errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required (NaN inputs, NaN loss/grad).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Out-of-range indices (token ids, class targets).
class IndexError : public Error {
 public:
  using Error::Error;
};

// API misuse (non-scalar backward root, bad argument ranges).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration, rejected before any compute.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// File I/O and serialization failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace coe
