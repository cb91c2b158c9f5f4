#pragma once

#include <stdexcept>
#include <string>

namespace pgd {

// Base class for every error raised by the library. Each subclass maps to a
// distinct CLI exit code (see tools/pgd_main.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible shapes, channel counts, or extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside an operation's mathematical domain (e.g. log of 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during a computation, or a numeric abort in training.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem and serialization failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint does not match the requested model configuration.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace pgd
