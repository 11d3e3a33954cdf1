#pragma once

#include <stdexcept>
#include <string>

namespace flexio {

// Base class for all library errors. Callers that only need to distinguish
// "bad arguments" from "runtime failure" can catch the two families below.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes, lengths or counts that violate an operation's preconditions.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Inconsistent configuration (divisibility, out-of-range indices, unknown keys).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Reference signal unusable as a target (all zeros).
class InvalidTarget : public Error {
 public:
  using Error::Error;
};

// Exhaustive search that would be too expensive (PIT with large N).
class ComplexityError : public Error {
 public:
  using Error::Error;
};

// Dataset problems: missing groups, unreadable files, inconsistent manifests.
class DataError : public Error {
 public:
  using Error::Error;
};

// Numerical failure during optimisation (non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace flexio
