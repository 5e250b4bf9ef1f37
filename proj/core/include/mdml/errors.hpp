#pragma once

#include <stdexcept>
#include <string>

namespace mdml {

// Every failure raised by the library derives from Error. The CLI maps each
// category onto a stable process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatches between matrices or model inputs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Out-of-domain arguments (t <= 0, BCE targets outside {0,1}, negative margins, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. calling backward on a non-scalar node.
class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or insufficient input data, including schema and mapping failures.
class DataError : public Error {
 public:
  using Error::Error;
};

// Rows from a forbidden pool reached a place they must never reach.
class LeakageError : public DataError {
 public:
  using DataError::DataError;
};

// Meta-OOD and held-out family sets overlap.
class DisjointnessError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Non-finite values or a loss above the divergence guard.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Internal contract broken (theta drift during an outer step, gradient leak, ...).
class InvariantError : public Error {
 public:
  using Error::Error;
};

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kConfig = 2;
inline constexpr int kData = 3;
inline constexpr int kDivergence = 4;
inline constexpr int kInvariant = 5;
}  // namespace exit_code

}  // namespace mdml
