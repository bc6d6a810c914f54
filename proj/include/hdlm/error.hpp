#pragma once

#include <stdexcept>
#include <string>

namespace hdlm {

/// Malformed invocation or configuration (CLI exit code 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data that violates a schema or dataset invariant (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Singular or otherwise unusable linear algebra (CLI exit code 4).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hdlm
