#pragma once

#include <stdexcept>
#include <string>

namespace gevfuse {

/// Malformed or inconsistent input data (bad rows, unknown ids, stale artifacts).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical procedure failed: non-convergence, unfactorizable covariance,
/// too many failed replicates.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gevfuse
