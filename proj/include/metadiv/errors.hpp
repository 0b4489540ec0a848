#pragma once

#include <stdexcept>
#include <string>

namespace metadiv {

/// Raised when a computation produces a non-finite value that the caller
/// cannot recover from locally (ratio overflow, diverging inner loop, ...).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace metadiv
