#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace metadiv {

/// Adaptive moment estimation with bias correction.
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  void step(std::span<double> params, std::span<const double> grad);
};

}  // namespace metadiv
