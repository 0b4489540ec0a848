#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "metadiv/metalearn.hpp"

namespace metadiv::baseline {

/// Mean meta-loss over the problem's frozen training tasks after iters steps
/// of fixed-alpha descent from the shared initialization. alpha in (0, 3].
double evaluate_alpha(const metalearn::Problem& problem, double alpha, std::size_t iters, double beta,
                      std::size_t workers = 1);

/// GP-UCB over a 1-D alpha region. Losses are standardized before the GP fit;
/// noise is the observation variance on that scale.
struct BoConfig {
  double lo = 0.01;
  double hi = 3.0;
  double kappa = 0.1;
  double lengthscale = 0.3;
  double noise = 1e-3;
  std::size_t candidates = 512;
  std::vector<double> seeds{0.5, 1.5, 2.5};
};

struct Evaluation {
  double alpha = 0.0;
  double loss = 0.0;
  double running_min = 0.0;
};

struct SearchResult {
  std::vector<Evaluation> evaluated;
  double best_alpha = 0.0;
  double best_loss = 0.0;
};

struct GpPosterior {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Zero-mean RBF posterior at query points given (x, y) observations.
GpPosterior gp_posterior(const std::vector<double>& x, const std::vector<double>& y,
                         const std::vector<double>& query, const BoConfig& cfg);

using Objective = std::function<double(double)>;

/// Evaluates the seeds, then minimizes mean - kappa * std over the
/// candidate grid, skipping points already evaluated. budget >= 3.
SearchResult bo_minimize(const Objective& objective, std::size_t budget, const BoConfig& cfg = {});

/// Argmin over grid; ties go to the smaller alpha.
SearchResult grid_search(const Objective& objective, const std::vector<double>& grid);

}  // namespace metadiv::baseline
