#include "metadiv/baseline.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "metadiv/errors.hpp"

namespace metadiv::baseline {

namespace {

Eigen::MatrixXd rbf(const std::vector<double>& a, const std::vector<double>& b, double lengthscale) {
  Eigen::MatrixXd k(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double d = (a[i] - b[j]) / lengthscale;
      k(i, j) = std::exp(-0.5 * d * d);
    }
  }
  return k;
}

void record(SearchResult& r, double alpha, double loss) {
  if (!std::isfinite(loss)) throw NumericalError("objective is not finite at alpha " + std::to_string(alpha));
  const double prev = r.evaluated.empty() ? std::numeric_limits<double>::infinity() : r.evaluated.back().running_min;
  r.evaluated.push_back({alpha, loss, std::min(prev, loss)});
  if (r.evaluated.size() == 1 || loss < r.best_loss || (loss == r.best_loss && alpha < r.best_alpha)) {
    r.best_alpha = alpha;
    r.best_loss = loss;
  }
}

}  // namespace

double evaluate_alpha(const metalearn::Problem& problem, double alpha, std::size_t iters, double beta,
                      std::size_t workers) {
  if (!(alpha > 0.0) || alpha > 3.0) throw std::invalid_argument("evaluate_alpha: alpha must lie in (0, 3]");
  const auto spec = divergences::DivergenceSpec::alpha(alpha);
  const std::size_t n = problem.train_sampler().frozen_count;
  if (n == 0) throw std::invalid_argument("evaluate_alpha: problem has no frozen training set");
  std::vector<double> losses(n);
  metalearn::parallel_for(n, workers, [&](std::size_t i) {
    const metalearn::TaskRef ref{tasks::Split::Train, i};
    const auto phi = metalearn::descend(problem, spec, problem.initial_phi(), ref, iters, beta);
    losses[i] = problem.evaluate(ref, phi).meta_loss;
  });
  double total = 0.0;
  for (double l : losses) total += l;
  const double mean = total / static_cast<double>(n);
  if (!std::isfinite(mean)) throw NumericalError("evaluate_alpha: mean meta-loss is not finite");
  return mean;
}

GpPosterior gp_posterior(const std::vector<double>& x, const std::vector<double>& y,
                         const std::vector<double>& query, const BoConfig& cfg) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("gp_posterior: need matching, nonempty data");
  const Eigen::Index n = static_cast<Eigen::Index>(x.size());
  const Eigen::MatrixXd k = rbf(x, x, cfg.lengthscale);
  const Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
  for (int attempt = 0;; ++attempt) {
    llt.compute(k + (cfg.noise + jitter) * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() == Eigen::Success) break;
    if (attempt == 6) throw NumericalError("gp_posterior: Cholesky failed after jitter retries");
    jitter = jitter == 0.0 ? 1e-10 : jitter * 100.0;
  }
  const Eigen::VectorXd weights = llt.solve(yv);
  const Eigen::MatrixXd ks = rbf(x, query, cfg.lengthscale);
  const Eigen::MatrixXd v = llt.matrixL().solve(ks);
  GpPosterior post;
  post.mean.resize(query.size());
  post.stddev.resize(query.size());
  for (std::size_t j = 0; j < query.size(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    post.mean[j] = ks.col(jj).dot(weights);
    post.stddev[j] = std::sqrt(std::max(0.0, 1.0 - v.col(jj).squaredNorm()));
  }
  return post;
}

SearchResult bo_minimize(const Objective& objective, std::size_t budget, const BoConfig& cfg) {
  if (budget < 3) throw std::invalid_argument("bo_minimize: budget must be >= 3");
  if (cfg.candidates < 2 || !(cfg.lo < cfg.hi)) throw std::invalid_argument("bo_minimize: bad region");
  std::vector<double> grid(cfg.candidates);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid[i] = cfg.lo + (cfg.hi - cfg.lo) * static_cast<double>(i) / static_cast<double>(grid.size() - 1);
  }
  SearchResult r;
  std::vector<double> xs;
  std::vector<double> ys;
  const auto observe = [&](double a) {
    const double loss = objective(a);
    record(r, a, loss);
    xs.push_back(a);
    ys.push_back(loss);
  };
  for (std::size_t i = 0; i < cfg.seeds.size() && r.evaluated.size() < budget; ++i) observe(cfg.seeds[i]);

  while (r.evaluated.size() < budget) {
    double mean = 0.0;
    for (double y : ys) mean += y;
    mean /= static_cast<double>(ys.size());
    double var = 0.0;
    for (double y : ys) var += (y - mean) * (y - mean);
    const double sd = std::sqrt(var / static_cast<double>(ys.size()));
    const double scale = sd > 0.0 ? sd : 1.0;
    std::vector<double> z(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) z[i] = (ys[i] - mean) / scale;

    const auto post = gp_posterior(xs, z, grid, cfg);
    std::size_t best = grid.size();
    double best_acq = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < grid.size(); ++j) {
      bool seen = false;
      for (double x : xs) seen = seen || std::abs(x - grid[j]) < 1e-12;
      if (seen) continue;
      const double acq = post.mean[j] - cfg.kappa * post.stddev[j];
      if (acq < best_acq) {
        best_acq = acq;
        best = j;
      }
    }
    if (best == grid.size()) break;
    observe(grid[best]);
  }
  return r;
}

SearchResult grid_search(const Objective& objective, const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("grid_search: empty grid");
  SearchResult r;
  for (double a : grid) record(r, a, objective(a));
  return r;
}

}  // namespace metadiv::baseline
