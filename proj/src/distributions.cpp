#include "metadiv/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace metadiv::distributions {

using ad::Graph;
using ad::Shape;
using ad::Var;

std::vector<double> DiagGaussian::flatten() const {
  std::vector<double> phi(mean);
  phi.insert(phi.end(), log_scale.begin(), log_scale.end());
  return phi;
}

DiagGaussian DiagGaussian::from_flat(std::span<const double> phi) {
  if (phi.size() % 2 != 0) throw std::invalid_argument("DiagGaussian::from_flat: odd length");
  const std::size_t d = phi.size() / 2;
  return {{phi.begin(), phi.begin() + static_cast<std::ptrdiff_t>(d)},
          {phi.begin() + static_cast<std::ptrdiff_t>(d), phi.end()}};
}

MoG1D make_mog(std::vector<double> weights, std::vector<double> means, std::vector<double> scales) {
  if (weights.empty() || weights.size() != means.size() || weights.size() != scales.size()) {
    throw std::invalid_argument("make_mog: component arrays must be non-empty and equal length");
  }
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-12) {
    throw std::invalid_argument("make_mog: weights sum to " + std::to_string(total));
  }
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (!(weights[j] >= 0.0)) throw std::invalid_argument("make_mog: negative weight");
    if (!(scales[j] > 0.0)) throw std::invalid_argument("make_mog: non-positive scale");
  }
  return {std::move(weights), std::move(means), std::move(scales)};
}

std::vector<double> QuadratureGrid::trapezoid_weights() const {
  std::vector<double> w(x.size(), dx);
  if (!w.empty()) {
    w.front() *= 0.5;
    w.back() *= 0.5;
  }
  return w;
}

double gaussian_log_density(std::span<const double> x, const DiagGaussian& q) {
  if (x.size() != q.mean.size() || q.mean.size() != q.log_scale.size()) {
    throw std::invalid_argument("gaussian_log_density: length mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - q.mean[i]) * std::exp(-q.log_scale[i]);
    acc += -0.5 * kLogTwoPi - q.log_scale[i] - 0.5 * z * z;
  }
  return acc;
}

double mog_log_density(double x, const MoG1D& p) {
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(p.weights.size());
  for (std::size_t j = 0; j < terms.size(); ++j) {
    // Same operation order as the Gaussian density, so a one-component
    // mixture reproduces it bit for bit.
    const double log_scale = std::log(p.scales[j]);
    const double z = (x - p.means[j]) * std::exp(-log_scale);
    terms[j] = ((-0.5 * (z * z)) - log_scale) + (-0.5 * kLogTwoPi) + std::log(p.weights[j]);
    m = std::max(m, terms[j]);
  }
  if (std::isinf(m)) return m;
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - m);
  return m + std::log(acc);
}

QuadratureGrid quadrature_grid(const MoG1D& p, const DiagGaussian& q, std::size_t n_points) {
  if (n_points < 101 || n_points % 2 == 0) {
    throw std::invalid_argument("quadrature_grid: n_points must be odd and >= 101, got " +
                                std::to_string(n_points));
  }
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  double max_scale = 0.0;
  for (std::size_t j = 0; j < p.means.size(); ++j) {
    lo = std::min(lo, p.means[j]);
    hi = std::max(hi, p.means[j]);
    max_scale = std::max(max_scale, p.scales[j]);
  }
  for (std::size_t i = 0; i < q.mean.size(); ++i) {
    lo = std::min(lo, q.mean[i]);
    hi = std::max(hi, q.mean[i]);
    max_scale = std::max(max_scale, std::exp(q.log_scale[i]));
  }
  lo -= 6.0 * max_scale;
  hi += 6.0 * max_scale;
  QuadratureGrid grid;
  grid.dx = (hi - lo) / static_cast<double>(n_points - 1);
  grid.x.resize(n_points);
  for (std::size_t i = 0; i < n_points; ++i) grid.x[i] = lo + grid.dx * static_cast<double>(i);
  grid.x.back() = hi;
  return grid;
}

double trapezoid(std::span<const double> values, const QuadratureGrid& grid) {
  if (values.size() != grid.x.size()) throw std::invalid_argument("trapezoid: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double w = (i == 0 || i + 1 == values.size()) ? 0.5 : 1.0;
    acc += w * values[i];
  }
  return acc * grid.dx;
}

// ---------------------------------------------------------------------------

GaussianVars gaussian_view(Var phi, std::size_t dim, std::size_t offset) {
  Graph& g = *phi.graph();
  return {g.slice(phi, offset, Shape::column(dim)), g.slice(phi, offset + dim, Shape::column(dim))};
}

Var repeat_cols(Var column, std::size_t k) {
  Graph& g = *column.graph();
  if (k == 1) return column;
  return g.matmul(column, g.ones(Shape::row(k)));
}

Var reparam_sample(const GaussianVars& q, Var eps) {
  Graph& g = *q.mean.graph();
  const std::size_t d = q.dim();
  if (eps.shape().rows != d) {
    throw std::invalid_argument("reparam_sample: noise has " + std::to_string(eps.shape().rows) +
                                " rows, expected " + std::to_string(d));
  }
  const std::size_t k = eps.shape().cols;
  const Var scale = g.exp(q.log_scale);
  if (d == 1) return q.mean + scale * eps;
  return repeat_cols(q.mean, k) + repeat_cols(scale, k) * eps;
}

Var reparam_sample(const GaussianVars& q, const NoiseDraw& eps) {
  Graph& g = *q.mean.graph();
  return reparam_sample(q, g.leaf(eps.epsilon, {eps.rows, eps.cols}));
}

Var gaussian_log_density(const GaussianVars& q, Var x) {
  Graph& g = *q.mean.graph();
  const std::size_t d = q.dim();
  if (x.shape().rows != d) throw std::invalid_argument("gaussian_log_density: dimension mismatch");
  const std::size_t k = x.shape().cols;
  const Var inv_scale = g.exp(-q.log_scale);
  Var z;
  if (d == 1) {
    z = (x - q.mean) * inv_scale;
  } else {
    z = (x - repeat_cols(q.mean, k)) * repeat_cols(inv_scale, k);
  }
  Var sq = z * z;
  if (d > 1) sq = g.matmul(g.ones(Shape::row(d)), sq);
  const double constant = -0.5 * static_cast<double>(d) * kLogTwoPi;
  return (-0.5 * sq - g.sum(q.log_scale)) + constant;
}

Var mog_log_density(Var x, const MoG1D& p) {
  Var acc;
  for (std::size_t j = 0; j < p.weights.size(); ++j) {
    const double c = std::log(p.weights[j]) - std::log(p.scales[j]) - 0.5 * kLogTwoPi;
    const Var z = (x - p.means[j]) * (1.0 / p.scales[j]);
    const Var term = c - 0.5 * (z * z);
    acc = acc.valid() ? x.graph()->log_add_exp(acc, term) : term;
  }
  return acc;
}

}  // namespace metadiv::distributions
