#include "metadiv/metaloss.hpp"

#include <cmath>
#include <stdexcept>

namespace metadiv::metaloss {

using ad::Graph;
using ad::Shape;
using ad::Var;
using distributions::GaussianVars;
using distributions::MoG1D;
using distributions::QuadratureGrid;

MetaLossValue renyi_half_loss(const GaussianVars& q, const MoG1D& p, const NoiseDraw& eps) {
  if (q.dim() != 1) throw std::invalid_argument("renyi_half_loss: q must be one-dimensional");
  if (eps.cols < 2) throw std::invalid_argument("renyi_half_loss: need K >= 2");
  Graph& g = *q.mean.graph();
  const Var theta = distributions::reparam_sample(q, eps);
  const Var lr = distributions::mog_log_density(theta, p) - distributions::gaussian_log_density(q, theta);
  const double log_k = std::log(static_cast<double>(eps.cols));
  MetaLossValue out;
  out.value = -2.0 * (g.logsumexp(0.5 * lr) - log_k);
  out.kind = LossKind::RenyiHalf;
  out.diagnostics["K"] = static_cast<double>(eps.cols);
  return out;
}

MetaLossValue tv_loss(const GaussianVars& q, const MoG1D& p, const QuadratureGrid& grid) {
  if (q.dim() != 1) throw std::invalid_argument("tv_loss: q must be one-dimensional");
  if (grid.x.size() < 2) throw std::invalid_argument("tv_loss: grid too small");
  Graph& g = *q.mean.graph();
  const std::size_t n = grid.x.size();
  std::vector<double> pd(n);
  for (std::size_t i = 0; i < n; ++i) pd[i] = std::exp(distributions::mog_log_density(grid.x[i], p));
  const Var qd = g.exp(distributions::gaussian_log_density(q, g.row(grid.x)));
  const auto w = grid.trapezoid_weights();
  const Var raw = 0.5 * g.sum(g.row(w) * g.abs(g.row(pd) - qd));
  MetaLossValue out;
  out.value = raw - g.relu(raw - 1.0);
  out.kind = LossKind::TV;
  out.diagnostics["grid_points"] = static_cast<double>(n);
  return out;
}

MetaLossValue nll_loss(Var loglik) {
  const std::size_t s = loglik.shape().rows;
  const std::size_t n = loglik.shape().cols;
  if (s == 0 || n == 0) throw std::invalid_argument("nll_loss: empty split or no samples");
  Graph& g = *loglik.graph();
  const Var per_point = g.logsumexp_cols(loglik) - std::log(static_cast<double>(s));
  MetaLossValue out;
  out.value = g.sum(per_point) * (-1.0 / static_cast<double>(n));
  out.kind = LossKind::NLL;
  out.diagnostics["S"] = static_cast<double>(s);
  out.diagnostics["N"] = static_cast<double>(n);
  return out;
}

const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::RenyiHalf: return "renyi_half";
    case LossKind::TV: return "tv";
    case LossKind::NLL: return "nll";
  }
  return "unknown";
}

}  // namespace metadiv::metaloss
