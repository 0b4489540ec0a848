#pragma once

#include <map>
#include <string>

#include "metadiv/autodiff.hpp"
#include "metadiv/distributions.hpp"

namespace metadiv::metaloss {

enum class LossKind { RenyiHalf, TV, NLL };

/// A differentiable meta-loss; lower is better for every kind.
struct MetaLossValue {
  ad::Var value;
  LossKind kind = LossKind::RenyiHalf;
  std::map<std::string, double> diagnostics;
};

/// Monte Carlo Renyi divergence of order one half, -2 log mean sqrt(p / q),
/// over K = eps columns reparameterized samples of a one-dimensional q.
MetaLossValue renyi_half_loss(const distributions::GaussianVars& q, const distributions::MoG1D& p,
                              const NoiseDraw& eps);

/// Trapezoid estimate of half the L1 distance between p and q on a frozen
/// grid. Clamped to at most one without touching the gradient below one.
MetaLossValue tv_loss(const distributions::GaussianVars& q, const distributions::MoG1D& p,
                      const distributions::QuadratureGrid& grid);

/// Negative predictive log-likelihood from an S x N matrix of per-sample,
/// per-point log-likelihoods: -(1/N) sum_n log((1/S) sum_s exp(ll[s, n])).
MetaLossValue nll_loss(ad::Var loglik);

const char* to_string(LossKind k);

}  // namespace metadiv::metaloss
