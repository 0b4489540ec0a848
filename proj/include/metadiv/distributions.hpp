#pragma once

#include <span>
#include <vector>

#include "metadiv/autodiff.hpp"
#include "metadiv/rng.hpp"

namespace metadiv::distributions {

inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

/// Diagonal Gaussian stored by mean and log standard deviation.
struct DiagGaussian {
  std::vector<double> mean;
  std::vector<double> log_scale;

  std::size_t dim() const { return mean.size(); }
  /// Flat layout used as variational parameters: [mean..., log_scale...].
  std::vector<double> flatten() const;
  static DiagGaussian from_flat(std::span<const double> phi);
};

/// One-dimensional Gaussian mixture. Construct through make_mog so the
/// weight and scale invariants are checked.
struct MoG1D {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> scales;
};

MoG1D make_mog(std::vector<double> weights, std::vector<double> means, std::vector<double> scales);

/// Uniform grid with trapezoid weights.
struct QuadratureGrid {
  std::vector<double> x;
  double dx = 0.0;

  std::vector<double> trapezoid_weights() const;
};

double gaussian_log_density(std::span<const double> x, const DiagGaussian& q);
double mog_log_density(double x, const MoG1D& p);

/// Grid covering [min mean - 6 s, max mean + 6 s] of both p and q, where s is
/// the largest scale among them. n_points must be odd and >= 101.
QuadratureGrid quadrature_grid(const MoG1D& p, const DiagGaussian& q, std::size_t n_points = 2001);

double trapezoid(std::span<const double> values, const QuadratureGrid& grid);

// ---------------------------------------------------------------------------
// Differentiable forms.

/// Graph views of a diagonal Gaussian: mean and log_scale are D x 1 nodes.
struct GaussianVars {
  ad::Var mean;
  ad::Var log_scale;

  std::size_t dim() const { return mean.shape().rows; }
};

/// Splits a flat [mean, log_scale] parameter node of length 2D.
GaussianVars gaussian_view(ad::Var phi, std::size_t dim, std::size_t offset = 0);

/// D x K matrix of reparameterized samples mean + exp(log_scale) * eps.
ad::Var reparam_sample(const GaussianVars& q, const NoiseDraw& eps);
ad::Var reparam_sample(const GaussianVars& q, ad::Var eps);

/// Column-wise log density of a D x K matrix of points, giving 1 x K.
ad::Var gaussian_log_density(const GaussianVars& q, ad::Var x);

/// Elementwise mixture log density of any-shaped node.
ad::Var mog_log_density(ad::Var x, const MoG1D& p);

/// Repeats a D x 1 column across K columns.
ad::Var repeat_cols(ad::Var column, std::size_t k);

}  // namespace metadiv::distributions
