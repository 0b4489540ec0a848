#pragma once

#include <span>
#include <vector>

#include "metadiv/autodiff.hpp"
#include "metadiv/distributions.hpp"
#include "metadiv/rng.hpp"
#include "metadiv/tasks.hpp"

namespace metadiv::bnn {

/// 1 -> 20 -> 20 -> 1 relu network. Flat weight layout, column-major:
/// W1 (20), b1 (20), W2 (20 x 20), b2 (20), W3 (1 x 20), b3 (1).
inline constexpr std::size_t kHidden = 20;
inline constexpr std::size_t kWeights = 2 * kHidden + kHidden * kHidden + kHidden + kHidden + 1;
/// phi = [mean (481), log_scale (481), log_obs_noise].
inline constexpr std::size_t kPhiSize = 2 * kWeights + 1;

struct BnnPosterior {
  distributions::DiagGaussian q;
  double log_obs_noise = 0.0;

  std::vector<double> flatten() const;
  static BnnPosterior from_flat(std::span<const double> phi);
};

/// Means drawn with fan-in scaling (weights N(0, 1/fan_in), biases N(0, 0.1^2)),
/// log-scales -3, log_obs_noise 0.
BnnPosterior initial_posterior(std::uint64_t seed);

struct PosteriorVars {
  distributions::GaussianVars q;
  ad::Var log_obs_noise;
};

PosteriorVars posterior_view(ad::Var phi);

double bnn_forward(std::span<const double> theta, double x);
/// theta is one 481 x 1 weight column, x a 1 x N row; result 1 x N.
ad::Var bnn_forward(ad::Var theta, ad::Var x);
/// theta is 481 x K; result K x N.
ad::Var bnn_forward_particles(ad::Var theta, ad::Var x);

/// K x N Gaussian log-likelihoods of batch under each particle.
ad::Var bnn_loglik_matrix(ad::Var theta, const tasks::DataSet& batch, ad::Var log_obs_noise);

/// (n_total / batch) * sum log-likelihood + standard normal log prior, 1 x K.
ad::Var bnn_log_joint(ad::Var theta, const tasks::DataSet& batch, ad::Var log_obs_noise, std::size_t n_total);
double bnn_log_joint(std::span<const double> theta, const tasks::DataSet& batch, double log_obs_noise,
                     std::size_t n_total);

struct PredictiveMetrics {
  double test_ll = 0.0;
  double rmse = 0.0;
};

/// Noise key used by predictive_metrics for its S weight samples.
NoiseKey predictive_key(NoiseKey base);

/// Mixture log-likelihood over S posterior samples and RMSE of the predictive
/// mean. The network models (y - y_shift) / y_scale; metrics are reported in
/// the units of test.y.
PredictiveMetrics predictive_metrics(const BnnPosterior& post, const tasks::DataSet& test, std::size_t S,
                                     NoiseKey key, double y_shift = 0.0, double y_scale = 1.0);

}  // namespace metadiv::bnn
