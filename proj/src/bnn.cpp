#include "metadiv/bnn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace metadiv::bnn {

using ad::Graph;
using ad::Shape;
using ad::Var;
using distributions::kLogTwoPi;

namespace {

constexpr std::size_t kH = kHidden;
constexpr std::size_t kOffW1 = 0;
constexpr std::size_t kOffB1 = kOffW1 + kH;
constexpr std::size_t kOffW2 = kOffB1 + kH;
constexpr std::size_t kOffB2 = kOffW2 + kH * kH;
constexpr std::size_t kOffW3 = kOffB2 + kH;
constexpr std::size_t kOffB3 = kOffW3 + kH;

Var forward_at(Graph& g, Var theta, std::size_t off, Var x, Var ones) {
  const Var w1 = g.slice(theta, off + kOffW1, {kH, 1});
  const Var b1 = g.slice(theta, off + kOffB1, {kH, 1});
  const Var w2 = g.slice(theta, off + kOffW2, {kH, kH});
  const Var b2 = g.slice(theta, off + kOffB2, {kH, 1});
  const Var w3 = g.slice(theta, off + kOffW3, {1, kH});
  const Var b3 = g.slice(theta, off + kOffB3, {1, 1});
  const Var h1 = g.relu(g.matmul(w1, x) + g.matmul(b1, ones));
  const Var h2 = g.relu(g.matmul(w2, h1) + g.matmul(b2, ones));
  return g.matmul(w3, h2) + b3;
}

void check_theta(Var theta) {
  if (theta.shape().rows != kWeights) {
    throw std::invalid_argument("bnn: theta must have " + std::to_string(kWeights) + " rows, got " +
                                std::to_string(theta.shape().rows));
  }
}

double log_prior(std::span<const double> theta) {
  double acc = 0.0;
  for (double w : theta) acc += -0.5 * w * w;
  return acc - 0.5 * kLogTwoPi * static_cast<double>(theta.size());
}

}  // namespace

std::vector<double> BnnPosterior::flatten() const {
  auto phi = q.flatten();
  phi.push_back(log_obs_noise);
  return phi;
}

BnnPosterior BnnPosterior::from_flat(std::span<const double> phi) {
  if (phi.size() != kPhiSize) throw std::invalid_argument("BnnPosterior::from_flat: expected 963 values");
  BnnPosterior p;
  p.q = distributions::DiagGaussian::from_flat(phi.first(2 * kWeights));
  p.log_obs_noise = phi.back();
  return p;
}

BnnPosterior initial_posterior(std::uint64_t seed) {
  auto rng = make_rng({seed, static_cast<std::uint64_t>(Stream::Init), 0xb0});
  std::normal_distribution<double> n01;
  BnnPosterior p;
  p.q.mean.assign(kWeights, 0.0);
  p.q.log_scale.assign(kWeights, -3.0);
  const auto fill = [&](std::size_t off, std::size_t n, double sd) {
    for (std::size_t i = 0; i < n; ++i) p.q.mean[off + i] = sd * n01(rng);
  };
  fill(kOffW1, kH, 1.0);
  fill(kOffB1, kH, 0.1);
  fill(kOffW2, kH * kH, 1.0 / std::sqrt(static_cast<double>(kH)));
  fill(kOffB2, kH, 0.1);
  fill(kOffW3, kH, 1.0 / std::sqrt(static_cast<double>(kH)));
  fill(kOffB3, 1, 0.1);
  return p;
}

PosteriorVars posterior_view(Var phi) {
  if (phi.shape() != Shape::column(kPhiSize)) throw std::invalid_argument("posterior_view: phi must be 963 x 1");
  Graph& g = *phi.graph();
  return {distributions::gaussian_view(phi, kWeights), g.slice(phi, 2 * kWeights, Shape::scalar())};
}

double bnn_forward(std::span<const double> t, double x) {
  if (t.size() != kWeights) throw std::invalid_argument("bnn_forward: expected 481 weights");
  double h1[kH];
  for (std::size_t i = 0; i < kH; ++i) h1[i] = std::max(0.0, t[kOffW1 + i] * x + t[kOffB1 + i]);
  double out = t[kOffB3];
  for (std::size_t i = 0; i < kH; ++i) {
    double a = t[kOffB2 + i];
    for (std::size_t j = 0; j < kH; ++j) a += t[kOffW2 + i + kH * j] * h1[j];
    out += t[kOffW3 + i] * std::max(0.0, a);
  }
  return out;
}

Var bnn_forward(Var theta, Var x) {
  if (theta.shape() != Shape::column(kWeights)) throw std::invalid_argument("bnn_forward: theta must be 481 x 1");
  Graph& g = *theta.graph();
  return forward_at(g, theta, 0, x, g.ones(Shape::row(x.shape().cols)));
}

Var bnn_forward_particles(Var theta, Var x) {
  check_theta(theta);
  Graph& g = *theta.graph();
  const std::size_t k = theta.shape().cols;
  const std::size_t n = x.shape().cols;
  const Var ones = g.ones(Shape::row(n));
  std::vector<Var> rows;
  rows.reserve(k);
  for (std::size_t j = 0; j < k; ++j) rows.push_back(forward_at(g, theta, j * kWeights, x, ones));
  // Concatenated rows read as N x K column-major, i.e. the transpose.
  return g.transpose(g.reshape(g.concat(rows), {n, k}));
}

Var bnn_loglik_matrix(Var theta, const tasks::DataSet& batch, Var log_obs_noise) {
  Graph& g = *theta.graph();
  const std::size_t k = theta.shape().cols;
  const Var pred = bnn_forward_particles(theta, g.row(batch.x));
  const Var y = g.matmul(g.ones(Shape::column(k)), g.row(batch.y));
  const Var z = (y - pred) * g.exp(-log_obs_noise);
  return (-0.5 * (z * z) - log_obs_noise) - 0.5 * kLogTwoPi;
}

Var bnn_log_joint(Var theta, const tasks::DataSet& batch, Var log_obs_noise, std::size_t n_total) {
  check_theta(theta);
  Graph& g = *theta.graph();
  const Var prior = g.matmul(g.ones(Shape::row(kWeights)), -0.5 * (theta * theta)) -
                    0.5 * kLogTwoPi * static_cast<double>(kWeights);
  if (batch.size() == 0) return prior;
  const Var ll = bnn_loglik_matrix(theta, batch, log_obs_noise);
  const Var per_particle = g.transpose(g.matmul(ll, g.ones(Shape::column(batch.size()))));
  const double scale = static_cast<double>(n_total) / static_cast<double>(batch.size());
  return scale * per_particle + prior;
}

double bnn_log_joint(std::span<const double> theta, const tasks::DataSet& batch, double log_obs_noise,
                     std::size_t n_total) {
  const double lp = log_prior(theta);
  if (batch.size() == 0) return lp;
  const double sigma = std::exp(log_obs_noise);
  double ll = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double z = (batch.y[i] - bnn_forward(theta, batch.x[i])) / sigma;
    ll += -0.5 * z * z - log_obs_noise - 0.5 * kLogTwoPi;
  }
  return static_cast<double>(n_total) / static_cast<double>(batch.size()) * ll + lp;
}

NoiseKey predictive_key(NoiseKey base) {
  base.stream = Stream::Evaluation;
  return base;
}

PredictiveMetrics predictive_metrics(const BnnPosterior& post, const tasks::DataSet& test, std::size_t S,
                                     NoiseKey key, double y_shift, double y_scale) {
  if (test.size() == 0) throw std::invalid_argument("predictive_metrics: empty test set");
  if (S == 0) throw std::invalid_argument("predictive_metrics: need S >= 1");
  if (!(y_scale > 0.0)) throw std::invalid_argument("predictive_metrics: y_scale must be positive");
  const std::size_t n = test.size();
  const NoiseDraw eps = draw_noise(predictive_key(key), kWeights, S);
  const double sigma = y_scale * std::exp(post.log_obs_noise);
  const double log_norm = std::log(sigma) + 0.5 * kLogTwoPi;
  std::vector<double> ll(S * n), mean(n, 0.0);
  std::vector<double> theta(kWeights);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t i = 0; i < kWeights; ++i) {
      theta[i] = post.q.mean[i] + std::exp(post.q.log_scale[i]) * eps.epsilon[s * kWeights + i];
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double f = y_shift + y_scale * bnn_forward(theta, test.x[j]);
      const double z = (test.y[j] - f) / sigma;
      ll[s + S * j] = -0.5 * z * z - log_norm;
      mean[j] += f / static_cast<double>(S);
    }
  }
  PredictiveMetrics m;
  double se = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < S; ++s) mx = std::max(mx, ll[s + S * j]);
    double acc = 0.0;
    for (std::size_t s = 0; s < S; ++s) acc += std::exp(ll[s + S * j] - mx);
    m.test_ll += mx + std::log(acc / static_cast<double>(S));
    se += (test.y[j] - mean[j]) * (test.y[j] - mean[j]);
  }
  m.test_ll /= static_cast<double>(n);
  m.rmse = std::sqrt(se / static_cast<double>(n));
  return m;
}

}  // namespace metadiv::bnn
