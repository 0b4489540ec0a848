#include "doctest.h"

#include <cmath>

#include "metadiv/baseline.hpp"
#include "metadiv/problems.hpp"

using namespace metadiv;
using namespace metadiv::baseline;

namespace {

double quadratic(double a) { return (a - 0.5) * (a - 0.5); }

problems::MoGSuite tiny_suite() {
  problems::MoGSuite s;
  s.seed = 3;
  s.n_train_tasks = 3;
  s.K = 40;
  s.meta_K = 40;
  s.eval_K = 500;
  return s;
}

}  // namespace

TEST_CASE("bo on synthetic objectives") {
  const auto r16 = bo_minimize(quadratic, 16);
  CHECK(r16.evaluated.size() == 16);
  CHECK(std::abs(r16.best_alpha - 0.5) < 0.05);

  const auto r8 = bo_minimize(quadratic, 8);
  CHECK(r8.evaluated.size() == 8);
  CHECK(std::abs(r8.best_alpha - 0.5) < 0.4);

  const auto r3 = bo_minimize(quadratic, 3);
  REQUIRE(r3.evaluated.size() == 3);
  CHECK(r3.evaluated[0].alpha == 0.5);
  CHECK(r3.evaluated[1].alpha == 1.5);
  CHECK(r3.evaluated[2].alpha == 2.5);
  CHECK(r3.best_alpha == 0.5);

  CHECK_THROWS_AS(bo_minimize(quadratic, 2), std::invalid_argument);
}

TEST_CASE("bo bookkeeping") {
  const auto wiggly = [](double a) { return std::sin(4.0 * a) + 0.3 * a; };
  const auto r = bo_minimize(wiggly, 20);
  REQUIRE(r.evaluated.size() == 20);
  double running = 1e300;
  double best = 1e300, best_alpha = 0.0;
  for (const auto& e : r.evaluated) {
    CHECK(e.alpha >= 0.01);
    CHECK(e.alpha <= 3.0);
    CHECK(e.loss == wiggly(e.alpha));
    CHECK(std::min(running, e.loss) <= running);
    running = std::min(running, e.loss);
    CHECK(e.running_min == running);
    if (e.loss < best) {
      best = e.loss;
      best_alpha = e.alpha;
    }
  }
  CHECK(r.best_alpha == best_alpha);
  CHECK(r.best_loss == best);

  // Constant objective: every observation equal, any returned alpha valid.
  const auto c = bo_minimize([](double) { return 2.0; }, 6);
  for (const auto& e : c.evaluated) CHECK(e.loss == 2.0);
  CHECK(c.best_alpha >= 0.01);
  CHECK(c.best_alpha <= 3.0);
}

TEST_CASE("gp posterior interpolates observations") {
  const BoConfig cfg;
  const std::vector<double> xs{0.2, 0.9, 1.4, 2.7};
  const std::vector<double> ys{1.0, -0.5, 0.3, 2.0};
  const auto post = gp_posterior(xs, ys, xs, cfg);
  REQUIRE(post.mean.size() == xs.size());
  const double noise_std = std::sqrt(cfg.noise);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(std::abs(post.mean[i] - ys[i]) < 3.0 * noise_std);
    CHECK(post.stddev[i] >= 0.0);
    CHECK(post.stddev[i] < 3.0 * noise_std);
  }
  // Far from data the prior (zero mean, unit variance) returns.
  const std::vector<double> far{20.0};
  const auto prior = gp_posterior(xs, ys, far, cfg);
  CHECK(std::abs(prior.mean[0]) < 1e-12);
  CHECK(prior.stddev[0] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("grid search") {
  CHECK(grid_search(quadratic, {1.3}).best_alpha == 1.3);
  CHECK(grid_search([](double a) { return a; }, {0.4, 0.2, 2.0}).best_alpha == 0.2);
  CHECK(grid_search([](double a) { return -a; }, {0.4, 0.2, 2.0}).best_alpha == 2.0);
  // Ties go to the smaller alpha regardless of order.
  CHECK(grid_search([](double) { return 1.0; }, {0.9, 0.3, 0.6}).best_alpha == 0.3);
  const auto r = grid_search(quadratic, {0.1, 0.5, 0.9});
  REQUIRE(r.evaluated.size() == 3);
  CHECK(r.evaluated[1].alpha == 0.5);
  CHECK(r.best_loss == 0.0);
  CHECK_THROWS_AS(grid_search(quadratic, {}), std::invalid_argument);
}

TEST_CASE("evaluate alpha") {
  problems::MoGProblem prob(tiny_suite());
  const std::size_t iters = 30;
  const double beta = 0.05;
  const double v1 = evaluate_alpha(prob, 1.0, iters, beta);

  // Standard VI on every training task from the shared initialization.
  double vi = 0.0;
  for (std::uint64_t i = 0; i < 3; ++i) {
    const metalearn::TaskRef ref{tasks::Split::Train, i};
    const auto phi = metalearn::descend(prob, divergences::DivergenceSpec::alpha(1.0), prob.initial_phi(), ref,
                                        iters, beta);
    vi += prob.evaluate(ref, phi).meta_loss / 3.0;
  }
  CHECK(v1 == doctest::Approx(vi).epsilon(1e-14));
  CHECK(evaluate_alpha(prob, 1.0, iters, beta) == v1);
  CHECK(evaluate_alpha(prob, 1.0, iters, beta, 3) == v1);
  CHECK(evaluate_alpha(prob, 0.5, iters, beta) != v1);
  CHECK_THROWS_AS(evaluate_alpha(prob, 0.0, iters, beta), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_alpha(prob, 3.5, iters, beta), std::invalid_argument);
}
