#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "metadiv/tasks.hpp"

using namespace metadiv;
using namespace metadiv::tasks;

TEST_CASE("mog tasks respect their constraints") {
  const auto sampler = TaskSampler::stream(7);
  std::vector<double> mu1s;
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const auto t = sample_mog_task(sampler, i);
    CHECK(t.mu2 - t.mu1 == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(t.sigma2 / t.sigma1 == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(t.mu1 >= 0.0);
    CHECK(t.mu1 <= 3.0);
    CHECK(t.sigma1 >= 0.5);
    CHECK(t.sigma1 <= 1.0);
    mu1s.push_back(t.mu1);
  }
  // Kolmogorov-Smirnov distance to Unif[0, 3].
  std::sort(mu1s.begin(), mu1s.end());
  double ks = 0.0;
  const double n = static_cast<double>(mu1s.size());
  for (std::size_t i = 0; i < mu1s.size(); ++i) {
    const double cdf = mu1s[i] / 3.0;
    ks = std::max({ks, std::abs(cdf - i / n), std::abs(cdf - (i + 1) / n)});
  }
  CHECK(ks < 0.02);
}

TEST_CASE("mog tasks are deterministic and normalized") {
  const auto sampler = TaskSampler::stream(3);
  const auto a = sample_mog_task(sampler, 42);
  const auto b = sample_mog_task(sampler, 42);
  CHECK(a.mu1 == b.mu1);
  CHECK(a.sigma1 == b.sigma1);
  CHECK(a.grid.x == b.grid.x);
  CHECK(sample_mog_task(sampler, 43).mu1 != a.mu1);
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto t = sample_mog_task(sampler, i, i % 2 ? Split::Test : Split::Train);
    const auto p = t.target();
    std::vector<double> d(t.grid.x.size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = std::exp(distributions::mog_log_density(t.grid.x[k], p));
    CHECK(std::abs(distributions::trapezoid(d, t.grid) - 1.0) < 1e-6);
    CHECK(t.grid.x.size() == 2001);
  }
}

TEST_CASE("train and test tasks are disjoint") {
  const auto sampler = TaskSampler::stream(11);
  std::set<double> train;
  for (std::uint64_t i = 0; i < 500; ++i) train.insert(sample_mog_task(sampler, i).mu1);
  for (std::uint64_t i = 0; i < 500; ++i) CHECK(train.count(sample_mog_task(sampler, i, Split::Test).mu1) == 0);
  std::set<double> strain;
  for (std::uint64_t i = 0; i < 200; ++i) strain.insert(sample_sinusoid_task(sampler, i, {5, 1, 1}).amplitude);
  for (std::uint64_t i = 0; i < 200; ++i) {
    CHECK(strain.count(sample_sinusoid_task(sampler, i, {5, 1, 1}, Split::Test).amplitude) == 0);
  }
}

TEST_CASE("frozen sampler") {
  const auto sampler = TaskSampler::frozen(5, 10);
  std::set<std::uint64_t> seen;
  std::vector<int> counts(10, 0);
  for (std::uint64_t it = 0; it < 2000; ++it) {
    const auto idx = sampler.select(it, 5);
    CHECK(std::set<std::uint64_t>(idx.begin(), idx.end()).size() == 5);
    for (auto i : idx) {
      seen.insert(i);
      ++counts[i];
    }
  }
  CHECK(seen.size() == 10);
  CHECK(*seen.rbegin() == 9);
  // Each task is picked with probability 1/2 per iteration.
  for (int c : counts) CHECK(std::abs(c - 1000) < 4 * std::sqrt(500.0));
  CHECK(sampler.select(3, 5) == sampler.select(3, 5));
  CHECK_THROWS_AS(sampler.select(0, 11), std::invalid_argument);

  const auto stream = TaskSampler::stream(5);
  std::set<std::uint64_t> fresh;
  for (std::uint64_t it = 0; it < 100; ++it) {
    for (auto i : stream.select(it, 4)) fresh.insert(i);
  }
  CHECK(fresh.size() == 400);
}

TEST_CASE("sinusoid tasks") {
  const auto sampler = TaskSampler::stream(2);
  const auto clean = sample_sinusoid_task(sampler, 3, {50, 10, 20}, Split::Train, 0.0);
  for (std::size_t i = 0; i < clean.train.size(); ++i) {
    CHECK(clean.train.y[i] == clean.amplitude * std::sin(clean.train.x[i] + clean.phase));
  }
  CHECK(clean.train.size() == 50);
  CHECK(clean.meta.size() == 10);
  CHECK(clean.test.size() == 20);
  const auto noisy = sample_sinusoid_task(sampler, 3, {50, 10, 20});
  CHECK(noisy.amplitude == clean.amplitude);
  CHECK(noisy.train.x == clean.train.x);
  CHECK(noisy.train.y != clean.train.y);

  for (std::uint64_t i = 0; i < 10000; ++i) {
    const auto t = sample_sinusoid_task(sampler, i, {1, 1, 1});
    CHECK(t.amplitude >= 5.0);
    CHECK(t.amplitude <= 10.0);
    CHECK(t.phase >= 0.0);
    CHECK(t.phase <= 1.0);
    for (double x : t.train.x) {
      CHECK(x >= -4.0);
      CHECK(x <= 4.0);
    }
  }
  CHECK_THROWS_AS(sample_sinusoid_task(sampler, 0, {0, 1, 1}), std::invalid_argument);
}

TEST_CASE("sinusoid noise scale") {
  CHECK(sinusoid_noise_scale(6.0, 0.5, -0.5) == 3.0);
  CHECK(sinusoid_noise_scale(6.0, 0.0, M_PI) == doctest::Approx(0.0).epsilon(1e-15));
  // Residual spread where |cos((x + b)/2)| = 1: gather points near x = -b.
  const auto sampler = TaskSampler::stream(9);
  const auto t = sample_sinusoid_task(sampler, 0, {200000, 1, 1});
  double ss = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < t.train.size(); ++i) {
    const double x = t.train.x[i];
    if (std::abs(x + t.phase) < 0.02) {
      const double r = t.train.y[i] - sinusoid_mean(t.amplitude, t.phase, x);
      ss += r * r;
      ++n;
    }
  }
  CHECK(n > 400);
  CHECK(std::sqrt(ss / n) == doctest::Approx(t.amplitude / 2).epsilon(0.05));
}

TEST_CASE("minibatch halves") {
  const auto sampler = TaskSampler::stream(4);
  const auto t = sample_sinusoid_task(sampler, 1, {50, 1, 1});
  std::mt19937_64 rng(1);
  const auto [inner, meta] = minibatch(t, 20, rng);
  CHECK(inner.size() == 10);
  CHECK(meta.size() == 10);
  std::set<double> xs(inner.x.begin(), inner.x.end());
  for (double x : meta.x) CHECK(xs.count(x) == 0);
  xs.insert(meta.x.begin(), meta.x.end());
  CHECK(xs.size() == 20);

  const auto [a, b] = minibatch(t, 50, rng);
  std::set<double> all(a.x.begin(), a.x.end());
  all.insert(b.x.begin(), b.x.end());
  CHECK(all == std::set<double>(t.train.x.begin(), t.train.x.end()));

  CHECK_THROWS_AS(minibatch(t, 7, rng), std::invalid_argument);
  CHECK_THROWS_AS(minibatch(t, 52, rng), std::invalid_argument);

  // Chi-square uniformity of inclusion frequencies over 10^4 batches.
  std::vector<double> counts(50, 0.0);
  for (int r = 0; r < 10000; ++r) {
    const auto [u, v] = minibatch(t, 10, rng);
    for (double x : u.x) counts[std::find(t.train.x.begin(), t.train.x.end(), x) - t.train.x.begin()] += 1;
    for (double x : v.x) counts[std::find(t.train.x.begin(), t.train.x.end(), x) - t.train.x.begin()] += 1;
  }
  const double expect = 10000.0 * 10 / 50;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // 99th percentile of chi-square with 49 degrees of freedom.
  CHECK(chi2 < 74.92);
}

TEST_CASE("task json") {
  const auto sampler = TaskSampler::stream(1);
  const auto m = to_json(sample_mog_task(sampler, 2, Split::Test));
  CHECK(m.at("kind") == "mog");
  CHECK(m.at("split") == "test");
  CHECK(m.at("index") == 2);
  const auto s = to_json(sample_sinusoid_task(sampler, 2, {30, 4, 5}));
  CHECK(s.at("n_train") == 30);
  CHECK(s.at("amplitude").get<double>() >= 5.0);
}
