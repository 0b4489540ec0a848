#include "metadiv/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "metadiv/rng.hpp"

namespace metadiv::tasks {

namespace {

Stream param_stream(Split s) { return s == Split::Train ? Stream::TrainTasks : Stream::TestTasks; }

DataSet draw_points(std::mt19937_64& rng, std::size_t n, double amplitude, double phase, double noise_multiplier) {
  std::uniform_real_distribution<double> ux(-4.0, 4.0);
  std::normal_distribution<double> n01;
  DataSet d;
  d.x.resize(n);
  d.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ux(rng);
    const double eps = n01(rng);
    d.x[i] = x;
    d.y[i] = sinusoid_mean(amplitude, phase, x) + sinusoid_noise_scale(amplitude, phase, x) * noise_multiplier * eps;
  }
  return d;
}

}  // namespace

distributions::MoG1D MoGTask::target() const {
  return distributions::make_mog({0.5, 0.5}, {mu1, mu2}, {sigma1, sigma2});
}

double sinusoid_mean(double amplitude, double phase, double x) { return amplitude * std::sin(x + phase); }

double sinusoid_noise_scale(double amplitude, double phase, double x) {
  return 0.5 * amplitude * std::abs(std::cos(0.5 * (x + phase)));
}

TaskSampler TaskSampler::frozen(std::uint64_t seed, std::size_t n) {
  if (n == 0) throw std::invalid_argument("TaskSampler::frozen: empty task set");
  return {seed, SamplerMode::FrozenSet, n};
}

TaskSampler TaskSampler::stream(std::uint64_t seed) { return {seed, SamplerMode::InfiniteStream, 0}; }

std::vector<std::uint64_t> TaskSampler::select(std::uint64_t meta_iteration, std::size_t m) const {
  std::vector<std::uint64_t> out(m);
  if (mode == SamplerMode::InfiniteStream) {
    for (std::size_t j = 0; j < m; ++j) out[j] = meta_iteration * m + j;
    return out;
  }
  if (m > frozen_count) {
    throw std::invalid_argument("TaskSampler::select: M = " + std::to_string(m) + " exceeds the frozen set size " +
                                std::to_string(frozen_count));
  }
  std::vector<std::uint64_t> pool(frozen_count);
  std::iota(pool.begin(), pool.end(), 0);
  auto rng = make_rng({master_seed, static_cast<std::uint64_t>(Stream::TaskSelect), meta_iteration});
  for (std::size_t j = 0; j < m; ++j) {
    std::uniform_int_distribution<std::size_t> pick(j, frozen_count - 1);
    std::swap(pool[j], pool[pick(rng)]);
    out[j] = pool[j];
  }
  return out;
}

MoGTask sample_mog_task(const TaskSampler& sampler, std::uint64_t idx, Split split) {
  auto rng = make_rng({sampler.master_seed, static_cast<std::uint64_t>(param_stream(split)), idx});
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  MoGTask t;
  t.split = split;
  t.index = idx;
  t.mu1 = 3.0 * u01(rng);
  t.sigma1 = 0.5 + 0.5 * u01(rng);
  t.mu2 = t.mu1 + 3.0;
  t.sigma2 = 2.0 * t.sigma1;
  t.grid = distributions::quadrature_grid(t.target(), distributions::DiagGaussian{{0.0}, {0.0}});
  return t;
}

SinusoidTask sample_sinusoid_task(const TaskSampler& sampler, std::uint64_t idx, SinusoidSizes sizes, Split split,
                                  double noise_multiplier) {
  if (sizes.n_train < 1 || sizes.n_meta < 1 || sizes.n_test < 1) {
    throw std::invalid_argument("sample_sinusoid_task: every split needs at least one point");
  }
  auto rng = make_rng({sampler.master_seed, static_cast<std::uint64_t>(param_stream(split)), idx});
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SinusoidTask t;
  t.split = split;
  t.index = idx;
  t.amplitude = 5.0 + 5.0 * u01(rng);
  t.phase = u01(rng);
  const std::uint64_t base = static_cast<std::uint64_t>(Stream::TaskData);
  const std::uint64_t s = static_cast<std::uint64_t>(split);
  auto r_train = make_rng({sampler.master_seed, base, s, idx, 0});
  auto r_meta = make_rng({sampler.master_seed, base, s, idx, 1});
  auto r_test = make_rng({sampler.master_seed, base, s, idx, 2});
  t.train = draw_points(r_train, sizes.n_train, t.amplitude, t.phase, noise_multiplier);
  t.meta = draw_points(r_meta, sizes.n_meta, t.amplitude, t.phase, noise_multiplier);
  t.test = draw_points(r_test, sizes.n_test, t.amplitude, t.phase, noise_multiplier);
  return t;
}

std::pair<DataSet, DataSet> minibatch(const SinusoidTask& task, std::size_t size, std::mt19937_64& rng) {
  if (size % 2 != 0) throw std::invalid_argument("minibatch: size must be even, got " + std::to_string(size));
  const std::size_t n = task.train.size();
  if (size > n) throw std::invalid_argument("minibatch: size exceeds the train split");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t j = 0; j < size; ++j) {
    std::uniform_int_distribution<std::size_t> pick(j, n - 1);
    std::swap(order[j], order[pick(rng)]);
  }
  std::pair<DataSet, DataSet> out;
  for (std::size_t j = 0; j < size; ++j) {
    DataSet& dst = j < size / 2 ? out.first : out.second;
    dst.x.push_back(task.train.x[order[j]]);
    dst.y.push_back(task.train.y[order[j]]);
  }
  return out;
}

const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }

nlohmann::json to_json(const MoGTask& task) {
  return {{"kind", "mog"},       {"split", to_string(task.split)}, {"index", task.index},
          {"mu1", task.mu1},     {"sigma1", task.sigma1},          {"mu2", task.mu2},
          {"sigma2", task.sigma2}, {"grid_points", task.grid.x.size()}, {"grid_lo", task.grid.x.front()},
          {"grid_hi", task.grid.x.back()}};
}

nlohmann::json to_json(const SinusoidTask& task) {
  return {{"kind", "sinusoid"},
          {"split", to_string(task.split)},
          {"index", task.index},
          {"amplitude", task.amplitude},
          {"phase", task.phase},
          {"n_train", task.train.size()},
          {"n_meta", task.meta.size()},
          {"n_test", task.test.size()}};
}

}  // namespace metadiv::tasks
