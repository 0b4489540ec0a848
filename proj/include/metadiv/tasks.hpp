#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "json.hpp"
#include "metadiv/distributions.hpp"

namespace metadiv::tasks {

enum class Split { Train, Test };

/// Mixture target with mu1 in [0, 3], sigma1 in [0.5, 1], mu2 = mu1 + 3,
/// sigma2 = 2 sigma1, and an equal-weight mixture.
struct MoGTask {
  Split split = Split::Train;
  std::uint64_t index = 0;
  double mu1 = 0.0;
  double sigma1 = 1.0;
  double mu2 = 3.0;
  double sigma2 = 2.0;
  /// Frozen at creation so meta-gradients never see grid jitter.
  distributions::QuadratureGrid grid;

  distributions::MoG1D target() const;
};

struct DataSet {
  std::vector<double> x;
  std::vector<double> y;

  std::size_t size() const { return x.size(); }
};

struct SinusoidTask {
  Split split = Split::Train;
  std::uint64_t index = 0;
  double amplitude = 5.0;
  double phase = 0.0;
  DataSet train;
  DataSet meta;
  DataSet test;
};

double sinusoid_mean(double amplitude, double phase, double x);
/// Noise standard deviation (A/2) |cos((x + b)/2)|.
double sinusoid_noise_scale(double amplitude, double phase, double x);

enum class SamplerMode { InfiniteStream, FrozenSet };

/// Stateless source of tasks keyed by (master seed, split, index). Train and
/// test tasks come from disjoint random streams.
struct TaskSampler {
  std::uint64_t master_seed = 0;
  SamplerMode mode = SamplerMode::InfiniteStream;
  std::size_t frozen_count = 0;

  static TaskSampler frozen(std::uint64_t seed, std::size_t n);
  static TaskSampler stream(std::uint64_t seed);

  /// Training-task indices for one meta-iteration: M distinct members of the
  /// frozen set drawn uniformly, or M fresh indices from the stream.
  std::vector<std::uint64_t> select(std::uint64_t meta_iteration, std::size_t m) const;
};

MoGTask sample_mog_task(const TaskSampler& sampler, std::uint64_t idx, Split split = Split::Train);

struct SinusoidSizes {
  std::size_t n_train = 1000;
  std::size_t n_meta = 20;
  std::size_t n_test = 200;
};

/// noise_multiplier scales the noise draws; 0 gives the noiseless function.
SinusoidTask sample_sinusoid_task(const TaskSampler& sampler, std::uint64_t idx, SinusoidSizes sizes,
                                  Split split = Split::Train, double noise_multiplier = 1.0);

/// Draws size points of the train split without replacement and returns the
/// inner half and the meta half. size must be even.
std::pair<DataSet, DataSet> minibatch(const SinusoidTask& task, std::size_t size, std::mt19937_64& rng);

nlohmann::json to_json(const MoGTask& task);
nlohmann::json to_json(const SinusoidTask& task);

const char* to_string(Split s);

}  // namespace metadiv::tasks
