#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace metadiv {

/// Independent random streams. Each consumer draws from its own stream so
/// adding draws in one place never shifts another.
enum class Stream : std::uint64_t {
  InnerNoise = 1,
  MetaLossNoise = 2,
  TaskSelect = 3,
  TrainTasks = 4,
  TestTasks = 5,
  TaskData = 6,
  Minibatch = 7,
  Init = 8,
  Evaluation = 9,
  Pretrain = 10,
  Check = 11,
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Hashes an ordered key into a 64-bit seed.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

/// A generator seeded from an ordered key.
std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> parts);

/// Key of one noise batch: (master seed, task id, meta-iteration, inner step)
/// plus the consuming stream and a retry counter.
struct NoiseKey {
  std::uint64_t master_seed = 0;
  std::uint64_t task_id = 0;
  std::uint64_t meta_iteration = 0;
  std::uint64_t inner_step = 0;
  Stream stream = Stream::InnerNoise;
  std::uint64_t retry = 0;

  std::uint64_t seed() const;
};

/// Standard normal draws laid out as a rows x cols column-major matrix.
struct NoiseDraw {
  std::vector<double> epsilon;
  std::size_t rows = 0;
  std::size_t cols = 0;
  NoiseKey key;
};

NoiseDraw draw_noise(const NoiseKey& key, std::size_t rows, std::size_t cols);

}  // namespace metadiv
