#include "metadiv/rng.hpp"

namespace metadiv {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p));
  return h;
}

std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> parts) {
  return std::mt19937_64(derive_seed(parts));
}

std::uint64_t NoiseKey::seed() const {
  return derive_seed({master_seed, static_cast<std::uint64_t>(stream), task_id, meta_iteration,
                      inner_step, retry});
}

NoiseDraw draw_noise(const NoiseKey& key, std::size_t rows, std::size_t cols) {
  NoiseDraw d;
  d.rows = rows;
  d.cols = cols;
  d.key = key;
  d.epsilon.resize(rows * cols);
  std::mt19937_64 rng(key.seed());
  std::normal_distribution<double> n01;
  for (double& e : d.epsilon) e = n01(rng);
  return d;
}

}  // namespace metadiv
