#pragma once

#include <cstdint>

#include "metadiv/bnn.hpp"
#include "metadiv/metalearn.hpp"
#include "metadiv/tasks.hpp"

namespace metadiv::problems {

/// One-dimensional Gaussian q against mixture targets. phi = [mu, log sigma],
/// initialized at [0, 0].
///
/// Noise keys (master seed = seed):
///   inner particles   {task id, meta-iteration, inner step, InnerNoise, retry}, 1 x K
///   meta-loss samples {task 0, meta-iteration, 0, MetaLossNoise}, 1 x meta_K,
///                     shared by every task of a meta-iteration
///   evaluation        {task id, 0, 0, Evaluation}, 1 x eval_K
/// Meta-test step s uses the inner key with meta-iteration s.
struct MoGSuite {
  std::uint64_t seed = 0;
  std::size_t n_train_tasks = 10;
  metaloss::LossKind loss = metaloss::LossKind::RenyiHalf;
  std::size_t K = 1000;
  std::size_t meta_K = 1000;
  std::size_t eval_K = 10000;
};

class MoGProblem : public metalearn::Problem {
 public:
  explicit MoGProblem(MoGSuite suite);

  std::string name() const override { return "mog"; }
  std::size_t phi_size() const override { return 2; }
  std::vector<double> initial_phi() const override { return {0.0, 0.0}; }
  tasks::TaskSampler train_sampler() const override;
  std::unique_ptr<metalearn::Episode> episode(metalearn::TaskRef task, std::uint64_t meta_iteration) const override;
  std::unique_ptr<metalearn::Episode> test_episode(metalearn::TaskRef task, std::uint64_t step) const override;
  metalearn::TaskMetrics evaluate(metalearn::TaskRef task, std::span<const double> phi) const override;
  nlohmann::json describe() const override;

  tasks::MoGTask task(metalearn::TaskRef ref) const;
  const MoGSuite& suite() const { return suite_; }

 private:
  MoGSuite suite_;
};

/// Mean-field BNN regression on heteroskedastic sinusoids. Targets are
/// standardized by each task's train-split mean and standard deviation;
/// predictive metrics are reported in original units.
///
/// With batch > 0 (meta-D) every meta-iteration draws a minibatch of that
/// size from the train split, keyed {seed, Minibatch, task id, iteration},
/// and splits it into an inner half and a meta half. With batch = 0
/// (meta-D&phi) the inner loop uses the train split and the meta-loss the
/// meta split. Meta-test steps use the full train split unless test_batch > 0.
struct SinusoidSuite {
  std::uint64_t seed = 0;
  std::size_t n_train_tasks = 20;
  tasks::SinusoidSizes sizes{1000, 20, 200};
  std::size_t batch = 40;
  std::size_t test_batch = 0;
  std::size_t K = 100;
  std::size_t S = 100;
  double noise_multiplier = 1.0;
};

class SinusoidProblem : public metalearn::Problem {
 public:
  explicit SinusoidProblem(SinusoidSuite suite);

  std::string name() const override { return "sinusoid"; }
  std::size_t phi_size() const override { return bnn::kPhiSize; }
  std::vector<double> initial_phi() const override;
  double inner_scale() const override;
  tasks::TaskSampler train_sampler() const override;
  std::unique_ptr<metalearn::Episode> episode(metalearn::TaskRef task, std::uint64_t meta_iteration) const override;
  std::unique_ptr<metalearn::Episode> test_episode(metalearn::TaskRef task, std::uint64_t step) const override;
  metalearn::TaskMetrics evaluate(metalearn::TaskRef task, std::span<const double> phi) const override;
  nlohmann::json describe() const override;

  /// Task with standardized targets, plus the shift and scale used.
  struct Prepared {
    tasks::SinusoidTask task;
    double y_shift = 0.0;
    double y_scale = 1.0;
  };
  Prepared prepare(metalearn::TaskRef ref) const;
  const SinusoidSuite& suite() const { return suite_; }

 private:
  SinusoidSuite suite_;
};

}  // namespace metadiv::problems
