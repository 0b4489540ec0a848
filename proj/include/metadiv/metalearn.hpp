#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "metadiv/autodiff.hpp"
#include "metadiv/divergences.hpp"
#include "metadiv/metaloss.hpp"
#include "metadiv/optim.hpp"
#include "metadiv/tasks.hpp"

namespace metadiv::metalearn {

enum class Algorithm { MetaD, MetaDPhi };

struct MetaConfig {
  Algorithm algorithm = Algorithm::MetaD;
  std::size_t B = 1;
  std::size_t M = 5;
  double beta = 0.05;
  double gamma = 1e-2;
  double tau = 1e-3;
  std::size_t meta_iters = 1000;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t retries = 3;
  /// Wall-clock seconds in the trace; off keeps traces byte-deterministic.
  bool record_time = false;

  void validate() const;
};

struct TaskRef {
  tasks::Split split = tasks::Split::Train;
  std::uint64_t index = 0;

  /// Unique id used for noise keys and the per-task registry.
  std::uint64_t id() const;
};

/// Particles for one divergence-gradient evaluation.
struct ParticleBatch {
  ad::Var theta;
  divergences::RatioBatch ratios;
  /// Nodes of phi entering log p directly.
  std::vector<ad::Var> hyper;
};

/// One task inside one meta-iteration (or one meta-test step), with its
/// data split and noise keys fixed at construction.
class Episode {
 public:
  virtual ~Episode() = default;
  virtual ParticleBatch particles(ad::Graph& g, ad::Var phi, std::uint64_t inner_step,
                                  std::uint64_t retry) const = 0;
  virtual metaloss::MetaLossValue meta_loss(ad::Graph& g, ad::Var phi) const = 0;
};

struct TaskMetrics {
  double meta_loss = 0.0;
  double test_ll = 0.0;
  double rmse = 0.0;
  bool has_predictive = false;
};

class Problem {
 public:
  virtual ~Problem() = default;
  virtual std::string name() const = 0;
  virtual std::size_t phi_size() const = 0;
  /// Initialization shared by every task (and the start of phi_shared).
  virtual std::vector<double> initial_phi() const = 0;
  /// Multiplier applied to the divergence gradient in the inner step.
  virtual double inner_scale() const { return 1.0; }
  virtual tasks::TaskSampler train_sampler() const = 0;
  virtual std::unique_ptr<Episode> episode(TaskRef task, std::uint64_t meta_iteration) const = 0;
  virtual std::unique_ptr<Episode> test_episode(TaskRef task, std::uint64_t step) const = 0;
  virtual TaskMetrics evaluate(TaskRef task, std::span<const double> phi) const = 0;
  virtual nlohmann::json describe() const = 0;
};

struct TraceRow {
  std::uint64_t iter = 0;
  std::uint64_t task_id = 0;
  double meta_loss = 0.0;
  double alpha_or_hnorm = 0.0;
  double seconds = 0.0;
};

struct MetaState {
  Algorithm algorithm = Algorithm::MetaD;
  divergences::DivergenceSpec eta;
  std::vector<double> phi_shared;
  std::map<std::uint64_t, std::vector<double>> phi_registry;
  Adam eta_opt;
  Adam phi_opt;
  std::uint64_t iteration = 0;
};

/// alpha for alpha specs, the Euclidean norm of the h weights otherwise.
double eta_summary(const divergences::DivergenceSpec& spec);

/// B differentiable steps phi <- phi - beta * scale * grad D_eta(phi). Throws
/// NumericalError naming the step if a gradient is not finite.
ad::Var inner_adapt(ad::Graph& g, ad::Var phi, ad::Var eta, ad::Var beta, const divergences::DivergenceSpec& spec,
                    const Episode& episode, std::size_t B, double scale, std::uint64_t retry = 0);

/// Result of one task's inner loop and meta-loss inside a meta-iteration.
struct TaskStep {
  double meta_loss = 0.0;
  std::vector<double> grad_eta;
  std::vector<double> grad_phi0;
  std::vector<double> adapted_phi;
};

/// Runs inner_adapt from phi0 and differentiates the meta-loss in eta and phi0,
/// retrying with fresh inner noise on non-finite values.
TaskStep task_step(const Problem& problem, const MetaConfig& cfg, const divergences::DivergenceSpec& spec,
                   std::span<const double> phi0, TaskRef task, std::uint64_t meta_iteration);

MetaState initial_state(const Problem& problem, const MetaConfig& cfg, const divergences::DivergenceSpec& eta0);

using TraceSink = std::function<void(const TraceRow&)>;

/// Meta-D: persistent detached per-task phi, outer updates of eta.
MetaState meta_train_D(const Problem& problem, const MetaConfig& cfg, MetaState state, const TraceSink& sink = {});
/// Meta-D&phi: shared initialization phi learned jointly with eta.
MetaState meta_train_D_phi(const Problem& problem, const MetaConfig& cfg, MetaState state,
                           const TraceSink& sink = {});
MetaState meta_train(const Problem& problem, const MetaConfig& cfg, MetaState state, const TraceSink& sink = {});

/// Plain descent with a fixed divergence from phi0 for iters steps.
std::vector<double> descend(const Problem& problem, const divergences::DivergenceSpec& spec,
                            std::span<const double> phi0, TaskRef task, std::size_t iters, double beta,
                            std::size_t retries = 3);

/// Meta-test: descent from a fresh initialization (meta-D) or phi_shared
/// (meta-D&phi), then task metrics.
TaskMetrics meta_test(const Problem& problem, const MetaState& state, TaskRef task, std::size_t iters, double beta);

nlohmann::json to_json(const MetaConfig& cfg);
MetaConfig config_from_json(const nlohmann::json& doc);
nlohmann::json checkpoint_json(const MetaState& state, const MetaConfig& cfg, const Problem& problem);
MetaState state_from_checkpoint(const nlohmann::json& doc);

const char* to_string(Algorithm a);

/// Runs fn(i) for i in [0, n) on up to workers threads. Results must be
/// written to per-index slots; the first exception is rethrown.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace metadiv::metalearn
