#include "metadiv/problems.hpp"

#include <cmath>
#include <stdexcept>

#include "metadiv/distributions.hpp"
#include "metadiv/rng.hpp"

namespace metadiv::problems {

using ad::Graph;
using ad::Var;
using metalearn::ParticleBatch;
using metalearn::TaskRef;

namespace {

tasks::TaskSampler sampler_for(std::uint64_t seed, std::size_t n_train) {
  return tasks::TaskSampler::frozen(seed, n_train);
}

NoiseKey inner_key(std::uint64_t seed, TaskRef task, std::uint64_t iteration, std::uint64_t step,
                   std::uint64_t retry) {
  return {.master_seed = seed,
          .task_id = task.id(),
          .meta_iteration = iteration,
          .inner_step = step,
          .stream = Stream::InnerNoise,
          .retry = retry};
}

class MoGEpisode : public metalearn::Episode {
 public:
  MoGEpisode(const MoGSuite& suite, tasks::MoGTask task, TaskRef ref, std::uint64_t iteration)
      : suite_(suite), task_(std::move(task)), target_(task_.target()), ref_(ref), iteration_(iteration) {}

  ParticleBatch particles(Graph&, Var phi, std::uint64_t inner_step, std::uint64_t retry) const override {
    const auto eps = draw_noise(inner_key(suite_.seed, ref_, iteration_, inner_step, retry), 1, suite_.K);
    const auto q = distributions::gaussian_view(phi, 1);
    Var theta = distributions::reparam_sample(q, eps);
    auto ratios = divergences::exact_ratios(distributions::mog_log_density(theta, target_),
                                            distributions::gaussian_log_density(q, theta));
    return {theta, ratios, {}};
  }

  metaloss::MetaLossValue meta_loss(Graph&, Var phi) const override {
    const auto q = distributions::gaussian_view(phi, 1);
    if (suite_.loss == metaloss::LossKind::TV) return metaloss::tv_loss(q, target_, task_.grid);
    const auto eps = draw_noise(
        {.master_seed = suite_.seed, .meta_iteration = iteration_, .stream = Stream::MetaLossNoise}, 1, suite_.meta_K);
    return metaloss::renyi_half_loss(q, target_, eps);
  }

 private:
  MoGSuite suite_;
  tasks::MoGTask task_;
  distributions::MoG1D target_;
  TaskRef ref_;
  std::uint64_t iteration_;
};

tasks::DataSet standardize(const tasks::DataSet& d, double shift, double scale) {
  tasks::DataSet out = d;
  for (auto& y : out.y) y = (y - shift) / scale;
  return out;
}

class SinusoidEpisode : public metalearn::Episode {
 public:
  SinusoidEpisode(const SinusoidSuite& suite, TaskRef ref, std::uint64_t iteration, tasks::DataSet inner,
                  tasks::DataSet meta)
      : suite_(suite), ref_(ref), iteration_(iteration), inner_(std::move(inner)), meta_(std::move(meta)) {}

  ParticleBatch particles(Graph&, Var phi, std::uint64_t inner_step, std::uint64_t retry) const override {
    const auto view = bnn::posterior_view(phi);
    const auto eps = draw_noise(inner_key(suite_.seed, ref_, iteration_, inner_step, retry), bnn::kWeights, suite_.K);
    Var theta = distributions::reparam_sample(view.q, eps);
    Var log_joint = bnn::bnn_log_joint(theta, inner_, view.log_obs_noise, suite_.sizes.n_train);
    auto ratios = divergences::self_normalized_ratios(log_joint, distributions::gaussian_log_density(view.q, theta));
    return {theta, ratios, {view.log_obs_noise}};
  }

  metaloss::MetaLossValue meta_loss(Graph&, Var phi) const override {
    if (meta_.size() == 0) throw std::invalid_argument("sinusoid episode has no meta data");
    const auto view = bnn::posterior_view(phi);
    const auto eps = draw_noise({.master_seed = suite_.seed,
                                 .task_id = ref_.id(),
                                 .meta_iteration = iteration_,
                                 .stream = Stream::MetaLossNoise},
                                bnn::kWeights, suite_.S);
    Var theta = distributions::reparam_sample(view.q, eps);
    return metaloss::nll_loss(bnn::bnn_loglik_matrix(theta, meta_, view.log_obs_noise));
  }

 private:
  SinusoidSuite suite_;
  TaskRef ref_;
  std::uint64_t iteration_;
  tasks::DataSet inner_;
  tasks::DataSet meta_;
};

}  // namespace

MoGProblem::MoGProblem(MoGSuite suite) : suite_(suite) {
  if (suite_.n_train_tasks < 1) throw std::invalid_argument("MoGSuite: need at least one training task");
  if (suite_.K < 1 || suite_.eval_K < 2 || suite_.meta_K < 2) throw std::invalid_argument("MoGSuite: sample counts");
  if (suite_.loss == metaloss::LossKind::NLL) throw std::invalid_argument("MoGSuite: NLL needs data");
}

tasks::TaskSampler MoGProblem::train_sampler() const { return sampler_for(suite_.seed, suite_.n_train_tasks); }

tasks::MoGTask MoGProblem::task(TaskRef ref) const {
  return tasks::sample_mog_task(train_sampler(), ref.index, ref.split);
}

std::unique_ptr<metalearn::Episode> MoGProblem::episode(TaskRef ref, std::uint64_t meta_iteration) const {
  return std::make_unique<MoGEpisode>(suite_, task(ref), ref, meta_iteration);
}

std::unique_ptr<metalearn::Episode> MoGProblem::test_episode(TaskRef ref, std::uint64_t step) const {
  return episode(ref, step);
}

metalearn::TaskMetrics MoGProblem::evaluate(TaskRef ref, std::span<const double> phi) const {
  if (phi.size() != 2) throw std::invalid_argument("MoGProblem::evaluate: phi must have length 2");
  const auto t = task(ref);
  Graph g;
  const auto q = distributions::gaussian_view(g.column(phi), 1);
  metalearn::TaskMetrics m;
  if (suite_.loss == metaloss::LossKind::TV) {
    m.meta_loss = metaloss::tv_loss(q, t.target(), t.grid).value.item();
  } else {
    const auto eps =
        draw_noise({.master_seed = suite_.seed, .task_id = ref.id(), .stream = Stream::Evaluation}, 1, suite_.eval_K);
    m.meta_loss = metaloss::renyi_half_loss(q, t.target(), eps).value.item();
  }
  return m;
}

nlohmann::json MoGProblem::describe() const {
  return {{"problem", name()},
          {"seed", suite_.seed},
          {"n_train_tasks", suite_.n_train_tasks},
          {"loss", metaloss::to_string(suite_.loss)},
          {"K", suite_.K},
          {"meta_K", suite_.meta_K},
          {"eval_K", suite_.eval_K}};
}

SinusoidProblem::SinusoidProblem(SinusoidSuite suite) : suite_(suite) {
  if (suite_.n_train_tasks < 1) throw std::invalid_argument("SinusoidSuite: need at least one training task");
  if (suite_.K < 2) throw std::invalid_argument("SinusoidSuite: K must be >= 2");
  if (suite_.S < 1) throw std::invalid_argument("SinusoidSuite: S must be >= 1");
  if (suite_.sizes.n_train < 2) throw std::invalid_argument("SinusoidSuite: train split needs two points");
  for (std::size_t b : {suite_.batch, suite_.test_batch}) {
    if (b % 2 != 0 || b > suite_.sizes.n_train) throw std::invalid_argument("SinusoidSuite: bad batch size");
  }
}

std::vector<double> SinusoidProblem::initial_phi() const { return bnn::initial_posterior(suite_.seed).flatten(); }

double SinusoidProblem::inner_scale() const { return 1.0 / static_cast<double>(suite_.sizes.n_train); }

tasks::TaskSampler SinusoidProblem::train_sampler() const { return sampler_for(suite_.seed, suite_.n_train_tasks); }

SinusoidProblem::Prepared SinusoidProblem::prepare(TaskRef ref) const {
  const auto raw =
      tasks::sample_sinusoid_task(train_sampler(), ref.index, suite_.sizes, ref.split, suite_.noise_multiplier);
  const auto& y = raw.train.y;
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double var = 0.0;
  for (double v : y) var += (v - mean) * (v - mean);
  var /= static_cast<double>(y.size());
  const double scale = var > 1e-12 ? std::sqrt(var) : 1.0;
  Prepared p{raw, mean, scale};
  p.task.train = standardize(raw.train, mean, scale);
  p.task.meta = standardize(raw.meta, mean, scale);
  p.task.test = standardize(raw.test, mean, scale);
  return p;
}

std::unique_ptr<metalearn::Episode> SinusoidProblem::episode(TaskRef ref, std::uint64_t meta_iteration) const {
  auto prep = prepare(ref);
  if (suite_.batch == 0) {
    return std::make_unique<SinusoidEpisode>(suite_, ref, meta_iteration, std::move(prep.task.train),
                                             std::move(prep.task.meta));
  }
  auto rng = make_rng({suite_.seed, static_cast<std::uint64_t>(Stream::Minibatch), ref.id(), meta_iteration});
  auto [inner, meta] = tasks::minibatch(prep.task, suite_.batch, rng);
  return std::make_unique<SinusoidEpisode>(suite_, ref, meta_iteration, std::move(inner), std::move(meta));
}

std::unique_ptr<metalearn::Episode> SinusoidProblem::test_episode(TaskRef ref, std::uint64_t step) const {
  auto prep = prepare(ref);
  if (suite_.test_batch == 0) {
    return std::make_unique<SinusoidEpisode>(suite_, ref, step, std::move(prep.task.train), tasks::DataSet{});
  }
  auto rng = make_rng({suite_.seed, static_cast<std::uint64_t>(Stream::Minibatch), ref.id(), step});
  auto [inner, meta] = tasks::minibatch(prep.task, suite_.test_batch, rng);
  // Descent uses the whole minibatch; there is no meta-loss at test time.
  inner.x.insert(inner.x.end(), meta.x.begin(), meta.x.end());
  inner.y.insert(inner.y.end(), meta.y.begin(), meta.y.end());
  return std::make_unique<SinusoidEpisode>(suite_, ref, step, std::move(inner), tasks::DataSet{});
}

metalearn::TaskMetrics SinusoidProblem::evaluate(TaskRef ref, std::span<const double> phi) const {
  if (phi.size() != bnn::kPhiSize) throw std::invalid_argument("SinusoidProblem::evaluate: bad phi size");
  const auto prep = prepare(ref);
  tasks::DataSet test = prep.task.test;
  for (auto& y : test.y) y = prep.y_shift + prep.y_scale * y;
  const auto pm = bnn::predictive_metrics(bnn::BnnPosterior::from_flat(phi), test, suite_.S,
                                          {.master_seed = suite_.seed, .task_id = ref.id()}, prep.y_shift,
                                          prep.y_scale);
  return {-pm.test_ll, pm.test_ll, pm.rmse, true};
}

nlohmann::json SinusoidProblem::describe() const {
  return {{"problem", name()},
          {"seed", suite_.seed},
          {"n_train_tasks", suite_.n_train_tasks},
          {"n_train", suite_.sizes.n_train},
          {"n_meta", suite_.sizes.n_meta},
          {"n_test", suite_.sizes.n_test},
          {"batch", suite_.batch},
          {"test_batch", suite_.test_batch},
          {"K", suite_.K},
          {"S", suite_.S},
          {"noise_multiplier", suite_.noise_multiplier}};
}

}  // namespace metadiv::problems
