#include "metadiv/metalearn.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>

#include "metadiv/errors.hpp"

namespace metadiv::metalearn {

using ad::Graph;
using ad::Shape;
using ad::Var;
using divergences::DivergenceSpec;
using divergences::Kind;

namespace {

constexpr int kCheckpointVersion = 1;
constexpr std::uint64_t kTestIdBase = std::uint64_t{1} << 32;

Var eta_leaf(Graph& g, const DivergenceSpec& spec) {
  return spec.kind == Kind::Alpha ? g.scalar(spec.alpha_raw) : g.column(spec.h_weights);
}

bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

nlohmann::json adam_json(const Adam& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"m", a.m}, {"v", a.v}, {"t", a.t}};
}

Adam adam_from_json(const nlohmann::json& j) {
  Adam a;
  a.lr = j.at("lr").get<double>();
  a.beta1 = j.at("beta1").get<double>();
  a.beta2 = j.at("beta2").get<double>();
  a.eps = j.at("eps").get<double>();
  a.m = j.at("m").get<std::vector<double>>();
  a.v = j.at("v").get<std::vector<double>>();
  a.t = j.at("t").get<std::uint64_t>();
  return a;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

void MetaConfig::validate() const {
  if (B < 1) throw std::invalid_argument("MetaConfig: B must be >= 1");
  if (M < 1) throw std::invalid_argument("MetaConfig: M must be >= 1");
  if (!(beta > 0.0)) throw std::invalid_argument("MetaConfig: beta must be > 0");
  if (!(gamma >= 0.0)) throw std::invalid_argument("MetaConfig: gamma must be >= 0");
  if (!(tau >= 0.0)) throw std::invalid_argument("MetaConfig: tau must be >= 0");
  if (workers < 1) throw std::invalid_argument("MetaConfig: workers must be >= 1");
}

std::uint64_t TaskRef::id() const { return (split == tasks::Split::Train ? 0 : kTestIdBase) + index; }

double eta_summary(const DivergenceSpec& spec) {
  if (spec.kind == Kind::Alpha) return spec.effective_alpha();
  double ss = 0.0;
  for (double w : spec.h_weights) ss += w * w;
  return std::sqrt(ss);
}

Var inner_adapt(Graph& g, Var phi, Var eta, Var beta, const DivergenceSpec& spec, const Episode& episode,
                std::size_t B, double scale, std::uint64_t retry) {
  for (std::size_t step = 0; step < B; ++step) {
    Var d;
    try {
      const ParticleBatch batch = episode.particles(g, phi, step, retry);
      d = divergences::divergence_gradient(spec, eta, phi, batch.theta, batch.ratios, batch.hyper);
    } catch (const NumericalError& e) {
      throw NumericalError("inner step " + std::to_string(step) + ": " + e.what());
    }
    if (!all_finite(d.value())) {
      throw NumericalError("inner step " + std::to_string(step) + ": non-finite divergence gradient");
    }
    phi = phi - (beta * scale) * d;
  }
  return phi;
}

TaskStep task_step(const Problem& problem, const MetaConfig& cfg, const DivergenceSpec& spec,
                   std::span<const double> phi0, TaskRef task, std::uint64_t meta_iteration) {
  const auto episode = problem.episode(task, meta_iteration);
  std::string last_error;
  for (std::uint64_t retry = 0; retry <= cfg.retries; ++retry) {
    try {
      Graph g;
      const Var eta = eta_leaf(g, spec);
      const Var start = g.column(phi0);
      const Var beta = g.scalar(cfg.beta);
      const Var adapted = inner_adapt(g, start, eta, beta, spec, *episode, cfg.B, problem.inner_scale(), retry);
      const auto loss = episode->meta_loss(g, adapted);
      const double value = loss.value.item();
      if (!std::isfinite(value)) throw NumericalError("meta-loss is not finite");
      const std::vector<Var> wrt{eta, start};
      const auto grads = g.grad(loss.value, wrt);
      TaskStep out;
      out.meta_loss = value;
      out.grad_eta = grads[0].to_vector();
      out.grad_phi0 = grads[1].to_vector();
      out.adapted_phi = adapted.to_vector();
      if (!all_finite(out.grad_eta) || !all_finite(out.grad_phi0)) throw NumericalError("meta-gradient is not finite");
      return out;
    } catch (const NumericalError& e) {
      last_error = e.what();
    }
  }
  throw NumericalError("task " + std::to_string(task.id()) + " at meta-iteration " + std::to_string(meta_iteration) +
                       " failed after " + std::to_string(cfg.retries) + " retries: " + last_error);
}

MetaState initial_state(const Problem& problem, const MetaConfig& cfg, const DivergenceSpec& eta0) {
  cfg.validate();
  MetaState s;
  s.algorithm = cfg.algorithm;
  s.eta = eta0;
  s.eta_opt.lr = cfg.gamma;
  s.phi_opt.lr = cfg.tau;
  if (cfg.algorithm == Algorithm::MetaDPhi) s.phi_shared = problem.initial_phi();
  return s;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  std::size_t error_index = n;
  const auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        // Keep the lowest failing index so the reported error does not depend on scheduling.
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t count = std::min(workers, n);
  pool.reserve(count);
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

MetaState run_meta(const Problem& problem, const MetaConfig& cfg, MetaState state, const TraceSink& sink,
                   Algorithm algorithm) {
  cfg.validate();
  if (state.algorithm != algorithm) throw std::invalid_argument("meta_train: state built for another algorithm");
  const auto sampler = problem.train_sampler();
  const auto start = std::chrono::steady_clock::now();
  state.eta_opt.lr = cfg.gamma;
  state.phi_opt.lr = cfg.tau;
  for (std::uint64_t it = state.iteration; it < cfg.meta_iters; ++it) {
    const auto indices = sampler.select(it, cfg.M);
    std::vector<TaskRef> refs;
    std::vector<std::vector<double>> starts;
    for (auto idx : indices) {
      const TaskRef ref{tasks::Split::Train, idx};
      refs.push_back(ref);
      if (algorithm == Algorithm::MetaDPhi) {
        starts.push_back(state.phi_shared);
      } else {
        auto found = state.phi_registry.find(ref.id());
        starts.push_back(found == state.phi_registry.end() ? problem.initial_phi() : found->second);
      }
    }
    std::vector<TaskStep> steps(refs.size());
    parallel_for(refs.size(), cfg.workers,
                 [&](std::size_t j) { steps[j] = task_step(problem, cfg, state.eta, starts[j], refs[j], it); });

    // Ordered reduction keeps results independent of the worker count.
    const double inv_m = 1.0 / static_cast<double>(refs.size());
    std::vector<double> g_eta(steps[0].grad_eta.size(), 0.0);
    std::vector<double> g_phi(steps[0].grad_phi0.size(), 0.0);
    for (const auto& s : steps) {
      for (std::size_t i = 0; i < g_eta.size(); ++i) g_eta[i] += s.grad_eta[i] * inv_m;
      if (algorithm == Algorithm::MetaDPhi) {
        for (std::size_t i = 0; i < g_phi.size(); ++i) g_phi[i] += s.grad_phi0[i] * inv_m;
      }
    }
    const double summary = eta_summary(state.eta);
    const double elapsed = cfg.record_time ? seconds_since(start) : 0.0;
    if (sink) {
      for (std::size_t j = 0; j < refs.size(); ++j) sink({it, refs[j].id(), steps[j].meta_loss, summary, elapsed});
    }

    auto eta = state.eta.parameters();
    state.eta_opt.step(eta, g_eta);
    state.eta.set_parameters(eta);
    if (algorithm == Algorithm::MetaDPhi) {
      state.phi_opt.step(state.phi_shared, g_phi);
    } else {
      for (std::size_t j = 0; j < refs.size(); ++j) state.phi_registry[refs[j].id()] = steps[j].adapted_phi;
    }
    state.iteration = it + 1;
  }
  return state;
}

}  // namespace

MetaState meta_train_D(const Problem& problem, const MetaConfig& cfg, MetaState state, const TraceSink& sink) {
  return run_meta(problem, cfg, std::move(state), sink, Algorithm::MetaD);
}

MetaState meta_train_D_phi(const Problem& problem, const MetaConfig& cfg, MetaState state, const TraceSink& sink) {
  return run_meta(problem, cfg, std::move(state), sink, Algorithm::MetaDPhi);
}

MetaState meta_train(const Problem& problem, const MetaConfig& cfg, MetaState state, const TraceSink& sink) {
  return run_meta(problem, cfg, std::move(state), sink, cfg.algorithm);
}

std::vector<double> descend(const Problem& problem, const DivergenceSpec& spec, std::span<const double> phi0,
                            TaskRef task, std::size_t iters, double beta, std::size_t retries) {
  std::vector<double> phi(phi0.begin(), phi0.end());
  for (std::size_t step = 0; step < iters; ++step) {
    const auto episode = problem.test_episode(task, step);
    std::string last_error;
    bool done = false;
    for (std::uint64_t retry = 0; retry <= retries && !done; ++retry) {
      try {
        Graph g;
        const Var eta = eta_leaf(g, spec);
        const Var start = g.column(phi);
        phi = inner_adapt(g, start, eta, g.scalar(beta), spec, *episode, 1, problem.inner_scale(), retry).to_vector();
        done = true;
      } catch (const NumericalError& e) {
        last_error = e.what();
      }
    }
    if (!done) {
      throw NumericalError("descent on task " + std::to_string(task.id()) + " failed at step " +
                           std::to_string(step) + ": " + last_error);
    }
  }
  return phi;
}

TaskMetrics meta_test(const Problem& problem, const MetaState& state, TaskRef task, std::size_t iters, double beta) {
  const std::vector<double> start = state.algorithm == Algorithm::MetaDPhi ? state.phi_shared : problem.initial_phi();
  return problem.evaluate(task, descend(problem, state.eta, start, task, iters, beta));
}

const char* to_string(Algorithm a) { return a == Algorithm::MetaD ? "meta-d" : "meta-dphi"; }

nlohmann::json to_json(const MetaConfig& c) {
  return {{"algorithm", to_string(c.algorithm)},
          {"B", c.B},
          {"M", c.M},
          {"beta", c.beta},
          {"gamma", c.gamma},
          {"tau", c.tau},
          {"meta_iters", c.meta_iters},
          {"seed", c.seed},
          {"retries", c.retries},
          {"record_time", c.record_time}};
}

MetaConfig config_from_json(const nlohmann::json& doc) {
  MetaConfig c;
  const auto algo = doc.at("algorithm").get<std::string>();
  if (algo != "meta-d" && algo != "meta-dphi") throw std::invalid_argument("MetaConfig: unknown algorithm " + algo);
  c.algorithm = algo == "meta-d" ? Algorithm::MetaD : Algorithm::MetaDPhi;
  c.B = doc.at("B").get<std::size_t>();
  c.M = doc.at("M").get<std::size_t>();
  c.beta = doc.at("beta").get<double>();
  c.gamma = doc.at("gamma").get<double>();
  c.tau = doc.at("tau").get<double>();
  c.meta_iters = doc.at("meta_iters").get<std::size_t>();
  c.seed = doc.at("seed").get<std::uint64_t>();
  c.retries = doc.at("retries").get<std::size_t>();
  c.record_time = doc.at("record_time").get<bool>();
  c.validate();
  return c;
}

nlohmann::json checkpoint_json(const MetaState& state, const MetaConfig& cfg, const Problem& problem) {
  nlohmann::json registry = nlohmann::json::array();
  for (const auto& [id, phi] : state.phi_registry) registry.push_back({{"task_id", id}, {"phi", phi}});
  nlohmann::json st = {{"algorithm", to_string(state.algorithm)},
                       {"eta", divergences::to_json(state.eta)},
                       {"eta_opt", adam_json(state.eta_opt)},
                       {"iteration", state.iteration}};
  if (state.algorithm == Algorithm::MetaDPhi) {
    st["phi_shared"] = state.phi_shared;
    st["phi_opt"] = adam_json(state.phi_opt);
  } else {
    st["phi_registry"] = registry;
  }
  return {{"version", kCheckpointVersion}, {"config", to_json(cfg)}, {"problem", problem.describe()}, {"state", st}};
}

MetaState state_from_checkpoint(const nlohmann::json& doc) {
  try {
    if (doc.at("version").get<int>() != kCheckpointVersion) {
      throw std::invalid_argument("checkpoint: unsupported version " + doc.at("version").dump());
    }
    const auto& st = doc.at("state");
    MetaState s;
    const auto algo = st.at("algorithm").get<std::string>();
    if (algo != "meta-d" && algo != "meta-dphi") throw std::invalid_argument("checkpoint: unknown algorithm " + algo);
    s.algorithm = algo == "meta-d" ? Algorithm::MetaD : Algorithm::MetaDPhi;
    s.eta = divergences::spec_from_json(st.at("eta"));
    s.eta_opt = adam_from_json(st.at("eta_opt"));
    s.iteration = st.at("iteration").get<std::uint64_t>();
    if (s.algorithm == Algorithm::MetaDPhi) {
      s.phi_shared = st.at("phi_shared").get<std::vector<double>>();
      s.phi_opt = adam_from_json(st.at("phi_opt"));
    } else {
      for (const auto& e : st.at("phi_registry")) {
        s.phi_registry[e.at("task_id").get<std::uint64_t>()] = e.at("phi").get<std::vector<double>>();
      }
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace metadiv::metalearn
