#include "doctest.h"

#include <cmath>
#include <random>

#include "metadiv/errors.hpp"
#include "metadiv/metalearn.hpp"
#include "metadiv/problems.hpp"

using namespace metadiv;
using namespace metadiv::metalearn;
using namespace metadiv::problems;
using divergences::DivergenceSpec;
using divergences::FMode;
using divergences::HInput;
using ad::Graph;
using ad::Shape;
using ad::Var;

namespace {

MoGSuite small_suite(metaloss::LossKind loss = metaloss::LossKind::RenyiHalf) {
  MoGSuite s;
  s.seed = 5;
  s.K = 50;
  s.meta_K = 60;
  s.eval_K = 2000;
  s.loss = loss;
  return s;
}

MetaConfig small_cfg() {
  MetaConfig c;
  c.B = 1;
  c.M = 3;
  c.beta = 0.05;
  c.gamma = 1e-2;
  c.meta_iters = 6;
  c.seed = 5;
  return c;
}

// Shifts inner-step noise keys so two B = 1 calls replay one B = 2 call.
class ShiftedEpisode : public Episode {
 public:
  ShiftedEpisode(const Episode& base, std::uint64_t offset) : base_(base), offset_(offset) {}
  ParticleBatch particles(Graph& g, Var phi, std::uint64_t step, std::uint64_t retry) const override {
    return base_.particles(g, phi, step + offset_, retry);
  }
  metaloss::MetaLossValue meta_loss(Graph& g, Var phi) const override { return base_.meta_loss(g, phi); }

 private:
  const Episode& base_;
  std::uint64_t offset_;
};

// Mixture log-density derivatives in x.
void mog_derivs(const distributions::MoG1D& p, double x, double& d1, double& d2) {
  std::vector<double> lw(p.weights.size());
  double mx = -1e300;
  for (std::size_t j = 0; j < lw.size(); ++j) {
    const double z = (x - p.means[j]) / p.scales[j];
    lw[j] = std::log(p.weights[j]) - std::log(p.scales[j]) - 0.5 * z * z;
    mx = std::max(mx, lw[j]);
  }
  double tot = 0.0;
  for (double v : lw) tot += std::exp(v - mx);
  d1 = 0.0;
  double second = 0.0;
  for (std::size_t j = 0; j < lw.size(); ++j) {
    const double r = std::exp(lw[j] - mx) / tot;
    const double s2 = p.scales[j] * p.scales[j];
    const double a = -(x - p.means[j]) / s2;
    d1 += r * a;
    second += r * (a * a - 1.0 / s2);
  }
  d2 = second - d1 * d1;
}

double mog_logpdf(const distributions::MoG1D& p, double x) { return distributions::mog_log_density(x, p); }

}  // namespace

TEST_CASE("config validation") {
  MetaConfig c;
  CHECK_NOTHROW(c.validate());
  c.B = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = MetaConfig{};
  c.beta = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = MetaConfig{};
  c.M = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  const auto round = config_from_json(to_json(small_cfg()));
  CHECK(to_json(round) == to_json(small_cfg()));
}

TEST_CASE("inner adapt basics") {
  MoGProblem prob(small_suite());
  const auto ep = prob.episode({tasks::Split::Train, 1}, 0);
  const auto spec = DivergenceSpec::alpha(0.5);
  {
    Graph g;
    Var phi = g.column(std::vector<double>{0.3, -0.2});
    Var out = inner_adapt(g, phi, g.scalar(spec.alpha_raw), g.scalar(0.0), spec, *ep, 3, 1.0);
    CHECK(out.to_vector() == phi.to_vector());
  }
  // B = 2 equals two B = 1 calls on the same per-step noise.
  Graph g;
  Var phi = g.column(std::vector<double>{0.3, -0.2});
  Var eta = g.scalar(spec.alpha_raw);
  Var beta = g.scalar(0.05);
  const auto two = inner_adapt(g, phi, eta, beta, spec, *ep, 2, 1.0).to_vector();
  Var one = inner_adapt(g, phi, eta, beta, spec, *ep, 1, 1.0);
  ShiftedEpisode shifted(*ep, 1);
  const auto again = inner_adapt(g, one, eta, beta, spec, shifted, 1, 1.0).to_vector();
  CHECK(two == again);
}

TEST_CASE("one-step update matches the closed form and its beta derivative") {
  // h = 0 gives the KL path gradient; on a mixture target it is
  // mean[-(1, sigma eps) * (dlogp(theta) + eps / sigma)].
  MoGProblem prob(small_suite());
  const TaskRef ref{tasks::Split::Train, 2};
  const auto task = prob.task(ref);
  const auto p = task.target();
  const auto ep = prob.episode(ref, 4);
  auto spec = DivergenceSpec::fnet(FMode::GExp, HInput::LogT, 1);
  spec.h_weights.assign(divergences::HLayout::kParamCount, 0.0);
  const double mu = 0.4, ls = -0.3, beta = 0.07;
  const auto eps = draw_noise({.master_seed = 5, .task_id = ref.id(), .meta_iteration = 4}, 1, 50);
  const double s = std::exp(ls);
  double gmu = 0.0, gls = 0.0;
  for (double e : eps.epsilon) {
    double d1, d2;
    mog_derivs(p, mu + s * e, d1, d2);
    const double term = d1 + e / s;
    gmu -= term / 50;
    gls -= s * e * term / 50;
  }
  Graph g;
  Var phi = g.column(std::vector<double>{mu, ls});
  Var bv = g.scalar(beta);
  Var out = inner_adapt(g, phi, g.column(spec.h_weights), bv, spec, *ep, 1, 1.0);
  const auto v = out.to_vector();
  CHECK(v[0] == doctest::Approx(mu - beta * gmu).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(ls - beta * gls).epsilon(1e-12));
  const auto dbeta = g.grad(g.sum(out), std::span<const Var>(&bv, 1))[0].item();
  CHECK(dbeta == doctest::Approx(-(gmu + gls)).epsilon(1e-10));
}

TEST_CASE("meta-gradient matches finite differences") {
  for (auto loss : {metaloss::LossKind::RenyiHalf, metaloss::LossKind::TV}) {
    MoGProblem prob(small_suite(loss));
    auto cfg = small_cfg();
    const std::vector<double> phi0{0.6, -0.1};
    const TaskRef ref{tasks::Split::Train, 3};

    // Alpha family.
    for (double a : {0.3, 0.8, 1.6}) {
      auto spec = DivergenceSpec::alpha(a);
      const auto step = task_step(prob, cfg, spec, phi0, ref, 2);
      const double h = 1e-5;
      auto up = spec, dn = spec;
      up.alpha_raw += h;
      dn.alpha_raw -= h;
      const double fd =
          (task_step(prob, cfg, up, phi0, ref, 2).meta_loss - task_step(prob, cfg, dn, phi0, ref, 2).meta_loss) /
          (2 * h);
      CAPTURE(a);
      CHECK(std::abs(step.grad_eta[0] - fd) <= 1e-3 * std::abs(fd) + 1e-9);
    }

    // f family, five probed weights, including the output layer.
    const auto spec = DivergenceSpec::fnet(FMode::GExp, HInput::LogT, 4);
    const auto step = task_step(prob, cfg, spec, phi0, ref, 2);
    for (std::size_t idx : {std::size_t{3}, std::size_t{150}, std::size_t{5000}, std::size_t{10310},
                            std::size_t{10400}}) {
      const double h = 1e-5;
      auto up = spec, dn = spec;
      up.h_weights[idx] += h;
      dn.h_weights[idx] -= h;
      const double fd =
          (task_step(prob, cfg, up, phi0, ref, 2).meta_loss - task_step(prob, cfg, dn, phi0, ref, 2).meta_loss) /
          (2 * h);
      CAPTURE(idx);
      CHECK(std::abs(step.grad_eta[idx] - fd) <= 1e-3 * std::abs(fd) + 1e-9);
    }

    // Gradient in the initialization, used by meta-D&phi.
    const auto sa = DivergenceSpec::alpha(0.7);
    const auto st = task_step(prob, cfg, sa, phi0, ref, 2);
    for (std::size_t i = 0; i < 2; ++i) {
      std::vector<double> pu(phi0), pd(phi0);
      pu[i] += 1e-5;
      pd[i] -= 1e-5;
      const double fd =
          (task_step(prob, cfg, sa, pu, ref, 2).meta_loss - task_step(prob, cfg, sa, pd, ref, 2).meta_loss) / 2e-5;
      CHECK(std::abs(st.grad_phi0[i] - fd) <= 1e-3 * std::abs(fd) + 1e-9);
    }
  }
}

TEST_CASE("truncation: no meta-gradient without an inner step size") {
  MoGProblem prob(small_suite());
  const auto ep = prob.episode({tasks::Split::Train, 0}, 0);
  for (const auto& spec : {DivergenceSpec::alpha(0.5), DivergenceSpec::fnet(FMode::GExp, HInput::LogT, 2)}) {
    Graph g;
    Var phi = g.column(std::vector<double>{0.2, 0.1});
    Var eta = spec.kind == divergences::Kind::Alpha ? g.scalar(spec.alpha_raw) : g.column(spec.h_weights);
    Var out = inner_adapt(g, phi, eta, g.scalar(0.0), spec, *ep, 2, 1.0);
    Var J = ep->meta_loss(g, out).value;
    for (double v : g.grad(J, std::span<const Var>(&eta, 1))[0].to_vector()) CHECK(v == 0.0);
  }
}

TEST_CASE("frozen outer loop") {
  MoGProblem prob(small_suite());
  auto cfg = small_cfg();
  cfg.gamma = 0.0;
  const auto spec = DivergenceSpec::alpha(0.7);
  auto out = meta_train_D(prob, cfg, initial_state(prob, cfg, spec));
  CHECK(out.eta.alpha_raw == spec.alpha_raw);
  CHECK(out.iteration == cfg.meta_iters);
  CHECK(!out.phi_registry.empty());
  // Each stored phi follows plain descent with the fixed divergence.
  for (const auto& [id, phi] : out.phi_registry) {
    std::size_t visits = 0;
    std::vector<double> ref = prob.initial_phi();
    for (std::uint64_t it = 0; it < cfg.meta_iters; ++it) {
      for (auto idx : prob.train_sampler().select(it, cfg.M)) {
        if (TaskRef{tasks::Split::Train, idx}.id() != id) continue;
        ++visits;
        Graph g;
        Var phi_v = g.column(ref);
        const auto ep = prob.episode({tasks::Split::Train, idx}, it);
        ref = inner_adapt(g, phi_v, g.scalar(spec.alpha_raw), g.scalar(cfg.beta), spec, *ep, cfg.B, 1.0)
                  .to_vector();
      }
    }
    CHECK(visits > 0);
    CHECK(phi == ref);
  }

  cfg.algorithm = Algorithm::MetaDPhi;
  cfg.tau = 0.0;
  auto fixed = meta_train_D_phi(prob, cfg, initial_state(prob, cfg, spec));
  CHECK(fixed.eta.alpha_raw == spec.alpha_raw);
  CHECK(fixed.phi_shared == prob.initial_phi());
  CHECK(fixed.phi_registry.empty());
}

TEST_CASE("meta-D&phi with alpha = 1 matches a hand-written MAML on the elbo") {
  MoGProblem prob(small_suite());
  auto cfg = small_cfg();
  cfg.algorithm = Algorithm::MetaDPhi;
  cfg.gamma = 0.0;
  cfg.tau = 0.05;
  cfg.M = 2;
  cfg.meta_iters = 5;
  const auto spec = DivergenceSpec::alpha(1.0);
  std::vector<TraceRow> rows;
  meta_train_D_phi(prob, cfg, initial_state(prob, cfg, spec), [&](const TraceRow& r) { rows.push_back(r); });
  REQUIRE(rows.size() == cfg.meta_iters * cfg.M);

  // Reference: phi_i = phi + beta grad ELBO, J = -2 log mean sqrt(p / q) at
  // phi_i, d J / d phi = (I + beta H)^T d J / d phi_i, Adam on phi.
  std::vector<double> phi = prob.initial_phi();
  std::vector<double> m(2, 0.0), v(2, 0.0);
  std::size_t row = 0;
  for (std::uint64_t it = 0; it < cfg.meta_iters; ++it) {
    const auto meps = draw_noise({.master_seed = 5, .meta_iteration = it, .stream = Stream::MetaLossNoise}, 1, 60);
    double gsum[2] = {0.0, 0.0};
    for (auto idx : prob.train_sampler().select(it, cfg.M)) {
      const TaskRef ref{tasks::Split::Train, idx};
      const auto p = prob.task(ref).target();
      const auto eps = draw_noise({.master_seed = 5, .task_id = ref.id(), .meta_iteration = it}, 1, 50);
      const double mu = phi[0], ls = phi[1], s = std::exp(ls);
      double e_mu = 0.0, e_ls = 1.0, h_mm = 0.0, h_ml = 0.0, h_ll = 0.0;
      for (double e : eps.epsilon) {
        double d1, d2;
        mog_derivs(p, mu + s * e, d1, d2);
        e_mu += d1 / 50;
        e_ls += d1 * s * e / 50;
        h_mm += d2 / 50;
        h_ml += d2 * s * e / 50;
        h_ll += (d2 * s * s * e * e + d1 * s * e) / 50;
      }
      const double mu1 = mu + cfg.beta * e_mu, ls1 = ls + cfg.beta * e_ls, s1 = std::exp(ls1);
      std::vector<double> lr(60);
      double mx = -1e300;
      for (std::size_t k = 0; k < 60; ++k) {
        const double e = meps.epsilon[k];
        const double th = mu1 + s1 * e;
        lr[k] = mog_logpdf(p, th) - (-0.5 * e * e - ls1 - 0.5 * distributions::kLogTwoPi);
        mx = std::max(mx, 0.5 * lr[k]);
      }
      double tot = 0.0;
      for (double x : lr) tot += std::exp(0.5 * x - mx);
      const double J = -2.0 * (mx + std::log(tot / 60));
      double dj_mu = 0.0, dj_ls = 0.0;
      for (std::size_t k = 0; k < 60; ++k) {
        const double w = std::exp(0.5 * lr[k] - mx) / tot;
        const double e = meps.epsilon[k];
        double d1, d2;
        mog_derivs(p, mu1 + s1 * e, d1, d2);
        dj_mu -= w * d1;
        dj_ls -= w * (d1 * s1 * e + 1.0);
      }
      gsum[0] += (1 + cfg.beta * h_mm) * dj_mu + cfg.beta * h_ml * dj_ls;
      gsum[1] += cfg.beta * h_ml * dj_mu + (1 + cfg.beta * h_ll) * dj_ls;
      CHECK(rows[row].iter == it);
      CHECK(rows[row].task_id == ref.id());
      CHECK(std::abs(rows[row].meta_loss - J) < 1e-10);
      ++row;
    }
    const double t = static_cast<double>(it + 1);
    for (int i = 0; i < 2; ++i) {
      const double gr = gsum[i] / cfg.M;
      m[i] = 0.9 * m[i] + 0.1 * gr;
      v[i] = 0.999 * v[i] + 0.001 * gr * gr;
      phi[i] -= cfg.tau * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
    }
  }
}

TEST_CASE("training is deterministic across runs and worker counts") {
  for (auto algo : {Algorithm::MetaD, Algorithm::MetaDPhi}) {
    MoGProblem prob(small_suite(metaloss::LossKind::TV));
    auto cfg = small_cfg();
    cfg.algorithm = algo;
    cfg.gamma = 1e-3;
    // Start at the KL so a few outer steps stay in the finite regime.
    auto spec = DivergenceSpec::fnet(FMode::GExp, HInput::LogT, 2);
    spec.h_weights = divergences::linear_h_weights(0.0, 0.0);
    const auto run = [&](std::size_t workers) {
      cfg.workers = workers;
      std::vector<TraceRow> rows;
      auto st = meta_train(prob, cfg, initial_state(prob, cfg, spec), [&](const TraceRow& r) { rows.push_back(r); });
      return std::make_pair(checkpoint_json(st, cfg, prob).at("state").dump(), rows);
    };
    const auto a = run(1), b = run(1), c = run(3);
    CHECK(a.first == b.first);
    CHECK(a.first == c.first);
    REQUIRE(a.second.size() == c.second.size());
    for (std::size_t i = 0; i < a.second.size(); ++i) {
      CHECK(a.second[i].meta_loss == c.second[i].meta_loss);
      CHECK(a.second[i].task_id == c.second[i].task_id);
      CHECK(a.second[i].alpha_or_hnorm == c.second[i].alpha_or_hnorm);
      CHECK(a.second[i].seconds == 0.0);
    }
  }
}

TEST_CASE("meta-test") {
  MoGProblem prob(small_suite());
  auto cfg = small_cfg();
  cfg.algorithm = Algorithm::MetaDPhi;
  auto st = initial_state(prob, cfg, DivergenceSpec::alpha(1.0));
  st.phi_shared = {1.0, -0.5};
  const TaskRef ref{tasks::Split::Test, 0};
  const auto at0 = meta_test(prob, st, ref, 0, 0.05);
  CHECK(at0.meta_loss == prob.evaluate(ref, st.phi_shared).meta_loss);
  CHECK(!at0.has_predictive);

  // Alpha = 1 follows the plain descent trajectory exactly.
  const auto phi = descend(prob, st.eta, st.phi_shared, ref, 15, 0.05);
  CHECK(meta_test(prob, st, ref, 15, 0.05).meta_loss == prob.evaluate(ref, phi).meta_loss);
  // Descent improves the fit.
  CHECK(meta_test(prob, st, ref, 200, 0.05).meta_loss < at0.meta_loss);

  // Meta-D starts from the fresh initialization.
  st.algorithm = Algorithm::MetaD;
  CHECK(meta_test(prob, st, ref, 0, 0.05).meta_loss == prob.evaluate(ref, prob.initial_phi()).meta_loss);
}

TEST_CASE("checkpoint round trip") {
  MoGProblem prob(small_suite());
  auto cfg = small_cfg();
  cfg.meta_iters = 3;
  auto st = meta_train_D(prob, cfg, initial_state(prob, cfg, DivergenceSpec::alpha(0.6)));
  const auto doc = nlohmann::json::parse(checkpoint_json(st, cfg, prob).dump());
  const auto back = state_from_checkpoint(doc);
  CHECK(back.eta.alpha_raw == st.eta.alpha_raw);
  CHECK(back.phi_registry == st.phi_registry);
  CHECK(back.iteration == 3);
  CHECK(back.eta_opt.m == st.eta_opt.m);
  CHECK(back.eta_opt.t == st.eta_opt.t);
  CHECK(checkpoint_json(back, cfg, prob) == checkpoint_json(st, cfg, prob));
  auto bad = doc;
  bad["version"] = 0;
  CHECK_THROWS_AS(state_from_checkpoint(bad), std::invalid_argument);
}

TEST_CASE("numerical failures surface after retries") {
  MoGProblem prob(small_suite());
  auto cfg = small_cfg();
  auto spec = DivergenceSpec::fnet(FMode::GExp, HInput::LogT, 1);
  spec.h_weights.assign(divergences::HLayout::kParamCount, 0.0);
  spec.h_weights.back() = 800.0;  // g = exp(800) on every retry
  CHECK_THROWS_AS(task_step(prob, cfg, spec, std::vector<double>{0.0, 0.0}, {tasks::Split::Train, 0}, 0),
                  NumericalError);
  try {
    task_step(prob, cfg, spec, std::vector<double>{0.0, 0.0}, {tasks::Split::Train, 0}, 0);
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("sinusoid problem wiring") {
  SinusoidSuite s;
  s.seed = 3;
  s.n_train_tasks = 4;
  s.sizes = {60, 20, 30};
  s.batch = 20;
  s.K = 8;
  s.S = 6;
  SinusoidProblem prob(s);
  CHECK(prob.phi_size() == bnn::kPhiSize);
  CHECK(prob.inner_scale() == doctest::Approx(1.0 / 60));
  const auto prep = prob.prepare({tasks::Split::Train, 1});
  double mean = 0.0;
  for (double y : prep.task.train.y) mean += y / 60;
  CHECK(std::abs(mean) < 1e-12);
  CHECK(prep.y_scale > 0.0);

  auto cfg = small_cfg();
  cfg.beta = 0.01;
  cfg.M = 2;
  cfg.meta_iters = 2;
  const auto spec = DivergenceSpec::alpha(0.5);
  const auto step = task_step(prob, cfg, spec, prob.initial_phi(), {tasks::Split::Train, 1}, 0);
  CHECK(std::isfinite(step.meta_loss));
  CHECK(step.grad_phi0.size() == bnn::kPhiSize);
  const double h = 1e-5;
  auto up = spec, dn = spec;
  up.alpha_raw += h;
  dn.alpha_raw -= h;
  const double fd = (task_step(prob, cfg, up, prob.initial_phi(), {tasks::Split::Train, 1}, 0).meta_loss -
                     task_step(prob, cfg, dn, prob.initial_phi(), {tasks::Split::Train, 1}, 0).meta_loss) /
                    (2 * h);
  CHECK(std::abs(step.grad_eta[0] - fd) <= 1e-3 * std::abs(fd) + 1e-9);

  const auto fspec = DivergenceSpec::fnet(FMode::FppExp, HInput::LogT, 3);
  const auto fstep = task_step(prob, cfg, fspec, prob.initial_phi(), {tasks::Split::Train, 1}, 0);
  for (std::size_t idx : {std::size_t{10}, std::size_t{10400}}) {
    auto fu = fspec, fd2 = fspec;
    fu.h_weights[idx] += h;
    fd2.h_weights[idx] -= h;
    const double fdv = (task_step(prob, cfg, fu, prob.initial_phi(), {tasks::Split::Train, 1}, 0).meta_loss -
                        task_step(prob, cfg, fd2, prob.initial_phi(), {tasks::Split::Train, 1}, 0).meta_loss) /
                       (2 * h);
    CHECK(std::abs(fstep.grad_eta[idx] - fdv) <= 1e-3 * std::abs(fdv) + 1e-9);
  }

  const auto m = meta_test(prob, initial_state(prob, cfg, spec), {tasks::Split::Test, 0}, 3, 0.01);
  CHECK(m.has_predictive);
  CHECK(std::isfinite(m.test_ll));
  CHECK(m.rmse > 0.0);
}
