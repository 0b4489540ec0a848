#include "metadiv/divergences.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include "metadiv/errors.hpp"
#include "metadiv/optim.hpp"
#include "metadiv/rng.hpp"

namespace metadiv::divergences {

using ad::Graph;
using ad::Shape;
using ad::Var;

namespace {

constexpr double kAlphaFloor = 0.01;
// exp overflows just above 709.
constexpr double kExpLimit = 700.0;
constexpr int kSpecVersion = 1;
constexpr std::size_t kGridPoints = 64;

constexpr std::size_t kH = HLayout::kHidden;
constexpr std::size_t kOffW1 = 0;
constexpr std::size_t kOffB1 = kOffW1 + kH;
constexpr std::size_t kOffW2 = kOffB1 + kH;
constexpr std::size_t kOffB2 = kOffW2 + kH * kH;
constexpr std::size_t kOffW3 = kOffB2 + kH;
constexpr std::size_t kOffB3 = kOffW3 + kH;

void require_finite(Var v, const char* what) {
  for (double x : v.value()) {
    if (!std::isfinite(x)) throw NumericalError(std::string(what) + ": non-finite log ratio");
  }
}

double max_of(Var v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v.value()) m = std::max(m, x);
  return m;
}

void require_row(Var v, const char* what) {
  if (v.shape().rows != 1) throw std::invalid_argument(std::string(what) + ": expected a 1 x K row");
}

}  // namespace

std::vector<Shape> HLayout::shapes() {
  return {{kH, 1}, {kH, 1}, {kH, kH}, {kH, 1}, {1, kH}, {1, 1}};
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double alpha_from_raw(double raw) { return softplus(raw) + kAlphaFloor; }

double raw_from_alpha(double alpha) {
  const double s = alpha - kAlphaFloor;
  if (!(s > 0.0)) throw std::invalid_argument("raw_from_alpha: alpha must exceed 0.01");
  return s > 30.0 ? s + std::log(-std::expm1(-s)) : std::log(std::expm1(s));
}

Var alpha_from_raw(Var raw) { return ad::softplus(raw) + kAlphaFloor; }

DivergenceSpec DivergenceSpec::alpha(double effective_alpha) {
  DivergenceSpec s;
  s.kind = Kind::Alpha;
  s.alpha_raw = raw_from_alpha(effective_alpha);
  return s;
}

DivergenceSpec DivergenceSpec::fnet(FMode mode, HInput input, std::uint64_t seed) {
  DivergenceSpec s;
  s.kind = Kind::FNet;
  s.f_mode = mode;
  s.h_input = input;
  s.h_weights.assign(HLayout::kParamCount, 0.0);
  auto rng = make_rng({seed, static_cast<std::uint64_t>(Stream::Init), 0x68});
  std::normal_distribution<double> n01;
  // First-layer kinks spread uniformly over the expected input range.
  const double lo = input == HInput::LogT ? -5.0 : 0.0;
  const double hi = input == HInput::LogT ? 5.0 : 25.0;
  const double w_scale = std::sqrt(2.0) * 2.0 / (hi - lo);
  std::uniform_real_distribution<double> kink(lo, hi);
  for (std::size_t i = 0; i < kH; ++i) {
    s.h_weights[kOffW1 + i] = w_scale * n01(rng);
    s.h_weights[kOffB1 + i] = -s.h_weights[kOffW1 + i] * kink(rng);
  }
  for (std::size_t i = 0; i < kH * kH; ++i) s.h_weights[kOffW2 + i] = std::sqrt(2.0 / kH) * n01(rng);
  for (std::size_t i = 0; i < kH; ++i) s.h_weights[kOffW3 + i] = std::sqrt(1.0 / kH) * n01(rng);
  return s;
}

double DivergenceSpec::effective_alpha() const {
  if (kind != Kind::Alpha) throw std::logic_error("effective_alpha: not an alpha spec");
  return alpha_from_raw(alpha_raw);
}

std::vector<double> DivergenceSpec::parameters() const {
  return kind == Kind::Alpha ? std::vector<double>{alpha_raw} : h_weights;
}

void DivergenceSpec::set_parameters(std::span<const double> eta) {
  if (kind == Kind::Alpha) {
    if (eta.size() != 1) throw std::invalid_argument("set_parameters: alpha spec takes one value");
    alpha_raw = eta[0];
    return;
  }
  if (eta.size() != HLayout::kParamCount) {
    throw std::invalid_argument("set_parameters: expected " + std::to_string(HLayout::kParamCount) + " weights");
  }
  h_weights.assign(eta.begin(), eta.end());
}

std::vector<double> linear_h_weights(double slope, double intercept) {
  std::vector<double> w(HLayout::kParamCount, 0.0);
  w[kOffW1 + 0] = 1.0;
  w[kOffW1 + 1] = -1.0;
  w[kOffW2 + 0 + 0 * kH] = 1.0;
  w[kOffW2 + 1 + 1 * kH] = 1.0;
  w[kOffW3 + 0] = slope;
  w[kOffW3 + 1] = -slope;
  w[kOffB3] = intercept;
  return w;
}

Var h_apply(Var weights, Var u) {
  Graph& g = *weights.graph();
  if (weights.shape() != Shape::column(HLayout::kParamCount)) {
    throw std::invalid_argument("h_apply: weights must be a " + std::to_string(HLayout::kParamCount) + " column");
  }
  require_row(u, "h_apply");
  const std::size_t k = u.shape().cols;
  const Var ones = g.ones(Shape::row(k));
  const Var w1 = g.slice(weights, kOffW1, {kH, 1});
  const Var b1 = g.slice(weights, kOffB1, {kH, 1});
  const Var w2 = g.slice(weights, kOffW2, {kH, kH});
  const Var b2 = g.slice(weights, kOffB2, {kH, 1});
  const Var w3 = g.slice(weights, kOffW3, {1, kH});
  const Var b3 = g.slice(weights, kOffB3, {1, 1});
  const Var h1 = g.relu(g.matmul(w1, u) + g.matmul(b1, ones));
  const Var h2 = g.relu(g.matmul(w2, h1) + g.matmul(b2, ones));
  return g.matmul(w3, h2) + b3;
}

double h_value(std::span<const double> w, double u) {
  if (w.size() != HLayout::kParamCount) throw std::invalid_argument("h_value: wrong weight count");
  double h1[kH];
  for (std::size_t i = 0; i < kH; ++i) h1[i] = std::max(0.0, w[kOffW1 + i] * u + w[kOffB1 + i]);
  double out = w[kOffB3];
  for (std::size_t i = 0; i < kH; ++i) {
    double acc = w[kOffB2 + i];
    for (std::size_t j = 0; j < kH; ++j) acc += w[kOffW2 + i + j * kH] * h1[j];
    out += w[kOffW3 + i] * std::max(0.0, acc);
  }
  return out;
}

double h_of_t(const DivergenceSpec& spec, double t) {
  return h_value(spec.h_weights, spec.h_input == HInput::LogT ? std::log(t) : t);
}

RatioBatch exact_ratios(Var log_p, Var log_q) {
  require_row(log_p, "exact_ratios");
  if (log_p.shape() != log_q.shape()) throw std::invalid_argument("exact_ratios: shape mismatch");
  const Var raw = log_p - log_q;
  return {raw, raw, false, raw.shape().cols};
}

RatioBatch self_normalized_ratios(Var log_joint, Var log_q) {
  require_row(log_joint, "self_normalized_ratios");
  if (log_joint.shape() != log_q.shape()) throw std::invalid_argument("self_normalized_ratios: shape mismatch");
  const std::size_t k = log_joint.shape().cols;
  if (k < 2) throw std::invalid_argument("self_normalized_ratios: need K >= 2");
  bool any_finite = false;
  for (double x : log_joint.value()) any_finite = any_finite || x > -std::numeric_limits<double>::infinity();
  if (!any_finite) throw NumericalError("self_normalized_ratios: every log joint is -inf");
  Graph& g = *log_joint.graph();
  const Var raw = log_joint - log_q;
  const Var lr = (raw - g.logsumexp(raw)) + std::log(static_cast<double>(k));
  return {raw, lr, true, k};
}

Var vr_bound(const RatioBatch& ratios, double alpha) {
  if (alpha == 1.0) throw std::invalid_argument("vr_bound: alpha = 1 is the elbo");
  if (ratios.K < 1) throw std::invalid_argument("vr_bound: empty batch");
  Graph& g = *ratios.raw.graph();
  const double c = 1.0 - alpha;
  return (g.logsumexp(c * ratios.raw) - std::log(static_cast<double>(ratios.K))) * (1.0 / c);
}

GradientEstimate alpha_gradient(Var phi, const RatioBatch& ratios, Var alpha) {
  require_finite(ratios.raw, "alpha_gradient");
  if (!alpha.shape().is_scalar() || !(alpha.item() > 0.0)) {
    throw std::invalid_argument("alpha_gradient: alpha must be a positive scalar");
  }
  Graph& g = *phi.graph();
  const Var s = (1.0 - alpha) * ratios.raw;
  const Var w = g.exp(s - g.logsumexp(s));
  const Var out = ratios.raw;
  const auto grads = g.vjp(std::span<const Var>(&out, 1), std::span<const Var>(&w, 1), std::span<const Var>(&phi, 1));
  return {grads[0], w};
}

GradientEstimate f_gradient(Var phi, Var theta, const RatioBatch& ratios, FMode mode, HInput input, Var h_weights,
                            std::span<const Var> hyper) {
  require_finite(ratios.raw, "f_gradient");
  require_finite(ratios.log_ratios, "f_gradient");
  const std::size_t k = ratios.K;
  if (theta.shape().cols != k) throw std::invalid_argument("f_gradient: theta must have K columns");
  Graph& g = *phi.graph();
  const Var lt = ratios.log_ratios;
  if (input == HInput::Raw && max_of(lt) > kExpLimit) throw NumericalError("f_gradient: ratio overflow");
  const Var u = input == HInput::LogT ? lt : g.exp(lt);
  const Var h = h_apply(h_weights, u);
  const Var log_g = mode == FMode::GExp ? h : h + 2.0 * lt;
  for (double x : log_g.value()) {
    if (!std::isfinite(x) || x > kExpLimit) throw NumericalError("f_gradient: ratio overflow");
  }
  const Var gv = g.exp(log_g);

  // Partial gradient of log(p/q) in theta with phi held fixed.
  const Var total = g.sum(ratios.raw);
  const Var grad_theta = g.grad(total, std::span<const Var>(&theta, 1))[0];
  const std::size_t d = theta.shape().rows;
  const Var g_rows = d == 1 ? gv : g.matmul(g.ones(Shape::column(d)), gv);
  const double inv_k = -1.0 / static_cast<double>(k);
  std::vector<Var> outputs{theta};
  std::vector<Var> seeds{(g_rows * grad_theta) * inv_k};
  if (!hyper.empty()) {
    const Var out = ratios.raw;
    const Var w = gv * inv_k;
    const auto direct = g.vjp(std::span<const Var>(&out, 1), std::span<const Var>(&w, 1), hyper);
    for (std::size_t i = 0; i < hyper.size(); ++i) {
      outputs.push_back(hyper[i]);
      seeds.push_back(direct[i]);
    }
  }
  const auto grads = g.vjp(outputs, seeds, std::span<const Var>(&phi, 1));
  return {grads[0], gv};
}

Var divergence_gradient(const DivergenceSpec& spec, Var eta, Var phi, Var theta, const RatioBatch& ratios,
                        std::span<const Var> hyper) {
  if (spec.kind == Kind::Alpha) {
    return -alpha_gradient(phi, ratios, alpha_from_raw(eta)).grad_phi;
  }
  return f_gradient(phi, theta, ratios, spec.f_mode, spec.h_input, eta, hyper).grad_phi;
}

std::vector<double> pretrain_grid() {
  std::vector<double> t(kGridPoints);
  const double lo = std::log(0.05), hi = std::log(20.0);
  for (std::size_t i = 0; i < kGridPoints; ++i) {
    t[i] = std::exp(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kGridPoints - 1));
  }
  return t;
}

double kl_target(FMode mode, double t) { return mode == FMode::GExp ? 0.0 : -2.0 * std::log(t); }

PretrainReport pretrain_h_to_kl_report(const DivergenceSpec& spec, int steps, double lr) {
  if (spec.kind != Kind::FNet) throw std::invalid_argument("pretrain_h_to_kl: spec is not an f-network");
  if (steps < 1) throw std::invalid_argument("pretrain_h_to_kl: steps must be positive");
  const auto grid = pretrain_grid();
  std::vector<double> inputs(grid.size()), targets(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    inputs[i] = spec.h_input == HInput::LogT ? std::log(grid[i]) : grid[i];
    targets[i] = kl_target(spec.f_mode, grid[i]);
  }
  const auto max_error = [&](const std::vector<double>& w) {
    double e = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) e = std::max(e, std::abs(h_value(w, inputs[i]) - targets[i]));
    return e;
  };

  PretrainReport report{spec, max_error(spec.h_weights), 0};
  Adam adam;
  adam.lr = lr;
  std::vector<double> w = spec.h_weights;
  const double inv_n = 1.0 / static_cast<double>(grid.size());
  for (int step = 1; step <= steps; ++step) {
    Graph g;
    const Var wv = g.column(w);
    const Var diff = h_apply(wv, g.row(inputs)) - g.row(targets);
    const Var loss = g.sum(diff * diff) * inv_n;
    const auto grad = g.grad(loss, std::span<const Var>(&wv, 1))[0].to_vector();
    adam.step(w, grad);
    report.steps = step;
    if (step % 50 == 0 || step == steps) {
      report.max_abs_error = max_error(w);
      if (report.max_abs_error < 0.01) break;
    }
  }
  report.spec.h_weights = w;
  if (!(report.max_abs_error < 0.05)) {
    throw std::runtime_error("pretrain_h_to_kl: max error " + std::to_string(report.max_abs_error) + " after " +
                             std::to_string(report.steps) + " steps");
  }
  return report;
}

DivergenceSpec pretrain_h_to_kl(const DivergenceSpec& spec, int steps, double lr) {
  return pretrain_h_to_kl_report(spec, steps, lr).spec;
}

const char* to_string(Kind k) { return k == Kind::Alpha ? "alpha" : "fnet"; }
const char* to_string(FMode m) { return m == FMode::GExp ? "gexp" : "fppexp"; }
const char* to_string(HInput h) { return h == HInput::Raw ? "raw" : "log_t"; }

nlohmann::json to_json(const DivergenceSpec& spec) {
  nlohmann::json doc;
  doc["version"] = kSpecVersion;
  doc["kind"] = to_string(spec.kind);
  if (spec.kind == Kind::Alpha) {
    doc["alpha_raw"] = spec.alpha_raw;
    doc["alpha"] = spec.effective_alpha();
  } else {
    doc["h_weights"] = spec.h_weights;
    nlohmann::json shapes = nlohmann::json::array();
    for (auto s : HLayout::shapes()) shapes.push_back({s.rows, s.cols});
    doc["layer_shapes"] = shapes;
  }
  doc["f_mode"] = to_string(spec.f_mode);
  doc["h_input"] = to_string(spec.h_input);
  return doc;
}

DivergenceSpec spec_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("version").get<int>() != kSpecVersion) {
      throw std::invalid_argument("divergence spec: unsupported version " + doc.at("version").dump());
    }
    DivergenceSpec spec;
    const auto kind = doc.at("kind").get<std::string>();
    const auto mode = doc.at("f_mode").get<std::string>();
    const auto input = doc.at("h_input").get<std::string>();
    if (mode != "gexp" && mode != "fppexp") throw std::invalid_argument("divergence spec: bad f_mode " + mode);
    if (input != "raw" && input != "log_t") throw std::invalid_argument("divergence spec: bad h_input " + input);
    spec.f_mode = mode == "gexp" ? FMode::GExp : FMode::FppExp;
    spec.h_input = input == "raw" ? HInput::Raw : HInput::LogT;
    if (kind == "alpha") {
      spec.kind = Kind::Alpha;
      spec.alpha_raw = doc.at("alpha_raw").get<double>();
    } else if (kind == "fnet") {
      spec.kind = Kind::FNet;
      spec.h_weights = doc.at("h_weights").get<std::vector<double>>();
      const auto shapes = HLayout::shapes();
      const auto& listed = doc.at("layer_shapes");
      if (listed.size() != shapes.size()) throw std::invalid_argument("divergence spec: layer_shapes mismatch");
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (listed[i].at(0).get<std::size_t>() != shapes[i].rows ||
            listed[i].at(1).get<std::size_t>() != shapes[i].cols) {
          throw std::invalid_argument("divergence spec: layer_shapes mismatch");
        }
      }
      if (spec.h_weights.size() != HLayout::kParamCount) {
        throw std::invalid_argument("divergence spec: expected " + std::to_string(HLayout::kParamCount) +
                                    " weights, found " + std::to_string(spec.h_weights.size()));
      }
    } else {
      throw std::invalid_argument("divergence spec: unknown kind " + kind);
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("divergence spec: ") + e.what());
  }
}

}  // namespace metadiv::divergences
