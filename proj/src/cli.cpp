#include "metadiv/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <tuple>
#include <algorithm>

#include "CLI11.hpp"
#include "metadiv/baseline.hpp"
#include "metadiv/errors.hpp"
#include "metadiv/problems.hpp"

namespace metadiv::cli {

namespace fs = std::filesystem;
using divergences::DivergenceSpec;

namespace {

enum class Kind { Text, Real, Count, Flag, List };

struct Key {
  const char* name;
  Kind kind;
  std::function<std::string(const RunConfig&)> fallback;
};

std::function<std::string(const RunConfig&)> fixed(std::string v) {
  return [v](const RunConfig&) { return v; };
}

bool experiment_is_mog(const RunConfig& c) { return c.get("experiment").rfind("mog-", 0) == 0; }
bool experiment_is_dphi(const RunConfig& c) {
  const auto e = c.get("experiment");
  return e.size() > 5 && e.compare(e.size() - 5, 5, "-dphi") == 0;
}

// Schema order is also the output order of format().
const std::vector<Key>& schema() {
  static const std::vector<Key> keys = {
      {"experiment", Kind::Text, fixed("mog-meta-d")},
      {"family", Kind::Text, fixed("alpha")},
      {"meta_loss", Kind::Text, [](const RunConfig& c) { return experiment_is_mog(c) ? "d05" : "nll"; }},
      {"seed", Kind::Count, fixed("0")},
      {"workers", Kind::Count, fixed("1")},
      {"out", Kind::Text, fixed("runs")},
      {"alpha0", Kind::Real, fixed("1")},
      {"f_mode", Kind::Text, [](const RunConfig& c) { return experiment_is_mog(c) ? "gexp" : "fppexp"; }},
      {"h_input", Kind::Text, fixed("log_t")},
      {"pretrain_steps", Kind::Count, fixed("4000")},
      {"pretrain_lr", Kind::Real, fixed("0.003")},
      {"B", Kind::Count, fixed("1")},
      {"M", Kind::Count, fixed("5")},
      {"beta", Kind::Real, [](const RunConfig& c) { return experiment_is_mog(c) ? "0.02" : "0.01"; }},
      {"gamma", Kind::Real, [](const RunConfig& c) { return c.get("family") == "alpha" ? "0.01" : "0.0001"; }},
      {"tau", Kind::Real, fixed("0.001")},
      {"meta_iters", Kind::Count, fixed("1000")},
      {"retries", Kind::Count, fixed("3")},
      {"record_time", Kind::Flag, fixed("false")},
      {"n_train_tasks", Kind::Count, [](const RunConfig& c) { return experiment_is_mog(c) ? "10" : "20"; }},
      {"K", Kind::Count, [](const RunConfig& c) { return experiment_is_mog(c) ? "1000" : "100"; }},
      {"meta_K", Kind::Count, fixed("1000")},
      {"eval_K", Kind::Count, fixed("10000")},
      {"n_train", Kind::Count, fixed("1000")},
      {"n_meta", Kind::Count, fixed("20")},
      {"n_test", Kind::Count, fixed("200")},
      {"batch", Kind::Count, [](const RunConfig& c) { return experiment_is_dphi(c) ? "0" : "40"; }},
      {"test_batch", Kind::Count, fixed("0")},
      {"S", Kind::Count, fixed("100")},
      {"noise_multiplier", Kind::Real, fixed("1")},
      {"checkpoint", Kind::Text, fixed("")},
      {"n_test_tasks", Kind::Count, fixed("10")},
      {"test_iters", Kind::Count, fixed("20")},
      {"label", Kind::Text, fixed("")},
      {"test_beta", Kind::Real, [](const RunConfig& c) { return c.get("beta"); }},
      {"search", Kind::Text, fixed("bo")},
      {"budget", Kind::Count, fixed("16")},
      {"grid", Kind::List, fixed("0.1,0.2,0.3,0.4,0.5,0.6,0.8,1,1.5,2,2.5,3")},
      {"eval_iters", Kind::Count, fixed("2000")},
      {"t_min", Kind::Real, fixed("0.05")},
      {"t_max", Kind::Real, fixed("20")},
      {"points", Kind::Count, fixed("200")},
  };
  return keys;
}

const Key* find_key(const std::string& name) {
  for (const auto& k : schema()) {
    if (name == k.name) return &k;
  }
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || !std::isfinite(x)) {
    throw std::invalid_argument("config key '" + key + "': expected a real number, got '" + v + "'");
  }
  return x;
}

std::size_t parse_count(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  try {
    return static_cast<std::size_t>(std::stoull(v));
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': integer out of range");
  }
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_real(key, trim(item)));
  if (out.empty()) throw std::invalid_argument("config key '" + key + "': empty list");
  return out;
}

void check_choice(const std::string& key, const std::string& v, std::initializer_list<const char*> choices) {
  for (const char* c : choices) {
    if (v == c) return;
  }
  std::string all;
  for (const char* c : choices) all += std::string(all.empty() ? "" : "|") + c;
  throw std::invalid_argument("config key '" + key + "': expected one of " + all + ", got '" + v + "'");
}

void validate_value(const Key& k, const std::string& v) {
  switch (k.kind) {
    case Kind::Real:
      parse_real(k.name, v);
      break;
    case Kind::Count:
      parse_count(k.name, v);
      break;
    case Kind::Flag:
      check_choice(k.name, v, {"true", "false"});
      break;
    case Kind::List:
      parse_list(k.name, v);
      break;
    case Kind::Text:
      break;
  }
  const std::string name = k.name;
  if (name == "experiment") check_choice(name, v, {"mog-meta-d", "mog-meta-dphi", "sin-meta-d", "sin-meta-dphi"});
  if (name == "family") check_choice(name, v, {"alpha", "f"});
  if (name == "meta_loss") check_choice(name, v, {"d05", "tv", "nll"});
  if (name == "f_mode") check_choice(name, v, {"gexp", "fppexp"});
  if (name == "h_input") check_choice(name, v, {"log_t", "raw"});
  if (name == "search") check_choice(name, v, {"bo", "grid"});
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot read " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

struct Stats {
  double mean = 0.0;
  double std = 0.0;
};

Stats stats(const std::vector<double>& v) {
  Stats s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  return s;
}

// Central differences of a scalar function of one coordinate.
double central(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

double rel_error(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-12); }

struct CheckLine {
  std::string name;
  double value;
  double tolerance;
};

std::vector<CheckLine> check_grad() {
  std::vector<CheckLine> out;
  {
    const auto fn = [](ad::Graph& g, ad::Var v) {
      const ad::Var x = g.slice(v, 0, {1, 1});
      const ad::Var y = g.slice(v, 1, {1, 1});
      return x * ad::exp(y) + ad::log(x);
    };
    const std::vector<double> p{1.5, 0.2};
    out.push_back({"autodiff x*exp(y)+log(x)", ad::finite_difference_check(fn, p, 1e-5), 1e-6});
  }
  problems::MoGProblem prob({.seed = 11, .K = 200});
  for (double a : {0.3, 0.5, 1.0, 2.0}) {
    double worst = 0.0;
    for (std::uint64_t i = 0; i < 5; ++i) {
      const auto p = prob.task({tasks::Split::Train, i}).target();
      const auto eps = draw_noise({.master_seed = 11, .task_id = i, .stream = Stream::Check}, 1, 200);
      const std::vector<double> phi{0.5 + 0.3 * static_cast<double>(i), -0.2 + 0.1 * static_cast<double>(i)};
      const auto bound = [&](std::span<const double> point) {
        ad::Graph g;
        const auto q = distributions::gaussian_view(g.column(point), 1);
        const ad::Var th = distributions::reparam_sample(q, eps);
        const auto r = divergences::exact_ratios(distributions::mog_log_density(th, p),
                                                 distributions::gaussian_log_density(q, th));
        // The alpha = 1 bound is the ELBO, the plain mean of the log ratios.
        return a == 1.0 ? g.sum(r.raw).item() / static_cast<double>(r.K) : divergences::vr_bound(r, a).item();
      };
      ad::Graph g;
      const ad::Var v = g.column(phi);
      const auto q = distributions::gaussian_view(v, 1);
      const ad::Var th = distributions::reparam_sample(q, eps);
      const auto ratios = divergences::exact_ratios(distributions::mog_log_density(th, p),
                                                    distributions::gaussian_log_density(q, th));
      const auto est = divergences::alpha_gradient(v, ratios, g.scalar(a)).grad_phi.to_vector();
      for (std::size_t d = 0; d < 2; ++d) {
        const double fd = central(
            [&](double x) {
              auto pt = phi;
              pt[d] = x;
              return bound(pt);
            },
            phi[d], 1e-5);
        worst = std::max(worst, rel_error(est[d], fd));
      }
    }
    out.push_back({"alpha_gradient vs FD of VR bound, alpha=" + number(a), worst, 1e-5});
  }
  {
    const std::vector<double> xs{-1.5, 0.0, 0.7, 3.1};
    const auto fn = [&](ad::Graph& g, ad::Var th) { return g.sum(bnn::bnn_forward(th, g.row(xs))); };
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    std::vector<double> th(bnn::kWeights);
    for (auto& w : th) w = 0.5 * n01(rng);
    out.push_back({"bnn forward pass vs FD", ad::finite_difference_check(fn, th, 1e-6), 1e-5});
  }
  return out;
}

std::vector<CheckLine> check_metagrad() {
  std::vector<CheckLine> out;
  problems::MoGProblem prob({.seed = 12, .K = 100, .meta_K = 100});
  metalearn::MetaConfig cfg;
  const metalearn::TaskRef ref{tasks::Split::Train, 1};
  const std::vector<double> phi0{0.3, -0.1};
  const auto loss_at = [&](const DivergenceSpec& spec) {
    return metalearn::task_step(prob, cfg, spec, phi0, ref, 0).meta_loss;
  };
  {
    const auto spec = DivergenceSpec::alpha(0.7);
    const double est = metalearn::task_step(prob, cfg, spec, phi0, ref, 0).grad_eta[0];
    const double fd = central(
        [&](double r) {
          auto s = spec;
          s.alpha_raw = r;
          return loss_at(s);
        },
        spec.alpha_raw, 1e-5);
    out.push_back({"meta-gradient in alpha", rel_error(est, fd), 1e-3});
  }
  {
    auto spec = DivergenceSpec::fnet(divergences::FMode::GExp, divergences::HInput::LogT, 12);
    spec.h_weights = divergences::linear_h_weights(0.3, 0.0);
    const auto est = metalearn::task_step(prob, cfg, spec, phi0, ref, 0).grad_eta;
    double worst = 0.0;
    for (std::size_t idx : {std::size_t{5}, std::size_t{150}, std::size_t{10310}, std::size_t{10400}}) {
      const double fd = central(
          [&](double w) {
            auto s = spec;
            s.h_weights[idx] = w;
            return loss_at(s);
          },
          spec.h_weights[idx], 1e-5);
      worst = std::max(worst, std::abs(est[idx] - fd) / std::max(std::abs(fd), 1e-6));
    }
    out.push_back({"meta-gradient in h weights", worst, 1e-3});
  }
  return out;
}

std::vector<CheckLine> check_estimators() {
  std::vector<CheckLine> out;
  // Gaussian q against a Gaussian target, where the KL gradient is analytic.
  const double mq = 0.4, lq = -0.2, mp = 1.0, sp = 1.5;
  const double sq = std::exp(lq);
  const double kl_mu = (mq - mp) / (sp * sp);
  const double kl_ls = sq * sq / (sp * sp) - 1.0;
  const auto target = distributions::make_mog({1.0}, {mp}, {sp});
  const std::size_t batches = 100, K = 1000;
  std::vector<double> a_mu, a_ls, f_mu, f_ls;
  double worst_sum = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    ad::Graph g;
    const ad::Var phi = g.column(std::vector<double>{mq, lq});
    const auto q = distributions::gaussian_view(phi, 1);
    const ad::Var th = distributions::reparam_sample(q, draw_noise({.master_seed = 13, .task_id = b, .stream = Stream::Check}, 1, K));
    const auto ratios = divergences::exact_ratios(distributions::mog_log_density(th, target),
                                                  distributions::gaussian_log_density(q, th));
    const auto ag = divergences::alpha_gradient(phi, ratios, g.scalar(1.0));
    double wsum = 0.0;
    for (double w : ag.weights.value()) wsum += w;
    worst_sum = std::max(worst_sum, std::abs(wsum - 1.0));
    const auto av = ag.grad_phi.to_vector();
    a_mu.push_back(-av[0]);
    a_ls.push_back(-av[1]);
    const auto fg = divergences::f_gradient(phi, th, ratios, divergences::FMode::GExp, divergences::HInput::LogT,
                                            g.column(divergences::linear_h_weights(0.0, 0.0)));
    const auto fv = fg.grad_phi.to_vector();
    f_mu.push_back(fv[0]);
    f_ls.push_back(fv[1]);
  }
  const auto z = [&](const std::vector<double>& v, double truth) {
    const auto s = stats(v);
    return std::abs(s.mean - truth) / (s.std / std::sqrt(static_cast<double>(v.size())) + 1e-300);
  };
  out.push_back({"alpha=1 estimator vs analytic KL gradient (z, mu)", z(a_mu, kl_mu), 3.0});
  out.push_back({"alpha=1 estimator vs analytic KL gradient (z, log sigma)", z(a_ls, kl_ls), 3.0});
  out.push_back({"h=0 f-estimator vs analytic KL gradient (z, mu)", z(f_mu, kl_mu), 3.0});
  out.push_back({"h=0 f-estimator vs analytic KL gradient (z, log sigma)", z(f_ls, kl_ls), 3.0});
  out.push_back({"importance weights sum to one", worst_sum, 1e-10});
  {
    ad::Graph g;
    std::mt19937_64 rng(14);
    std::normal_distribution<double> n01;
    std::vector<double> lj(500), lq(500);
    for (std::size_t i = 0; i < lj.size(); ++i) {
      lj[i] = 30.0 * n01(rng) - 200.0;
      lq[i] = 5.0 * n01(rng);
    }
    const auto r = divergences::self_normalized_ratios(g.row(lj), g.row(lq));
    double mean = 0.0;
    for (double v : r.log_ratios.value()) mean += std::exp(v);
    mean /= static_cast<double>(lj.size());
    out.push_back({"self-normalized ratios average to one", std::abs(mean - 1.0), 1e-12});
  }
  return out;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
};

int cmd_meta_train(const RunConfig& cfg, Context& ctx) {
  const auto meta = meta_config(cfg);
  const auto problem = make_problem(cfg);
  const auto eta0 = initial_divergence(cfg);
  const fs::path dir = fresh_run_dir(cfg.get("out"), "meta-train");
  write_text(dir / "config.txt", cfg.format_resolved());

  std::ofstream trace(dir / "trace.csv", std::ios::binary);
  trace << "iter,task_id,meta_loss,alpha_or_hnorm,seconds\n";
  const auto sink = [&](const metalearn::TraceRow& r) {
    trace << r.iter << ',' << r.task_id << ',' << number(r.meta_loss) << ',' << number(r.alpha_or_hnorm) << ','
          << number(r.seconds) << '\n';
  };
  auto state = metalearn::initial_state(*problem, meta, eta0);
  int code = kExitOk;
  try {
    state = metalearn::meta_train(*problem, meta, std::move(state), sink);
  } catch (const NumericalError& e) {
    ctx.err << "meta-train: numerical abort: " << e.what() << '\n';
    code = kExitNumerical;
  }
  trace.flush();
  if (code != kExitOk) return code;
  auto ckpt = metalearn::checkpoint_json(state, meta, *problem);
  ckpt["run_config"] = cfg.format_resolved(false);
  write_text(dir / "checkpoint.json", ckpt.dump(2) + "\n");
  ctx.out << "meta-train: " << dir.string() << " eta_summary=" << number(metalearn::eta_summary(state.eta)) << '\n';
  return kExitOk;
}

struct Loaded {
  RunConfig train;
  metalearn::MetaState state;
};

Loaded load_checkpoint(const std::string& path) {
  if (path.empty()) throw std::invalid_argument("config key 'checkpoint': required for this command");
  const auto doc = read_json(path);
  if (!doc.contains("run_config")) throw std::invalid_argument(path + ": missing run_config");
  return {RunConfig::parse(doc.at("run_config").get<std::string>()), metalearn::state_from_checkpoint(doc)};
}

// Sibling meta-test runs are identified by label, not directory name, so the
// file does not depend on run timestamps.
void write_ranking(const fs::path& dir, const std::vector<std::pair<std::uint64_t, double>>& mine) {
  std::vector<nlohmann::json> comparisons;
  for (const auto& entry : fs::directory_iterator(dir.parent_path())) {
    const fs::path other = entry.path() / "metatest.csv";
    const fs::path other_summary = entry.path() / "summary.json";
    if (entry.path() == dir || !fs::exists(other) || !fs::exists(other_summary)) continue;
    std::string label;
    try {
      label = read_json(other_summary.string()).at("label").get<std::string>();
    } catch (const std::exception&) {
      continue;
    }
    std::ifstream f(other);
    std::string line;
    std::getline(f, line);
    std::map<std::uint64_t, double> theirs;
    while (std::getline(f, line)) {
      std::stringstream ss(line);
      std::string id, loss;
      std::getline(ss, id, ',');
      std::getline(ss, loss, ',');
      try {
        theirs[std::stoull(id)] = std::stod(loss);
      } catch (const std::exception&) {
      }
    }
    std::size_t wins = 0, matched = 0;
    for (const auto& [id, loss] : mine) {
      auto it = theirs.find(id);
      if (it == theirs.end()) continue;
      ++matched;
      if (loss < it->second) ++wins;
    }
    if (matched > 0) comparisons.push_back({{"label", label}, {"wins", wins}, {"tasks", matched}});
  }
  std::sort(comparisons.begin(), comparisons.end(), [](const nlohmann::json& a, const nlohmann::json& b) {
    return std::tie(a.at("label"), a.at("wins"), a.at("tasks")) < std::tie(b.at("label"), b.at("wins"), b.at("tasks"));
  });
  write_text(dir / "ranking.json", nlohmann::json{{"comparisons", comparisons}}.dump(2) + "\n");
}

int cmd_meta_test(const RunConfig& cfg, Context& ctx) {
  const auto loaded = load_checkpoint(cfg.get("checkpoint"));
  const auto problem = make_problem(loaded.train);
  const std::size_t n = cfg.count("n_test_tasks");
  const std::size_t iters = cfg.count("test_iters");
  const double beta = cfg.has("test_beta") ? cfg.real("test_beta") : loaded.train.real("beta");
  const fs::path dir = fresh_run_dir(cfg.get("out"), "meta-test");
  write_text(dir / "config.txt", cfg.format_resolved());

  std::vector<metalearn::TaskMetrics> metrics(n);
  try {
    metalearn::parallel_for(n, std::max<std::size_t>(1, cfg.count("workers")), [&](std::size_t i) {
      metrics[i] = metalearn::meta_test(*problem, loaded.state, {tasks::Split::Test, i}, iters, beta);
    });
  } catch (const NumericalError& e) {
    ctx.err << "meta-test: numerical abort: " << e.what() << '\n';
    return kExitNumerical;
  }
  std::ostringstream csv;
  csv << "task_id,meta_loss,test_ll,rmse\n";
  std::vector<double> losses, lls, rmses;
  std::vector<std::pair<std::uint64_t, double>> mine;
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = metalearn::TaskRef{tasks::Split::Test, i}.id();
    const auto& m = metrics[i];
    csv << id << ',' << number(m.meta_loss) << ',' << (m.has_predictive ? number(m.test_ll) : "") << ','
        << (m.has_predictive ? number(m.rmse) : "") << '\n';
    losses.push_back(m.meta_loss);
    mine.emplace_back(id, m.meta_loss);
    if (m.has_predictive) {
      lls.push_back(m.test_ll);
      rmses.push_back(m.rmse);
    }
  }
  write_text(dir / "metatest.csv", csv.str());
  const auto sl = stats(losses);
  const std::string label = cfg.get("label").empty()
                                ? loaded.train.get("experiment") + "-" + loaded.train.get("family")
                                : cfg.get("label");
  nlohmann::json summary = {{"label", label},
                            {"n_test_tasks", n},
                            {"test_iters", iters},
                            {"test_beta", beta},
                            {"meta_loss_mean", sl.mean},
                            {"meta_loss_std", sl.std}};
  if (!lls.empty()) {
    const auto sll = stats(lls), sr = stats(rmses);
    summary["test_ll_mean"] = sll.mean;
    summary["test_ll_std"] = sll.std;
    summary["rmse_mean"] = sr.mean;
    summary["rmse_std"] = sr.std;
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_ranking(dir, mine);
  ctx.out << "meta-test: " << dir.string() << " meta_loss_mean=" << number(sl.mean) << '\n';
  return kExitOk;
}

int cmd_baseline(const RunConfig& cfg, Context& ctx) {
  if (cfg.get("family") != "alpha") {
    ctx.err << "baseline: hyperparameter search over alpha is not applicable to the f-divergence family\n";
    return kExitUsage;
  }
  const auto problem = make_problem(cfg);
  const auto meta = meta_config(cfg);
  const std::size_t iters = cfg.count("eval_iters");
  const fs::path dir = fresh_run_dir(cfg.get("out"), "baseline");
  write_text(dir / "config.txt", cfg.format_resolved());
  const auto objective = [&](double a) {
    return baseline::evaluate_alpha(*problem, a, iters, meta.beta, meta.workers);
  };
  baseline::SearchResult r;
  try {
    r = cfg.get("search") == "bo" ? baseline::bo_minimize(objective, cfg.count("budget"))
                                  : baseline::grid_search(objective, cfg.reals("grid"));
  } catch (const NumericalError& e) {
    ctx.err << "baseline: numerical abort: " << e.what() << '\n';
    return kExitNumerical;
  }
  std::ostringstream csv;
  csv << "bo_iter,alpha,mean_meta_loss\n";
  for (std::size_t i = 0; i < r.evaluated.size(); ++i) {
    csv << i << ',' << number(r.evaluated[i].alpha) << ',' << number(r.evaluated[i].loss) << '\n';
  }
  write_text(dir / "baseline.csv", csv.str());
  write_text(dir / "summary.json", nlohmann::json{{"search", cfg.get("search")},
                                                  {"evaluations", r.evaluated.size()},
                                                  {"best_alpha", r.best_alpha},
                                                  {"best_loss", r.best_loss}}
                                           .dump(2) + "\n");
  ctx.out << "baseline: " << dir.string() << " best_alpha=" << number(r.best_alpha) << '\n';
  return kExitOk;
}

int cmd_dump_h(const RunConfig& cfg, Context& ctx) {
  const auto ckpt = cfg.get("checkpoint");
  const DivergenceSpec spec = ckpt.empty() ? initial_divergence(cfg) : load_checkpoint(ckpt).state.eta;
  const double lo = cfg.real("t_min"), hi = cfg.real("t_max");
  const std::size_t n = cfg.count("points");
  if (!(lo > 0.0) || !(hi > lo) || n < 2) throw std::invalid_argument("config keys 't_min', 't_max', 'points': bad grid");
  const fs::path dir = fresh_run_dir(cfg.get("out"), "dump-h");
  write_text(dir / "config.txt", cfg.format_resolved());
  std::ostringstream csv;
  csv << "t,h_of_t\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double t = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
    // An alpha divergence corresponds to g(t) = t^(1 - alpha).
    const double h = spec.kind == divergences::Kind::Alpha ? (1.0 - spec.effective_alpha()) * std::log(t)
                                                           : divergences::h_of_t(spec, t);
    csv << number(t) << ',' << number(h) << '\n';
  }
  write_text(dir / "h.csv", csv.str());
  ctx.out << "dump-h: " << dir.string() << '\n';
  return kExitOk;
}

int cmd_check(const std::string& suite, Context& ctx) {
  std::vector<CheckLine> lines;
  if (suite == "grad") lines = check_grad();
  else if (suite == "metagrad") lines = check_metagrad();
  else if (suite == "estimators") lines = check_estimators();
  else throw std::invalid_argument("check: unknown suite '" + suite + "' (grad|metagrad|estimators)");
  bool ok = true;
  for (const auto& l : lines) {
    const bool pass = l.value < l.tolerance;
    ok = ok && pass;
    ctx.out << (pass ? "PASS " : "FAIL ") << l.name << ": " << number(l.value) << " < " << number(l.tolerance)
            << '\n';
  }
  return ok ? kExitOk : kExitNumerical;
}

}  // namespace

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line = std::string(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(std::string_view(line).substr(0, eq));
    if (cfg.has(key)) throw std::invalid_argument("config key '" + key + "': set twice");
    cfg.set(key, trim(std::string_view(line).substr(eq + 1)));
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const Key* k = find_key(key);
  if (!k) throw std::invalid_argument("config key '" + key + "': unknown key");
  validate_value(*k, value);
  values_[key] = value;
}

std::string RunConfig::get(const std::string& key) const {
  const Key* k = find_key(key);
  if (!k) throw std::invalid_argument("config key '" + key + "': unknown key");
  auto it = values_.find(key);
  return it != values_.end() ? it->second : k->fallback(*this);
}

double RunConfig::real(const std::string& key) const { return parse_real(key, get(key)); }
std::size_t RunConfig::count(const std::string& key) const { return parse_count(key, get(key)); }
bool RunConfig::flag(const std::string& key) const { return get(key) == "true"; }
std::vector<double> RunConfig::reals(const std::string& key) const { return parse_list(key, get(key)); }

std::string RunConfig::format() const {
  std::string out;
  for (const auto& k : schema()) {
    auto it = values_.find(k.name);
    if (it != values_.end()) out += std::string(k.name) + " = " + it->second + "\n";
  }
  return out;
}

std::string RunConfig::format_resolved(bool runtime) const {
  std::string out;
  for (const auto& k : schema()) {
    const std::string name = k.name;
    if (!runtime && (name == "out" || name == "workers")) continue;
    out += name + " = " + get(name) + "\n";
  }
  return out;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : schema()) out.emplace_back(k.name);
  return out;
}

bool is_mog(const RunConfig& cfg) { return experiment_is_mog(cfg); }

metalearn::MetaConfig meta_config(const RunConfig& cfg) {
  metalearn::MetaConfig m;
  m.algorithm = experiment_is_dphi(cfg) ? metalearn::Algorithm::MetaDPhi : metalearn::Algorithm::MetaD;
  m.B = cfg.count("B");
  m.M = cfg.count("M");
  m.beta = cfg.real("beta");
  m.gamma = cfg.real("gamma");
  m.tau = cfg.real("tau");
  m.meta_iters = cfg.count("meta_iters");
  m.seed = cfg.count("seed");
  m.workers = cfg.count("workers");
  m.retries = cfg.count("retries");
  m.record_time = cfg.flag("record_time");
  m.validate();
  return m;
}

std::unique_ptr<metalearn::Problem> make_problem(const RunConfig& cfg) {
  const auto loss = cfg.get("meta_loss");
  if (is_mog(cfg)) {
    if (loss == "nll") throw std::invalid_argument("config key 'meta_loss': nll needs the sinusoid suite");
    problems::MoGSuite s;
    s.seed = cfg.count("seed");
    s.n_train_tasks = cfg.count("n_train_tasks");
    s.loss = loss == "tv" ? metaloss::LossKind::TV : metaloss::LossKind::RenyiHalf;
    s.K = cfg.count("K");
    s.meta_K = cfg.count("meta_K");
    s.eval_K = cfg.count("eval_K");
    return std::make_unique<problems::MoGProblem>(s);
  }
  if (loss != "nll") throw std::invalid_argument("config key 'meta_loss': the sinusoid suite uses nll");
  problems::SinusoidSuite s;
  s.seed = cfg.count("seed");
  s.n_train_tasks = cfg.count("n_train_tasks");
  s.sizes = {cfg.count("n_train"), cfg.count("n_meta"), cfg.count("n_test")};
  s.batch = cfg.count("batch");
  s.test_batch = cfg.count("test_batch");
  s.K = cfg.count("K");
  s.S = cfg.count("S");
  s.noise_multiplier = cfg.real("noise_multiplier");
  return std::make_unique<problems::SinusoidProblem>(s);
}

DivergenceSpec initial_divergence(const RunConfig& cfg) {
  if (cfg.get("family") == "alpha") return DivergenceSpec::alpha(cfg.real("alpha0"));
  const auto mode = cfg.get("f_mode") == "gexp" ? divergences::FMode::GExp : divergences::FMode::FppExp;
  const auto input = cfg.get("h_input") == "log_t" ? divergences::HInput::LogT : divergences::HInput::Raw;
  const auto spec = DivergenceSpec::fnet(mode, input, cfg.count("seed"));
  const auto steps = cfg.count("pretrain_steps");
  return steps == 0 ? spec : divergences::pretrain_h_to_kl(spec, static_cast<int>(steps), cfg.real("pretrain_lr"));
}

std::string fresh_run_dir(const std::string& out, const std::string& command) {
  fs::create_directories(out);
  const std::string base = command + "-" + timestamp();
  for (int i = 0;; ++i) {
    const fs::path dir = fs::path(out) / (i == 0 ? base : base + "-" + std::to_string(i));
    // create_directory reports false when the directory already exists.
    if (fs::create_directory(dir)) return dir.string();
  }
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta-learning of variational inference divergences"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  std::int64_t seed = -1;
  std::int64_t workers = -1;
  const auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "flat key=value config file");
    if (needs_config) opt->required();
    sub->add_option("--out", out_dir, "parent directory for the run directory");
    sub->add_option("--seed", seed, "master seed")->check(CLI::NonNegativeNumber);
    sub->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  };
  auto* train = app.add_subcommand("meta-train", "learn the divergence (and initialization)");
  add_common(train, true);
  auto* test = app.add_subcommand("meta-test", "evaluate a checkpoint on held-out tasks");
  add_common(test, true);
  auto* base = app.add_subcommand("baseline", "BO or grid search over alpha");
  add_common(base, true);
  auto* dump = app.add_subcommand("dump-h", "write h(t) samples");
  add_common(dump, false);
  auto* check = app.add_subcommand("check", "run gradient and estimator checks");
  std::string suite;
  check->add_option("suite", suite, "grad|metagrad|estimators")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  Context ctx{out, err};
  try {
    if (check->parsed()) return cmd_check(suite, ctx);
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (!out_dir.empty()) cfg.set("out", out_dir);
    if (seed >= 0) cfg.set("seed", std::to_string(seed));
    if (workers >= 0) cfg.set("workers", std::to_string(workers));
    if (train->parsed()) return cmd_meta_train(cfg, ctx);
    if (test->parsed()) return cmd_meta_test(cfg, ctx);
    if (base->parsed()) return cmd_baseline(cfg, ctx);
    return cmd_dump_h(cfg, ctx);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

int run(int argc, char** argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace metadiv::cli
