#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "metadiv/autodiff.hpp"

namespace metadiv::divergences {

enum class Kind { Alpha, FNet };
/// GExp: g(t) = exp(h(u)). FppExp: f''(t) = exp(h(u)), so g(t) = t^2 exp(h(u)).
enum class FMode { GExp, FppExp };
/// Input transform u fed to h: the ratio itself or its logarithm.
enum class HInput { Raw, LogT };

/// Shapes of the h network 1 -> 100 -> 100 -> 1 in flat layout order:
/// W1, b1, W2, b2, W3, b3, each stored column-major.
struct HLayout {
  static constexpr std::size_t kHidden = 100;
  static constexpr std::size_t kParamCount = kHidden + kHidden + kHidden * kHidden + kHidden + kHidden + 1;
  static std::vector<ad::Shape> shapes();
};

double softplus(double x);
/// Effective alpha = softplus(raw) + 0.01.
double alpha_from_raw(double raw);
double raw_from_alpha(double alpha);
ad::Var alpha_from_raw(ad::Var raw);

struct DivergenceSpec {
  Kind kind = Kind::Alpha;
  double alpha_raw = 0.0;
  std::vector<double> h_weights;
  FMode f_mode = FMode::GExp;
  HInput h_input = HInput::LogT;

  static DivergenceSpec alpha(double effective_alpha);
  /// Randomly initialized h. First-layer kinks are spread over the typical
  /// input range of the chosen transform; other biases start at zero.
  static DivergenceSpec fnet(FMode mode, HInput input, std::uint64_t seed);

  double effective_alpha() const;
  /// Learnable parameters eta as one flat vector.
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> eta);
};

/// Flat weights realizing h(u) = slope * u + intercept exactly via
/// slope * (relu(u) - relu(-u)).
std::vector<double> linear_h_weights(double slope, double intercept);

/// Applies h elementwise to a 1 x K row of inputs. weights is a column of length kParamCount.
ad::Var h_apply(ad::Var weights, ad::Var u);
double h_value(std::span<const double> weights, double u);
/// h evaluated at ratio t after the spec's input transform.
double h_of_t(const DivergenceSpec& spec, double t);

/// Per-particle log ratios. raw is log p~ - log q; log_ratios equals raw for
/// exact ratios or the self-normalized version otherwise. Both are 1 x K.
struct RatioBatch {
  ad::Var raw;
  ad::Var log_ratios;
  bool normalized = false;
  std::size_t K = 0;
};

RatioBatch exact_ratios(ad::Var log_p, ad::Var log_q);
/// Requires K >= 2. Implied ratios average to one.
RatioBatch self_normalized_ratios(ad::Var log_joint, ad::Var log_q);

struct GradientEstimate {
  ad::Var grad_phi;
  ad::Var weights;
};

/// Monte Carlo variational Renyi bound. Throws at alpha = 1.
ad::Var vr_bound(const RatioBatch& ratios, double alpha);

/// Gradient of the bound in phi, as a node differentiable in phi and alpha.
/// Uses the unnormalized log ratios.
GradientEstimate alpha_gradient(ad::Var phi, const RatioBatch& ratios, ad::Var alpha);

/// f-divergence gradient through the reparameterized particles theta (D x K).
/// g is evaluated on ratios.log_ratios; the path term uses ratios.raw.
/// hyper lists nodes of phi that enter log p directly rather than through
/// theta (e.g. an observation-noise scale); each receives
/// -(1/K) sum_k g_k d raw_k / d hyper, which is the exact KL term at g = 1.
GradientEstimate f_gradient(ad::Var phi, ad::Var theta, const RatioBatch& ratios, FMode mode, HInput input,
                            ad::Var h_weights, std::span<const ad::Var> hyper = {});

/// Gradient of the divergence D_eta in phi, oriented for descent. eta is the
/// learnable node: a 1 x 1 raw alpha or the h weight column.
ad::Var divergence_gradient(const DivergenceSpec& spec, ad::Var eta, ad::Var phi, ad::Var theta,
                            const RatioBatch& ratios, std::span<const ad::Var> hyper = {});

struct PretrainReport {
  DivergenceSpec spec;
  double max_abs_error = 0.0;
  int steps = 0;
};

/// Least-squares fit of h to the KL target on a log-uniform grid over
/// [0.05, 20]. Throws std::runtime_error if the max error stays >= 0.05.
PretrainReport pretrain_h_to_kl_report(const DivergenceSpec& spec, int steps, double lr);
DivergenceSpec pretrain_h_to_kl(const DivergenceSpec& spec, int steps, double lr);
std::vector<double> pretrain_grid();
double kl_target(FMode mode, double t);

nlohmann::json to_json(const DivergenceSpec& spec);
DivergenceSpec spec_from_json(const nlohmann::json& doc);

const char* to_string(Kind k);
const char* to_string(FMode m);
const char* to_string(HInput h);

}  // namespace metadiv::divergences
