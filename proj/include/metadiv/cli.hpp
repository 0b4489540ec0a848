#pragma once

#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "metadiv/divergences.hpp"
#include "metadiv/metalearn.hpp"

namespace metadiv::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumerical = 2;

/// Flat key=value run configuration. Only keys of the documented schema are
/// accepted; unset keys take defaults that may depend on experiment and family.
class RunConfig {
 public:
  /// '#' starts a comment; blank lines are ignored. Throws invalid_argument
  /// naming the offending key or line.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::string& path);

  /// Sets one key after validating its name and value type.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  /// Explicit value or the resolved default.
  std::string get(const std::string& key) const;
  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;

  /// Explicitly set keys in schema order; parse(format()) round-trips.
  std::string format() const;
  /// Every key with its resolved value. Without runtime keys (out, workers)
  /// the text depends only on what determines results.
  std::string format_resolved(bool runtime = true) const;

  static std::vector<std::string> keys();

 private:
  std::map<std::string, std::string> values_;
};

bool is_mog(const RunConfig& cfg);
metalearn::MetaConfig meta_config(const RunConfig& cfg);
std::unique_ptr<metalearn::Problem> make_problem(const RunConfig& cfg);
/// alpha0 for the alpha family, an h-network pretrained to the KL otherwise.
divergences::DivergenceSpec initial_divergence(const RunConfig& cfg);

/// Creates a fresh subdirectory of out named by command and UTC time; never
/// reuses an existing directory.
std::string fresh_run_dir(const std::string& out, const std::string& command);

/// Entry point; returns one of the kExit codes.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace metadiv::cli
