#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "chaosda/dynamics.hpp"
#include "chaosda/harness.hpp"
#include "chaosda/ppo.hpp"

namespace chaosda::config {

// Every parse or validation defect carries "<origin>:<line>: ..." where the
// line is known, and always names the offending field.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SimulateSettings {
  int steps = 1000;
  dynamics::StateVec x0{1.0, 1.0, 1.0};
};

struct SweepSettings {
  std::vector<int> sizes{2, 5, 10, 25, 50};
  bool with_rl = true;
  bool with_enkf = true;
};

// The four tuning-table fields stay optional so a config may rely on the
// registry triple (noise kind/level, observation interval, mask) instead of
// spelling them out; explicit values win over the table.
struct RlSettings {
  std::optional<double> gamma;
  std::optional<double> max_grad_norm;
  std::optional<double> value_coef;
  std::optional<int> n_assim_train;
  double learning_rate = 1e-3;
  double clip_epsilon = 0.2;
  int epochs_per_update = 10;
  int minibatch_size = 64;
  int n_workers = 8;
  int total_episodes = 2000;
};

struct FileConfig {
  harness::ExperimentConfig experiment;
  long long divergence_budget = -1;  // < 0 disables the budget
  RlSettings rl;
  SimulateSettings simulate;
  SweepSettings sweep;
  std::vector<double> histogram_times;
};

FileConfig parse_file(const std::filesystem::path& path);

// `origin` stands in for the file name in diagnostics.
FileConfig parse_string(std::string_view text, const std::string& origin);

// Registry values for the config's (noise, interval, mask) triple overlaid
// with any explicit [rl] fields. A registry miss is only an error when a
// field is left for the table to fill.
ppo::PpoHyperparams resolve_hyperparams(const FileConfig& cfg);

}  // namespace chaosda::config
