#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "chaosda/enkf.hpp"
#include "chaosda/envda.hpp"
#include "chaosda/ppo.hpp"

namespace chaosda::harness {

// Per-experiment training settings from the published tuning table.
struct TrainSettings {
  double gamma;
  double max_grad_norm;
  double value_coef;
  int n_assim_train;  // assimilation cycles per training episode
};

struct RegistryRow {
  envda::NoiseKind kind;
  double sigma;  // gaussian rows only, ignored for other kinds
  int steps_per_obs;
  std::array<bool, 3> mask;
  TrainSettings settings;
};

// All fifteen published rows in table order, duplicates included.
const std::vector<RegistryRow>& hyperparam_registry();

// First matching row. Unknown triples throw instead of defaulting silently.
TrainSettings registry_lookup(const envda::NoiseModel& noise, int steps_per_obs,
                              const std::array<bool, 3>& mask);

enum class Method { rl_single, rl_mc, enkf };

std::string method_name(Method m);

struct ExperimentConfig {
  std::string name = "experiment";
  envda::EnvConfig env;
  enkf::EnkfConfig enkf_cfg;
  ppo::PpoHyperparams rl;
  std::vector<Method> methods{Method::rl_single, Method::rl_mc, Method::enkf};
  int mc_members = 50;
  int repetitions = 50;
  std::uint64_t base_seed = 0;

  void validate() const;
};

struct MethodSeries {
  Method method = Method::rl_single;
  std::vector<double> rmse_mean;  // per model step, across repetitions
  std::vector<double> rmse_std;
  std::vector<double> time_avg_per_rep;
  double time_avg_mean = 0.0;
  double time_avg_std = 0.0;
  int divergences = 0;  // member restarts / frozen forecast steps, summed
};

struct RmseSummary {
  std::vector<double> times;  // one entry per model step
  std::vector<MethodSeries> methods;
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: no CSV artifacts
  bool write_rep_files = true;
  int threads = 1;
};

// Repeated twin-experiment comparison. Repetition r draws its twin from
// seed base_seed + r and every method consumes that same observation
// sequence. Writes rep<r>/{trajectory.csv,observations.csv}, curves.csv,
// and summary.csv under out_dir.
RmseSummary run_experiment(const ExperimentConfig& cfg,
                           const ppo::GaussianPolicy* policy,
                           const RunOptions& opts = {});

struct SweepRow {
  int n = 0;
  std::optional<double> rl_rmse;    // repetition-averaged time-averaged RMSE
  std::optional<double> enkf_rmse;
};

// RMSE versus ensemble size for the Monte-Carlo policy ensemble and the
// filter, over the same repetitions as run_experiment. Writes sweep.csv.
std::vector<SweepRow> ensemble_size_sweep(const ExperimentConfig& cfg,
                                          const ppo::GaussianPolicy* policy,
                                          const std::vector<int>& sizes,
                                          bool with_rl, bool with_enkf,
                                          const RunOptions& opts = {});

struct HistogramSeries {
  std::string panel;   // forecast | analysis | correction
  std::string method;  // rl | enkf
  std::vector<double> edges;  // bins + 1 entries, uniform width
  std::vector<int> counts;    // one per bin
};

// z-component member distributions at one observation time (repetition 0),
// plus the correction-term distribution, for both methods. The time must hit
// an observation node; the error message names the nearest valid times.
// Writes histograms_t<time>.csv.
std::vector<HistogramSeries> export_pdf_histograms(const ExperimentConfig& cfg,
                                                   const ppo::GaussianPolicy* policy,
                                                   double time,
                                                   const RunOptions& opts = {});

// No-assimilation baseline: the lifted first observation integrated freely
// over the twin horizon; per-step RMSE against the reference.
std::vector<double> free_run_rmse(const envda::EnvConfig& cfg,
                                  const envda::Twin& twin);

}  // namespace chaosda::harness
