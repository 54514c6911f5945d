#include "chaosda/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "chaosda/csv.hpp"

namespace chaosda::harness {

namespace {

constexpr std::array<bool, 3> kFull{true, true, true};
constexpr std::array<bool, 3> kX{true, false, false};
constexpr std::array<bool, 3> kXY{true, true, false};
constexpr std::array<bool, 3> kXZ{true, false, true};

using envda::NoiseKind;

}  // namespace

const std::vector<RegistryRow>& hyperparam_registry() {
  static const std::vector<RegistryRow> rows{
      {NoiseKind::none, 0.0, 5, kFull, {0.9, 0.9, 0.7, 100}},
      {NoiseKind::none, 0.0, 50, kFull, {0.1, 0.8, 0.7, 100}},
      {NoiseKind::none, 0.0, 100, kFull, {0.1, 0.9, 0.7, 100}},
      {NoiseKind::gaussian, 1.0, 50, kFull, {0.9, 0.95, 0.95, 1000}},
      {NoiseKind::gaussian, 2.0, 50, kFull, {0.05, 0.8, 0.7, 1000}},
      {NoiseKind::gaussian, 3.0, 50, kFull, {0.1, 0.9, 0.9, 1000}},
      {NoiseKind::gaussian, 1.0, 5, kFull, {0.25, 0.8, 0.7, 100}},
      {NoiseKind::gaussian, 1.0, 50, kFull, {0.9, 0.95, 0.95, 1000}},
      {NoiseKind::gaussian, 1.0, 100, kFull, {0.05, 0.95, 0.9, 1000}},
      {NoiseKind::gaussian, 1.0, 50, kFull, {0.9, 0.95, 0.95, 1000}},
      {NoiseKind::lognormal, 0.0, 50, kFull, {0.8, 0.85, 0.95, 100}},
      {NoiseKind::uniform, 0.0, 50, kFull, {0.1, 0.9, 0.8, 100}},
      {NoiseKind::gaussian, 1.0, 50, kX, {0.25, 0.8, 0.8, 500}},
      {NoiseKind::gaussian, 1.0, 50, kXY, {0.3, 0.9, 0.7, 500}},
      {NoiseKind::gaussian, 1.0, 50, kXZ, {0.25, 0.8, 0.95, 1000}},
  };
  return rows;
}

TrainSettings registry_lookup(const envda::NoiseModel& noise, int steps_per_obs,
                              const std::array<bool, 3>& mask) {
  for (const RegistryRow& row : hyperparam_registry()) {
    if (row.kind != noise.kind) continue;
    if (row.kind == NoiseKind::gaussian && row.sigma != noise.sigma) continue;
    if (row.steps_per_obs != steps_per_obs) continue;
    if (row.mask != mask) continue;
    return row.settings;
  }
  throw std::out_of_range("no tuning-table entry for this experiment triple");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::rl_single: return "rl_single";
    case Method::rl_mc: return "rl_mc";
    case Method::enkf: return "enkf";
  }
  throw std::invalid_argument("unknown method");
}

void ExperimentConfig::validate() const {
  env.validate();
  enkf_cfg.validate();
  if (name.empty()) throw std::invalid_argument("experiment name is empty");
  if (mc_members < 1) throw std::invalid_argument("mc_members must be >= 1");
  if (repetitions < 1) throw std::invalid_argument("repetitions must be >= 1");
  if (methods.empty()) throw std::invalid_argument("no methods selected");
  for (std::size_t i = 0; i < methods.size(); ++i)
    for (std::size_t j = i + 1; j < methods.size(); ++j)
      if (methods[i] == methods[j])
        throw std::invalid_argument("duplicate method in experiment config");
}

namespace {

bool uses_rl(const std::vector<Method>& methods) {
  return std::any_of(methods.begin(), methods.end(), [](Method m) {
    return m == Method::rl_single || m == Method::rl_mc;
  });
}

void require_policy(const ExperimentConfig& cfg, const ppo::GaussianPolicy* policy) {
  if (!policy)
    throw std::invalid_argument("selected methods require a trained policy");
  if (policy->mean_net.input_dim() != cfg.env.state_dim() ||
      policy->mean_net.output_dim() != 3)
    throw std::invalid_argument("policy shape does not match the experiment");
}

// Everything one repetition contributes to the aggregate.
struct RepData {
  std::vector<std::vector<double>> rmse;  // per method, per model step
  std::vector<int> divergences;           // per method
};

void write_observations_csv(const std::filesystem::path& path,
                            const envda::EnvConfig& env, const envda::Twin& twin) {
  csv::Writer w(path);
  std::vector<std::string> header{"time"};
  const char* comp[3] = {"y_x", "y_y", "y_z"};
  for (int i : env.obs_op.observed_indices())
    header.push_back(comp[static_cast<std::size_t>(i)]);
  header.insert(header.end(), {"mask_x", "mask_y", "mask_z"});
  w.row(header);

  for (int k = 0; k <= env.n_cycles; ++k) {
    const Eigen::VectorXd& y = twin.observations[static_cast<std::size_t>(k)];
    std::vector<std::string> row{
        csv::format_double(static_cast<double>(k) * env.grid.obs_interval())};
    for (Eigen::Index c = 0; c < y.size(); ++c)
      row.push_back(csv::format_double(y(c)));
    for (int i = 0; i < 3; ++i)
      row.push_back(env.obs_op.mask[static_cast<std::size_t>(i)] ? "1" : "0");
    w.row(row);
  }
}

void write_trajectory_csv(const std::filesystem::path& path,
                          const ExperimentConfig& cfg, const envda::Twin& twin,
                          const std::vector<std::vector<dynamics::StateVec>>& paths,
                          const RepData& rep) {
  csv::Writer w(path);
  w.row({"method", "time", "x_ref", "y_ref", "z_ref", "x_a", "y_a", "z_a",
         "rmse", "member_id"});
  for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
    const std::string name = method_name(cfg.methods[i]);
    for (std::size_t j = 0; j < paths[i].size(); ++j) {
      const dynamics::StateVec& ref = twin.reference[j].state;
      const dynamics::StateVec& a = paths[i][j];
      w.row({name, csv::format_double(static_cast<double>(j) * cfg.env.grid.dt),
             csv::format_double(ref.x), csv::format_double(ref.y),
             csv::format_double(ref.z), csv::format_double(a.x),
             csv::format_double(a.y), csv::format_double(a.z),
             csv::format_double(rep.rmse[i][j]), "-1"});
    }
  }
}

RepData run_one_rep(const ExperimentConfig& cfg, const ppo::GaussianPolicy* policy,
                    int rep, const RunOptions& opts) {
  const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(rep);
  const envda::Twin twin = envda::generate_twin(cfg.env, seed);

  RepData out;
  out.rmse.resize(cfg.methods.size());
  out.divergences.resize(cfg.methods.size(), 0);
  std::vector<std::vector<dynamics::StateVec>> paths(cfg.methods.size());

  for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
    switch (cfg.methods[i]) {
      case Method::rl_single: {
        auto r = envda::run_rl_assimilation(*policy, cfg.env, twin,
                                            {false, 1}, seed);
        out.rmse[i] = std::move(r.mean_path_rmse);
        out.divergences[i] = r.members.front().n_reinits;
        paths[i] = std::move(r.mean_path);
        break;
      }
      case Method::rl_mc: {
        auto r = envda::run_rl_assimilation(*policy, cfg.env, twin,
                                            {true, cfg.mc_members}, seed);
        out.rmse[i] = std::move(r.mean_path_rmse);
        for (const auto& m : r.members) out.divergences[i] += m.n_reinits;
        paths[i] = std::move(r.mean_path);
        break;
      }
      case Method::enkf: {
        auto r = enkf::run_enkf(cfg.enkf_cfg, cfg.env, twin, seed);
        out.rmse[i] = std::move(r.mean_path_rmse);
        out.divergences[i] = r.diverged_member_steps;
        paths[i] = std::move(r.mean_path);
        break;
      }
    }
  }

  if (!opts.out_dir.empty() && opts.write_rep_files) {
    const std::filesystem::path rep_dir =
        opts.out_dir / ("rep" + std::to_string(rep));
    std::filesystem::create_directories(rep_dir);
    write_trajectory_csv(rep_dir / "trajectory.csv", cfg, twin, paths, out);
    write_observations_csv(rep_dir / "observations.csv", cfg.env, twin);
  }
  return out;
}

// Mean and unbiased standard deviation; a single sample has zero deviation.
void mean_and_std(const std::vector<double>& xs, double& mean, double& sd) {
  const double n = static_cast<double>(xs.size());
  double sum = 0.0;
  for (double x : xs) sum += x;
  mean = sum / n;
  if (xs.size() < 2) {
    sd = 0.0;
    return;
  }
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  sd = std::sqrt(ss / (n - 1.0));
}

void run_reps_parallel(const ExperimentConfig& cfg,
                       const ppo::GaussianPolicy* policy, const RunOptions& opts,
                       std::vector<RepData>& reps) {
  const int n_threads =
      std::max(1, std::min(opts.threads, cfg.repetitions));
  if (n_threads == 1) {
    for (int r = 0; r < cfg.repetitions; ++r)
      reps[static_cast<std::size_t>(r)] = run_one_rep(cfg, policy, r, opts);
    return;
  }

  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (int r = next.fetch_add(1); r < cfg.repetitions;
             r = next.fetch_add(1))
          reps[static_cast<std::size_t>(r)] = run_one_rep(cfg, policy, r, opts);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

RmseSummary run_experiment(const ExperimentConfig& cfg,
                           const ppo::GaussianPolicy* policy,
                           const RunOptions& opts) {
  cfg.validate();
  if (uses_rl(cfg.methods)) require_policy(cfg, policy);
  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);

  std::vector<RepData> reps(static_cast<std::size_t>(cfg.repetitions));
  run_reps_parallel(cfg, policy, opts, reps);

  const std::size_t n_steps = reps.front().rmse.front().size();
  RmseSummary summary;
  summary.times.resize(n_steps);
  for (std::size_t j = 0; j < n_steps; ++j)
    summary.times[j] = static_cast<double>(j) * cfg.env.grid.dt;

  std::vector<double> across(reps.size());
  for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
    MethodSeries s;
    s.method = cfg.methods[i];
    s.rmse_mean.resize(n_steps);
    s.rmse_std.resize(n_steps);
    for (std::size_t j = 0; j < n_steps; ++j) {
      for (std::size_t r = 0; r < reps.size(); ++r) across[r] = reps[r].rmse[i][j];
      mean_and_std(across, s.rmse_mean[j], s.rmse_std[j]);
    }
    s.time_avg_per_rep.resize(reps.size());
    for (std::size_t r = 0; r < reps.size(); ++r) {
      double sum = 0.0;
      for (double v : reps[r].rmse[i]) sum += v;
      s.time_avg_per_rep[r] = sum / static_cast<double>(n_steps);
      s.divergences += reps[r].divergences[i];
    }
    mean_and_std(s.time_avg_per_rep, s.time_avg_mean, s.time_avg_std);
    summary.methods.push_back(std::move(s));
  }

  if (!opts.out_dir.empty()) {
    {
      csv::Writer w(opts.out_dir / "curves.csv");
      std::vector<std::string> header{"time"};
      for (const auto& s : summary.methods) {
        header.push_back("rmse_mean_" + method_name(s.method));
        header.push_back("rmse_std_" + method_name(s.method));
      }
      w.row(header);
      for (std::size_t j = 0; j < n_steps; ++j) {
        std::vector<std::string> row{csv::format_double(summary.times[j])};
        for (const auto& s : summary.methods) {
          row.push_back(csv::format_double(s.rmse_mean[j]));
          row.push_back(csv::format_double(s.rmse_std[j]));
        }
        w.row(row);
      }
    }
    csv::Writer w(opts.out_dir / "summary.csv");
    w.row({"method", "time_avg_rmse_mean", "time_avg_rmse_std", "repetitions",
           "divergences"});
    for (const auto& s : summary.methods)
      w.row({method_name(s.method), csv::format_double(s.time_avg_mean),
             csv::format_double(s.time_avg_std), std::to_string(cfg.repetitions),
             std::to_string(s.divergences)});
  }
  return summary;
}

std::vector<SweepRow> ensemble_size_sweep(const ExperimentConfig& cfg,
                                          const ppo::GaussianPolicy* policy,
                                          const std::vector<int>& sizes,
                                          bool with_rl, bool with_enkf,
                                          const RunOptions& opts) {
  cfg.validate();
  if (sizes.empty()) throw std::invalid_argument("sweep needs at least one size");
  if (!with_rl && !with_enkf)
    throw std::invalid_argument("sweep needs at least one method");
  for (int n : sizes) {
    if (n < 1) throw std::invalid_argument("ensemble size must be >= 1");
    if (with_enkf && n < 2)
      throw std::invalid_argument("the filter needs an ensemble of at least 2");
  }
  if (with_rl) require_policy(cfg, policy);

  std::vector<SweepRow> rows;
  rows.reserve(sizes.size());
  for (int n : sizes) {
    ExperimentConfig sub = cfg;
    sub.methods.clear();
    if (with_rl) {
      sub.methods.push_back(Method::rl_mc);
      sub.mc_members = n;
    }
    if (with_enkf) {
      sub.methods.push_back(Method::enkf);
      sub.enkf_cfg.n_ens = n;
    }

    RunOptions quiet = opts;
    quiet.out_dir.clear();
    const RmseSummary summary = run_experiment(sub, policy, quiet);

    SweepRow row;
    row.n = n;
    for (const auto& s : summary.methods) {
      if (s.method == Method::rl_mc) row.rl_rmse = s.time_avg_mean;
      if (s.method == Method::enkf) row.enkf_rmse = s.time_avg_mean;
    }
    rows.push_back(row);
  }

  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    csv::Writer w(opts.out_dir / "sweep.csv");
    std::vector<std::string> header{"n_ens"};
    if (with_rl) header.push_back("rl_mc_rmse");
    if (with_enkf) header.push_back("enkf_rmse");
    w.row(header);
    for (const SweepRow& row : rows) {
      std::vector<std::string> cells{std::to_string(row.n)};
      if (with_rl) cells.push_back(csv::format_double(*row.rl_rmse));
      if (with_enkf) cells.push_back(csv::format_double(*row.enkf_rmse));
      w.row(cells);
    }
  }
  return rows;
}

namespace {

HistogramSeries make_histogram(const std::string& panel, const std::string& method,
                               const std::vector<double>& samples, double lo,
                               double hi) {
  constexpr int kBins = 50;
  if (!(hi - lo > 0.0)) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / kBins;

  HistogramSeries h;
  h.panel = panel;
  h.method = method;
  h.edges.resize(kBins + 1);
  for (int b = 0; b <= kBins; ++b) h.edges[static_cast<std::size_t>(b)] = lo + b * width;
  h.edges.back() = hi;
  h.counts.assign(kBins, 0);
  for (double x : samples) {
    int b = static_cast<int>(std::floor((x - lo) / width));
    b = std::clamp(b, 0, kBins - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

std::string trimmed_time(double t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", t);
  return buf;
}

}  // namespace

std::vector<HistogramSeries> export_pdf_histograms(const ExperimentConfig& cfg,
                                                   const ppo::GaussianPolicy* policy,
                                                   double time,
                                                   const RunOptions& opts) {
  cfg.validate();
  require_policy(cfg, policy);

  const double interval = cfg.env.grid.obs_interval();
  const long k = std::lround(time / interval);
  if (k < 0 || k > cfg.env.n_cycles ||
      std::abs(time - static_cast<double>(k) * interval) > 1e-9) {
    const long lo = std::clamp(static_cast<long>(std::floor(time / interval)),
                               0L, static_cast<long>(cfg.env.n_cycles));
    const long hi = std::min(lo + 1, static_cast<long>(cfg.env.n_cycles));
    throw std::invalid_argument(
        "time " + trimmed_time(time) + " is not an observation time; nearest are " +
        trimmed_time(static_cast<double>(lo) * interval) + " and " +
        trimmed_time(static_cast<double>(hi) * interval));
  }
  const auto ki = static_cast<std::size_t>(k);

  const envda::Twin twin = envda::generate_twin(cfg.env, cfg.base_seed);
  const auto rl = envda::run_rl_assimilation(*policy, cfg.env, twin,
                                             {true, cfg.mc_members}, cfg.base_seed);
  const auto ek = enkf::run_enkf(cfg.enkf_cfg, cfg.env, twin, cfg.base_seed);

  std::vector<double> rl_f, rl_a, rl_c, ek_f, ek_a, ek_c;
  for (const auto& m : rl.members) {
    rl_f.push_back(m.forecasts[ki].z);
    rl_a.push_back(m.analyses[ki].z);
    rl_c.push_back(m.analyses[ki].z - m.forecasts[ki].z);
  }
  const enkf::Ensemble& ef = ek.forecast_members[ki];
  const enkf::Ensemble& ea = ek.analysis_members[ki];
  for (std::size_t i = 0; i < ef.members.size(); ++i) {
    ek_f.push_back(ef.members[i].z);
    ek_a.push_back(ea.members[i].z);
    ek_c.push_back(ea.members[i].z - ef.members[i].z);
  }

  std::vector<HistogramSeries> out;
  const auto add_panel = [&](const std::string& panel,
                             const std::vector<double>& rl_samples,
                             const std::vector<double>& ek_samples) {
    double lo = rl_samples.front(), hi = rl_samples.front();
    for (double x : rl_samples) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    for (double x : ek_samples) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    out.push_back(make_histogram(panel, "rl", rl_samples, lo, hi));
    out.push_back(make_histogram(panel, "enkf", ek_samples, lo, hi));
  };
  add_panel("forecast", rl_f, ek_f);
  add_panel("analysis", rl_a, ek_a);
  add_panel("correction", rl_c, ek_c);

  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    csv::Writer w(opts.out_dir / ("histograms_t" + trimmed_time(time) + ".csv"));
    w.row({"panel", "method", "bin_left", "bin_right", "count"});
    for (const HistogramSeries& h : out)
      for (std::size_t b = 0; b + 1 < h.edges.size(); ++b)
        w.row({h.panel, h.method, csv::format_double(h.edges[b]),
               csv::format_double(h.edges[b + 1]),
               std::to_string(h.counts[b])});
  }
  return out;
}

std::vector<double> free_run_rmse(const envda::EnvConfig& cfg,
                                  const envda::Twin& twin) {
  cfg.validate();
  const dynamics::StateVec fill =
      dynamics::climatological_mean(cfg.params, cfg.grid.dt);
  const dynamics::StateVec start =
      envda::lift_observation(twin.observations.front(), cfg.obs_op, fill);

  const auto n_steps = static_cast<std::size_t>(cfg.n_cycles) *
                       static_cast<std::size_t>(cfg.grid.steps_per_obs);
  const dynamics::Trajectory t =
      dynamics::integrate(start, cfg.params, cfg.grid, n_steps);
  const std::size_t last_ok =
      t.diverged ? (t.points.size() >= 2 ? t.points.size() - 2 : 0)
                 : t.points.size() - 1;

  std::vector<double> rmse(n_steps + 1);
  for (std::size_t j = 0; j <= n_steps; ++j)
    rmse[j] = envda::rmse_full_state(t.points[std::min(j, last_ok)].state,
                                     twin.reference[j].state);
  return rmse;
}

}  // namespace chaosda::harness
