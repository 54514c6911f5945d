#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "chaosda/config.hpp"
#include "chaosda/csv.hpp"
#include "chaosda/dynamics.hpp"
#include "chaosda/enkf.hpp"
#include "chaosda/envda.hpp"
#include "chaosda/harness.hpp"
#include "chaosda/neural.hpp"
#include "chaosda/ppo.hpp"

namespace fs = std::filesystem;
namespace cfgns = chaosda::config;
namespace csv = chaosda::csv;
namespace dyn = chaosda::dynamics;
namespace envda = chaosda::envda;
namespace harness = chaosda::harness;
namespace neural = chaosda::neural;
namespace ppo = chaosda::ppo;

namespace {

// Exit contract: 0 success, 2 config/usage error, 3 divergence budget
// exceeded, 1 anything else. Errors go to stderr as one machine-readable
// line: "error: <category>: <detail>".
constexpr int kOk = 0;
constexpr int kErrOther = 1;
constexpr int kErrConfig = 2;
constexpr int kErrDivergence = 3;

struct CliError {
  int code;
  std::string category;
  std::string detail;
};

struct Options {
  std::string config_path;
  std::string out;
  std::string seed_str;
  std::string policy_path;
  int workers = 0;  // 0 = unset: CHAOS_DA_WORKERS, then hardware
  bool quiet = false;
  bool resume = false;
};

std::uint64_t parse_u64(const std::string& text, const std::string& what) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw CliError{kErrConfig, "config",
                   what + " must be a non-negative integer, got '" + text + "'"};
  return v;
}

int resolve_workers(const Options& opt) {
  if (opt.workers > 0) return opt.workers;
  if (const char* env = std::getenv("CHAOS_DA_WORKERS")) {
    const std::uint64_t v = parse_u64(env, "CHAOS_DA_WORKERS");
    if (v == 0 || v > 4096)
      throw CliError{kErrConfig, "config",
                     "CHAOS_DA_WORKERS must lie in [1, 4096]"};
    return static_cast<int>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

cfgns::FileConfig load_config(const Options& opt) {
  if (opt.config_path.empty())
    throw CliError{kErrConfig, "config", "--config is required"};
  cfgns::FileConfig cfg = cfgns::parse_file(opt.config_path);
  if (!opt.seed_str.empty())
    cfg.experiment.base_seed = parse_u64(opt.seed_str, "--seed");
  return cfg;
}

fs::path out_dir(const Options& opt, const cfgns::FileConfig& cfg) {
  return opt.out.empty() ? fs::path(cfg.experiment.name) : fs::path(opt.out);
}

// Scales are baked into a trained policy; evaluating under different ones
// would silently feed the nets out-of-distribution inputs.
ppo::GaussianPolicy load_policy(const std::string& path,
                                const envda::EnvConfig& env) {
  if (path.empty())
    throw CliError{kErrConfig, "config",
                   "the selected methods need --policy <actor checkpoint>"};
  neural::LoadedCheckpoint ck;
  try {
    ck = neural::load_checkpoint(path);
  } catch (const std::exception& e) {
    throw CliError{kErrConfig, "config", std::string(e.what())};
  }
  if (ck.role != neural::kRoleActor)
    throw CliError{kErrConfig, "config",
                   "--policy must name an actor checkpoint, got role '" +
                       std::string(1, ck.role) + "'"};
  if (ck.extras.size() < 6)
    throw CliError{kErrConfig, "config",
                   "actor checkpoint lacks the log-std/scale extras block"};
  ppo::GaussianPolicy policy;
  policy.mean_net = std::move(ck.params);
  policy.log_std = Eigen::Vector3d(ck.extras[0], ck.extras[1], ck.extras[2]);
  const char* names[3] = {"pos_scale", "deriv_scale", "innov_scale"};
  const double expect[3] = {env.pos_scale, env.deriv_scale, env.innov_scale};
  for (int i = 0; i < 3; ++i)
    if (ck.extras[static_cast<std::size_t>(3 + i)] != expect[i])
      throw CliError{kErrConfig, "config",
                     std::string("checkpoint ") + names[i] +
                         " does not match the config value"};
  const int want_dim = env.state_dim();
  if (policy.mean_net.layers.front().w.cols() != want_dim)
    throw CliError{kErrConfig, "config",
                   "policy input width " +
                       std::to_string(policy.mean_net.layers.front().w.cols()) +
                       " does not fit the configured state size " +
                       std::to_string(want_dim)};
  return policy;
}

void check_divergence_budget(const cfgns::FileConfig& cfg,
                             std::int64_t divergences) {
  if (cfg.divergence_budget >= 0 && divergences > cfg.divergence_budget)
    throw CliError{kErrDivergence, "divergence",
                   std::to_string(divergences) +
                       " diverged segments exceed the configured budget of " +
                       std::to_string(cfg.divergence_budget)};
}

void print_summary(const harness::RmseSummary& summary, const fs::path& dir,
                   bool quiet) {
  if (quiet) return;
  for (const auto& m : summary.methods)
    std::cout << harness::method_name(m.method)
              << ": time-averaged rmse = " << m.time_avg_mean << " +/- "
              << m.time_avg_std << " (divergences " << m.divergences << ")\n";
  std::cout << "wrote " << (dir / "summary.csv").string() << "\n";
}

std::int64_t total_divergences(const harness::RmseSummary& summary) {
  std::int64_t n = 0;
  for (const auto& m : summary.methods) n += m.divergences;
  return n;
}

int cmd_simulate(const Options& opt) {
  const cfgns::FileConfig cfg = load_config(opt);
  const fs::path dir = out_dir(opt, cfg);
  fs::create_directories(dir);

  const auto& sim = cfg.simulate;
  const dyn::Trajectory t =
      dyn::integrate(sim.x0, cfg.experiment.env.params, cfg.experiment.env.grid,
                     static_cast<std::size_t>(sim.steps));
  const fs::path file = dir / "trajectory.csv";
  csv::Writer w(file);
  w.row({"time", "x", "y", "z", "dx", "dy", "dz"});
  for (std::size_t j = 0; j < t.points.size(); ++j) {
    const auto& p = t.points[j];
    w.row({csv::format_double(static_cast<double>(j) * cfg.experiment.env.grid.dt),
           csv::format_double(p.state.x), csv::format_double(p.state.y),
           csv::format_double(p.state.z), csv::format_double(p.deriv.x),
           csv::format_double(p.deriv.y), csv::format_double(p.deriv.z)});
  }
  if (t.diverged)
    std::cerr << "warning: trajectory left the bounding box after "
              << t.points.size() - 1 << " steps; file truncated there\n";
  if (!opt.quiet)
    std::cout << "wrote " << file.string() << " (" << t.points.size()
              << " rows)\n";
  return kOk;
}

int cmd_train(const Options& opt) {
  const cfgns::FileConfig cfg = load_config(opt);
  ppo::PpoHyperparams hp;
  try {
    hp = cfgns::resolve_hyperparams(cfg);
  } catch (const cfgns::ConfigError& e) {
    throw CliError{kErrConfig, "config", e.what()};
  }

  const fs::path dir = out_dir(opt, cfg);
  fs::create_directories(dir);
  const fs::path actor_path = dir / "actor.ckpt";
  const fs::path critic_path = dir / "critic.ckpt";
  const fs::path log_path = dir / "training_log.csv";

  // Episodes are bounded assimilation windows of the training length, not
  // the (typically longer) evaluation horizon.
  envda::EnvConfig env = cfg.experiment.env;
  env.n_cycles = hp.n_assim_per_episode;
  const ppo::EnvFactory factory = [env](int) {
    return std::make_unique<envda::Environment>(env);
  };

  ppo::TrainOptions topt;
  topt.threads = resolve_workers(opt);
  if (opt.resume) {
    try {
      auto actor = neural::load_checkpoint(actor_path.string());
      auto critic = neural::load_checkpoint(critic_path.string());
      if (actor.role != neural::kRoleActor ||
          critic.role != neural::kRoleCritic || actor.extras.size() < 6)
        throw std::runtime_error("checkpoint roles or extras are malformed");
      ppo::GaussianPolicy p;
      p.mean_net = std::move(actor.params);
      p.log_std = Eigen::Vector3d(actor.extras[0], actor.extras[1],
                                  actor.extras[2]);
      topt.initial_policy = std::move(p);
      topt.initial_critic = std::move(critic.params);
    } catch (const std::exception& e) {
      throw CliError{kErrConfig, "config",
                     "--resume needs valid checkpoints in " + dir.string() +
                         ": " + e.what()};
    }
    const auto rows = csv::read_rows(log_path);
    if (rows.empty())
      throw CliError{kErrConfig, "config",
                     "--resume needs an existing " + log_path.string()};
    topt.start_update =
        rows.size() == 1
            ? 0
            : static_cast<int>(std::stoll(rows.back().front())) + 1;
  }
  if (!opt.quiet)
    topt.on_update = [](const ppo::TrainLogRow& r) {
      std::cout << "update " << r.update_index << ": reward "
                << r.mean_episode_reward << ", actor " << r.actor_loss
                << ", critic " << r.critic_loss << "\n";
    };

  const ppo::TrainResult result =
      ppo::train(factory, hp, cfg.experiment.base_seed, topt);

  {
    csv::Writer log(log_path, opt.resume);
    if (!opt.resume)
      log.row({"update_index", "mean_episode_reward", "actor_loss",
               "critic_loss", "grad_norm_pre_clip", "log_std_mean"});
    for (const auto& r : result.log)
      log.row({std::to_string(r.update_index),
               csv::format_double(r.mean_episode_reward),
               csv::format_double(r.actor_loss),
               csv::format_double(r.critic_loss),
               csv::format_double(r.grad_norm_pre_clip),
               csv::format_double(r.log_std_mean)});
  }
  neural::save_checkpoint(
      actor_path.string(), neural::kRoleActor, result.policy.mean_net,
      {result.policy.log_std[0], result.policy.log_std[1],
       result.policy.log_std[2], env.pos_scale, env.deriv_scale,
       env.innov_scale});
  neural::save_checkpoint(critic_path.string(), neural::kRoleCritic,
                          result.critic,
                          {env.pos_scale, env.deriv_scale, env.innov_scale});
  if (!opt.quiet)
    std::cout << "ran " << result.episodes_run << " episodes ("
              << result.divergences << " divergences); wrote "
              << actor_path.string() << ", " << critic_path.string() << ", "
              << log_path.string() << "\n";
  check_divergence_budget(cfg, result.divergences);
  return kOk;
}

int run_methods(const Options& opt, bool rl_only) {
  cfgns::FileConfig cfg = load_config(opt);
  if (rl_only) {
    std::vector<harness::Method> kept;
    for (const auto m : cfg.experiment.methods)
      if (m != harness::Method::enkf) kept.push_back(m);
    if (kept.empty())
      throw CliError{kErrConfig, "config",
                     "evaluate needs an rl method in [experiment] methods"};
    cfg.experiment.methods = std::move(kept);
  }

  bool needs_policy = false;
  for (const auto m : cfg.experiment.methods)
    if (m != harness::Method::enkf) needs_policy = true;
  ppo::GaussianPolicy policy;
  if (needs_policy) policy = load_policy(opt.policy_path, cfg.experiment.env);

  harness::RunOptions ropts;
  ropts.out_dir = out_dir(opt, cfg);
  ropts.threads = resolve_workers(opt);
  const harness::RmseSummary summary = harness::run_experiment(
      cfg.experiment, needs_policy ? &policy : nullptr, ropts);
  print_summary(summary, ropts.out_dir, opt.quiet);
  check_divergence_budget(cfg, total_divergences(summary));
  return kOk;
}

int cmd_sweep(const Options& opt) {
  const cfgns::FileConfig cfg = load_config(opt);
  const bool with_rl = cfg.sweep.with_rl;
  ppo::GaussianPolicy policy;
  if (with_rl) policy = load_policy(opt.policy_path, cfg.experiment.env);

  harness::RunOptions ropts;
  ropts.out_dir = out_dir(opt, cfg);
  ropts.write_rep_files = false;
  ropts.threads = resolve_workers(opt);
  const auto rows = harness::ensemble_size_sweep(
      cfg.experiment, with_rl ? &policy : nullptr, cfg.sweep.sizes, with_rl,
      cfg.sweep.with_enkf, ropts);
  if (!opt.quiet) {
    for (const auto& r : rows) {
      std::cout << "n = " << r.n;
      if (r.rl_rmse) std::cout << ", rl rmse " << *r.rl_rmse;
      if (r.enkf_rmse) std::cout << ", enkf rmse " << *r.enkf_rmse;
      std::cout << "\n";
    }
    std::cout << "wrote " << (ropts.out_dir / "sweep.csv").string() << "\n";
  }
  return kOk;
}

int cmd_histograms(const Options& opt) {
  const cfgns::FileConfig cfg = load_config(opt);
  if (cfg.histogram_times.empty())
    throw CliError{kErrConfig, "config",
                   "the histograms command needs [histograms] times"};
  const ppo::GaussianPolicy policy =
      load_policy(opt.policy_path, cfg.experiment.env);

  harness::RunOptions ropts;
  ropts.out_dir = out_dir(opt, cfg);
  ropts.threads = resolve_workers(opt);
  for (const double t : cfg.histogram_times) {
    harness::export_pdf_histograms(cfg.experiment, &policy, t, ropts);
    if (!opt.quiet)
      std::cout << "wrote histograms for t = " << t << " under "
                << ropts.out_dir.string() << "\n";
  }
  return kOk;
}

void add_common(CLI::App* sub, Options& opt) {
  sub->add_option("--config", opt.config_path, "experiment config file")
      ->required();
  sub->add_option("--out", opt.out,
                  "output directory (default: the experiment name)");
  sub->add_option("--seed", opt.seed_str, "override the config base seed");
  sub->add_option("--workers", opt.workers,
                  "worker threads (default: CHAOS_DA_WORKERS, then all cores)")
      ->check(CLI::PositiveNumber);
  sub->add_flag("--quiet", opt.quiet, "suppress progress output");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lorenz '63 data assimilation: reinforcement-learned "
               "corrections versus an ensemble Kalman filter"};
  app.require_subcommand(1);
  Options opt;

  auto* sim = app.add_subcommand("simulate", "integrate a free-running trajectory");
  auto* train = app.add_subcommand("train", "train the correction policy");
  auto* evaluate =
      app.add_subcommand("evaluate", "run the rl methods over repetitions");
  auto* compare =
      app.add_subcommand("compare", "run all configured methods side by side");
  auto* sweep = app.add_subcommand("sweep", "vary the ensemble size");
  auto* hist =
      app.add_subcommand("histograms", "export ensemble histograms at fixed times");
  for (CLI::App* sub : {sim, train, evaluate, compare, sweep, hist})
    add_common(sub, opt);
  train->add_flag("--resume", opt.resume,
                  "continue from the checkpoints in the output directory");
  for (CLI::App* sub : {evaluate, compare, sweep, hist})
    sub->add_option("--policy", opt.policy_path, "trained actor checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return kErrConfig;
  }

  try {
    if (sim->parsed()) return cmd_simulate(opt);
    if (train->parsed()) return cmd_train(opt);
    if (evaluate->parsed()) return run_methods(opt, true);
    if (compare->parsed()) return run_methods(opt, false);
    if (sweep->parsed()) return cmd_sweep(opt);
    return cmd_histograms(opt);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.category << ": " << e.detail << "\n";
    return e.code;
  } catch (const cfgns::ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kErrConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kErrConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return kErrOther;
  }
}
