#include "chaosda/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "chaosda/enkf.hpp"

namespace chaosda::config {
namespace {

std::string trim(std::string_view v) {
  const auto b = v.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = v.find_last_not_of(" \t\r");
  return std::string(v.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(trim(item));
  return parts;
}

class Parser {
 public:
  Parser(std::string_view text, std::string origin)
      : text_(text), origin_(std::move(origin)), exp_(cfg_.experiment) {}

  FileConfig run() {
    register_handlers();
    walk();
    finish();
    return cfg_;
  }

 private:
  using Setter = std::function<void(const std::string&, int)>;

  [[noreturn]] void fail(int line, const std::string& msg) const {
    throw ConfigError(origin_ + ":" + std::to_string(line) + ": " + msg);
  }

  double want_double(const std::string& key, const std::string& v, int line) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    fail(line, "key '" + key + "' expects a number, got '" + v + "'");
  }

  long long want_int(const std::string& key, const std::string& v, int line) {
    long long out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
      fail(line, "key '" + key + "' expects an integer, got '" + v + "'");
    return out;
  }

  std::uint64_t want_u64(const std::string& key, const std::string& v, int line) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
      fail(line, "key '" + key + "' expects a non-negative integer, got '" + v + "'");
    return out;
  }

  int want_positive_int(const std::string& key, const std::string& v, int line) {
    const long long n = want_int(key, v, line);
    if (n < 1 || n > std::numeric_limits<int>::max())
      fail(line, "key '" + key + "' must be a positive integer");
    return static_cast<int>(n);
  }

  double want_positive(const std::string& key, const std::string& v, int line) {
    const double d = want_double(key, v, line);
    if (!(d > 0.0)) fail(line, "key '" + key + "' must be positive");
    return d;
  }

  void register_handlers() {
    handlers_["experiment"] = {
        {"name",
         [this](const std::string& v, int line) {
           if (v.empty() || v.find_first_of("/\\ ") != std::string::npos)
             fail(line, "key 'name' must be a nonempty token without "
                        "spaces or path separators");
           exp_.name = v;
         }},
        {"repetitions",
         [this](const std::string& v, int line) {
           exp_.repetitions = want_positive_int("repetitions", v, line);
         }},
        {"mc_members",
         [this](const std::string& v, int line) {
           exp_.mc_members = want_positive_int("mc_members", v, line);
         }},
        {"base_seed",
         [this](const std::string& v, int line) {
           exp_.base_seed = want_u64("base_seed", v, line);
         }},
        {"methods",
         [this](const std::string& v, int line) {
           exp_.methods.clear();
           for (const auto& m : split_list(v)) {
             if (m == "rl_single")
               exp_.methods.push_back(harness::Method::rl_single);
             else if (m == "rl_mc")
               exp_.methods.push_back(harness::Method::rl_mc);
             else if (m == "enkf")
               exp_.methods.push_back(harness::Method::enkf);
             else
               fail(line, "key 'methods' allows rl_single, rl_mc, enkf; got '" +
                              m + "'");
           }
           if (exp_.methods.empty()) fail(line, "key 'methods' must not be empty");
         }},
        {"divergence_budget",
         [this](const std::string& v, int line) {
           cfg_.divergence_budget = want_int("divergence_budget", v, line);
         }},
    };

    handlers_["dynamics"] = {
        {"sigma",
         [this](const std::string& v, int line) {
           exp_.env.params.sigma = want_double("sigma", v, line);
         }},
        {"rho",
         [this](const std::string& v, int line) {
           exp_.env.params.rho = want_double("rho", v, line);
         }},
        {"beta",
         [this](const std::string& v, int line) {
           exp_.env.params.beta = want_double("beta", v, line);
         }},
        {"dt",
         [this](const std::string& v, int line) {
           exp_.env.grid.dt = want_positive("dt", v, line);
         }},
    };

    handlers_["observation"] = {
        {"steps_per_obs",
         [this](const std::string& v, int line) {
           exp_.env.grid.steps_per_obs = want_positive_int("steps_per_obs", v, line);
         }},
        {"n_cycles",
         [this](const std::string& v, int line) {
           exp_.env.n_cycles = want_positive_int("n_cycles", v, line);
         }},
        {"spinup_time",
         [this](const std::string& v, int line) {
           exp_.env.spinup_time = want_double("spinup_time", v, line);
           if (exp_.env.spinup_time < 0.0)
             fail(line, "key 'spinup_time' must be non-negative");
         }},
        {"mask",
         [this](const std::string& v, int line) {
           std::array<bool, 3> m{false, false, false};
           for (const char c : v) {
             const int i = c == 'x' ? 0 : c == 'y' ? 1 : c == 'z' ? 2 : -1;
             if (i < 0)
               fail(line, "key 'mask' allows only characters x, y, z; got '" +
                              v + "'");
             if (m[static_cast<std::size_t>(i)])
               fail(line, "key 'mask' repeats component '" + std::string(1, c) +
                              "'");
             m[static_cast<std::size_t>(i)] = true;
           }
           if (!m[0] && !m[1] && !m[2])
             fail(line, "key 'mask' must observe at least one component");
           exp_.env.obs_op.mask = m;
         }},
    };

    handlers_["noise"] = {
        {"kind",
         [this](const std::string& v, int line) {
           if (v == "none")
             exp_.env.noise.kind = envda::NoiseKind::none;
           else if (v == "gaussian")
             exp_.env.noise.kind = envda::NoiseKind::gaussian;
           else if (v == "lognormal")
             exp_.env.noise.kind = envda::NoiseKind::lognormal;
           else if (v == "uniform")
             exp_.env.noise.kind = envda::NoiseKind::uniform;
           else
             fail(line,
                  "key 'kind' allows none, gaussian, lognormal, uniform; got '" +
                      v + "'");
         }},
        {"sigma",
         [this](const std::string& v, int line) {
           exp_.env.noise.sigma = want_positive("sigma", v, line);
           noise_sigma_line_ = line;
         }},
    };

    handlers_["rl"] = {
        {"gamma",
         [this](const std::string& v, int line) {
           const double g = want_double("gamma", v, line);
           if (g < 0.0 || g > 1.0) fail(line, "key 'gamma' must lie in [0, 1]");
           cfg_.rl.gamma = g;
         }},
        {"max_grad_norm",
         [this](const std::string& v, int line) {
           cfg_.rl.max_grad_norm = want_positive("max_grad_norm", v, line);
         }},
        {"value_coef",
         [this](const std::string& v, int line) {
           cfg_.rl.value_coef = want_positive("value_coef", v, line);
         }},
        {"n_assim_train",
         [this](const std::string& v, int line) {
           cfg_.rl.n_assim_train = want_positive_int("n_assim_train", v, line);
         }},
        {"learning_rate",
         [this](const std::string& v, int line) {
           cfg_.rl.learning_rate = want_positive("learning_rate", v, line);
         }},
        {"clip_epsilon",
         [this](const std::string& v, int line) {
           cfg_.rl.clip_epsilon = want_positive("clip_epsilon", v, line);
         }},
        {"epochs_per_update",
         [this](const std::string& v, int line) {
           cfg_.rl.epochs_per_update = want_positive_int("epochs_per_update", v, line);
         }},
        {"minibatch_size",
         [this](const std::string& v, int line) {
           cfg_.rl.minibatch_size = want_positive_int("minibatch_size", v, line);
         }},
        {"n_workers",
         [this](const std::string& v, int line) {
           cfg_.rl.n_workers = want_positive_int("n_workers", v, line);
         }},
        {"total_episodes",
         [this](const std::string& v, int line) {
           const long long n = want_int("total_episodes", v, line);
           if (n < 0) fail(line, "key 'total_episodes' must be non-negative");
           cfg_.rl.total_episodes = static_cast<int>(n);
         }},
        {"reward_floor",
         [this](const std::string& v, int line) {
           exp_.env.reward_floor = want_double("reward_floor", v, line);
         }},
        {"pos_scale",
         [this](const std::string& v, int line) {
           exp_.env.pos_scale = want_positive("pos_scale", v, line);
         }},
        {"deriv_scale",
         [this](const std::string& v, int line) {
           exp_.env.deriv_scale = want_positive("deriv_scale", v, line);
         }},
        {"innov_scale",
         [this](const std::string& v, int line) {
           exp_.env.innov_scale = want_positive("innov_scale", v, line);
         }},
    };

    handlers_["enkf"] = {
        {"n_ens",
         [this](const std::string& v, int line) {
           exp_.enkf_cfg.n_ens = want_positive_int("n_ens", v, line);
         }},
        {"r_variance",
         [this](const std::string& v, int line) {
           exp_.enkf_cfg.r_variance = want_positive("r_variance", v, line);
           r_variance_set_ = true;
         }},
        {"q_variance",
         [this](const std::string& v, int line) {
           exp_.enkf_cfg.q_variance = want_double("q_variance", v, line);
           if (exp_.enkf_cfg.q_variance < 0.0)
             fail(line, "key 'q_variance' must be non-negative");
         }},
        {"initial_spread",
         [this](const std::string& v, int line) {
           exp_.enkf_cfg.initial_spread = want_positive("initial_spread", v, line);
         }},
    };

    handlers_["simulate"] = {
        {"steps",
         [this](const std::string& v, int line) {
           cfg_.simulate.steps = want_positive_int("steps", v, line);
         }},
        {"x0",
         [this](const std::string& v, int line) {
           cfg_.simulate.x0.x = want_double("x0", v, line);
         }},
        {"y0",
         [this](const std::string& v, int line) {
           cfg_.simulate.x0.y = want_double("y0", v, line);
         }},
        {"z0",
         [this](const std::string& v, int line) {
           cfg_.simulate.x0.z = want_double("z0", v, line);
         }},
    };

    handlers_["sweep"] = {
        {"sizes",
         [this](const std::string& v, int line) {
           cfg_.sweep.sizes.clear();
           for (const auto& item : split_list(v))
             cfg_.sweep.sizes.push_back(want_positive_int("sizes", item, line));
           if (cfg_.sweep.sizes.empty())
             fail(line, "key 'sizes' must list at least one ensemble size");
         }},
        {"methods",
         [this](const std::string& v, int line) {
           cfg_.sweep.with_rl = false;
           cfg_.sweep.with_enkf = false;
           for (const auto& m : split_list(v)) {
             if (m == "rl")
               cfg_.sweep.with_rl = true;
             else if (m == "enkf")
               cfg_.sweep.with_enkf = true;
             else
               fail(line, "key 'methods' allows rl, enkf; got '" + m + "'");
           }
           if (!cfg_.sweep.with_rl && !cfg_.sweep.with_enkf)
             fail(line, "key 'methods' must not be empty");
         }},
    };

    handlers_["histograms"] = {
        {"times",
         [this](const std::string& v, int line) {
           cfg_.histogram_times.clear();
           for (const auto& item : split_list(v)) {
             const double t = want_double("times", item, line);
             if (t < 0.0) fail(line, "key 'times' must be non-negative");
             cfg_.histogram_times.push_back(t);
           }
           if (cfg_.histogram_times.empty())
             fail(line, "key 'times' must list at least one time");
         }},
    };
  }

  void walk() {
    int line = 0;
    std::string section;
    std::size_t pos = 0;
    while (pos <= text_.size()) {
      const auto nl = text_.find('\n', pos);
      const std::string raw =
          trim(text_.substr(pos, nl == std::string_view::npos ? text_.size() - pos
                                                              : nl - pos));
      pos = nl == std::string_view::npos ? text_.size() + 1 : nl + 1;
      ++line;
      if (raw.empty() || raw.front() == '#' || raw.front() == ';') continue;

      if (raw.front() == '[') {
        if (raw.back() != ']') fail(line, "unterminated section header");
        section = trim(std::string_view(raw).substr(1, raw.size() - 2));
        if (!handlers_.count(section))
          fail(line, "unknown section [" + section + "]");
        continue;
      }

      const auto eq = raw.find('=');
      if (eq == std::string::npos)
        fail(line, "expected 'key = value', got '" + raw + "'");
      const std::string key = trim(std::string_view(raw).substr(0, eq));
      const std::string value = trim(std::string_view(raw).substr(eq + 1));
      if (section.empty()) fail(line, "key '" + key + "' appears before any section");
      if (key.empty()) fail(line, "empty key");
      if (value.empty()) fail(line, "key '" + key + "' has an empty value");

      const auto& table = handlers_.at(section);
      const auto it = table.find(key);
      if (it == table.end())
        fail(line, "unknown key '" + key + "' in [" + section + "]");
      if (!seen_.insert(section + "." + key).second)
        fail(line, "duplicate key '" + key + "' in [" + section + "]");
      it->second(value, line);
    }
  }

  void finish() {
    if (noise_sigma_line_ > 0 &&
        exp_.env.noise.kind != envda::NoiseKind::gaussian)
      fail(noise_sigma_line_,
           "key 'sigma' in [noise] applies only to gaussian noise");
    if (!r_variance_set_)
      exp_.enkf_cfg.r_variance = enkf::matched_r_variance(exp_.env.noise);
    try {
      exp_.validate();
    } catch (const std::exception& e) {
      throw ConfigError(origin_ + ": " + e.what());
    }
  }

  std::string_view text_;
  std::string origin_;
  FileConfig cfg_;
  harness::ExperimentConfig& exp_;
  std::map<std::string, std::map<std::string, Setter>> handlers_;
  std::set<std::string> seen_;
  int noise_sigma_line_ = 0;
  bool r_variance_set_ = false;
};

}  // namespace

FileConfig parse_string(std::string_view text, const std::string& origin) {
  return Parser(text, origin).run();
}

FileConfig parse_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good())
    throw ConfigError(path.string() + ": cannot open config file");
  std::string text{std::istreambuf_iterator<char>(in),
                   std::istreambuf_iterator<char>()};
  return parse_string(text, path.string());
}

ppo::PpoHyperparams resolve_hyperparams(const FileConfig& cfg) {
  const auto& rl = cfg.rl;
  ppo::PpoHyperparams hp;
  hp.learning_rate = rl.learning_rate;
  hp.clip_epsilon = rl.clip_epsilon;
  hp.epochs_per_update = rl.epochs_per_update;
  hp.minibatch_size = rl.minibatch_size;
  hp.n_workers = rl.n_workers;
  hp.total_episodes = rl.total_episodes;

  const bool need_table = !rl.gamma || !rl.max_grad_norm || !rl.value_coef ||
                          !rl.n_assim_train;
  harness::TrainSettings table{};
  if (need_table) {
    const auto& env = cfg.experiment.env;
    try {
      table = harness::registry_lookup(env.noise, env.grid.steps_per_obs,
                                       env.obs_op.mask);
    } catch (const std::out_of_range&) {
      throw ConfigError(
          "no tuning-table entry for this noise/interval/mask triple; set "
          "gamma, max_grad_norm, value_coef, n_assim_train explicitly in [rl]");
    }
  }
  hp.gamma = rl.gamma.value_or(table.gamma);
  hp.max_grad_norm = rl.max_grad_norm.value_or(table.max_grad_norm);
  hp.value_coef = rl.value_coef.value_or(table.value_coef);
  hp.n_assim_per_episode = rl.n_assim_train.value_or(table.n_assim_train);
  return hp;
}

}  // namespace chaosda::config
