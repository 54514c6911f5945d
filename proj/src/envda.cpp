#include "chaosda/envda.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace chaosda::envda {

namespace {

constexpr double kE = 2.71828182845904523536;

// Keeps agent states finite when the blow-up guard truncated a forecast:
// extend with the last pair whose entries are all finite numbers.
void pad_segment(std::vector<dynamics::StatePair>& seg, std::size_t want) {
  auto entry_finite = [](const dynamics::StatePair& p) {
    for (int i = 0; i < 3; ++i)
      if (!std::isfinite(p.state[i]) || !std::isfinite(p.deriv[i])) return false;
    return true;
  };
  std::size_t last = seg.size();
  while (last > 0 && !entry_finite(seg[last - 1])) --last;
  const dynamics::StatePair filler =
      last > 0 ? seg[last - 1] : dynamics::StatePair{};
  seg.resize(last);
  while (seg.size() < want) seg.push_back(filler);
}

}  // namespace

int ObservationOperator::obs_dim() const {
  return static_cast<int>(mask[0]) + static_cast<int>(mask[1]) +
         static_cast<int>(mask[2]);
}

std::vector<int> ObservationOperator::observed_indices() const {
  std::vector<int> idx;
  for (int i = 0; i < 3; ++i)
    if (mask[static_cast<std::size_t>(i)]) idx.push_back(i);
  return idx;
}

Eigen::VectorXd ObservationOperator::project(const dynamics::StateVec& s) const {
  Eigen::VectorXd out(obs_dim());
  int j = 0;
  for (int i = 0; i < 3; ++i)
    if (mask[static_cast<std::size_t>(i)]) out(j++) = s[i];
  return out;
}

void ObservationOperator::validate() const {
  if (obs_dim() == 0)
    throw std::invalid_argument("observation operator observes no components");
}

double NoiseModel::draw(Rng& rng) const {
  switch (kind) {
    case NoiseKind::none:
      return 0.0;
    case NoiseKind::gaussian:
      return rng.normal(0.0, sigma);
    case NoiseKind::lognormal:
      return rng.lognormal(0.0, 1.0);
    case NoiseKind::uniform:
      return rng.uniform(0.0, 1.0);
  }
  return 0.0;
}

double NoiseModel::variance() const {
  switch (kind) {
    case NoiseKind::none:
      return 0.0;
    case NoiseKind::gaussian:
      return sigma * sigma;
    case NoiseKind::lognormal:
      return (kE - 1.0) * kE;  // (e^1 - 1) e^1 for log-mean 0, log-std 1
    case NoiseKind::uniform:
      return 1.0 / 12.0;
  }
  return 0.0;
}

void NoiseModel::validate() const {
  if (kind == NoiseKind::gaussian && !(sigma > 0.0))
    throw std::invalid_argument("gaussian noise needs sigma > 0");
}

void EnvConfig::validate() const {
  dynamics::validate(grid);
  obs_op.validate();
  noise.validate();
  if (n_cycles < 1) throw std::invalid_argument("n_cycles must be >= 1");
  if (!(spinup_time >= 0.0))
    throw std::invalid_argument("spinup_time must be >= 0");
  if (!(pos_scale > 0.0 && deriv_scale > 0.0 && innov_scale > 0.0))
    throw std::invalid_argument("state scales must be positive");
}

Twin generate_twin(const EnvConfig& cfg, std::uint64_t seed) {
  cfg.validate();

  Rng init_rng(derive_seed(seed, "twin-init"));
  dynamics::StateVec x0{1.0, 1.0, 1.0};
  for (int i = 0; i < 3; ++i) x0[i] += init_rng.uniform(-1.0, 1.0);

  const auto spinup_steps = static_cast<std::size_t>(
      std::llround(cfg.spinup_time / cfg.grid.dt));
  if (spinup_steps > 0) {
    const dynamics::Trajectory warm =
        dynamics::integrate(x0, cfg.params, cfg.grid, spinup_steps);
    if (warm.diverged)
      throw std::runtime_error("reference trajectory diverged during spin-up");
    x0 = warm.points.back().state;
  }

  const std::size_t n_obs = static_cast<std::size_t>(cfg.n_cycles) + 2;
  const auto total_steps =
      static_cast<std::size_t>(cfg.n_cycles + 1) *
      static_cast<std::size_t>(cfg.grid.steps_per_obs);
  Twin twin;
  {
    dynamics::Trajectory ref =
        dynamics::integrate(x0, cfg.params, cfg.grid, total_steps);
    if (ref.diverged)
      throw std::runtime_error("reference trajectory diverged");
    twin.reference = std::move(ref.points);
  }

  Rng noise_rng(derive_seed(seed, "obs-noise"));
  twin.observations.reserve(n_obs);
  for (std::size_t k = 0; k < n_obs; ++k) {
    Eigen::VectorXd y =
        cfg.obs_op.project(twin.ref_at_obs(static_cast<int>(k),
                                           cfg.grid.steps_per_obs));
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += cfg.noise.draw(noise_rng);
    twin.observations.push_back(std::move(y));
  }
  return twin;
}

double negative_rmse(const Eigen::VectorXd& observation,
                     const Eigen::VectorXd& projected) {
  if (observation.size() != projected.size())
    throw std::invalid_argument("negative_rmse: size mismatch");
  const double ms = (observation - projected).squaredNorm() /
                    static_cast<double>(observation.size());
  return -std::sqrt(ms);
}

double rmse_full_state(const dynamics::StateVec& a, const dynamics::StateVec& b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  const double dz = a.z - b.z;
  return std::sqrt((dx * dx + dy * dy + dz * dz) / 3.0);
}

dynamics::StateVec lift_observation(const Eigen::VectorXd& observation,
                                    const ObservationOperator& op,
                                    const dynamics::StateVec& fill) {
  if (observation.size() != op.obs_dim())
    throw std::invalid_argument("lift_observation: size mismatch");
  dynamics::StateVec out = fill;
  int j = 0;
  for (int i = 0; i < 3; ++i)
    if (op.mask[static_cast<std::size_t>(i)]) out[i] = observation(j++);
  return out;
}

Eigen::VectorXd build_agent_state(const std::vector<dynamics::StatePair>& segment,
                                  const Eigen::VectorXd& observation,
                                  const ObservationOperator& op) {
  if (segment.empty())
    throw std::invalid_argument("build_agent_state: empty forecast segment");
  if (observation.size() != op.obs_dim())
    throw std::invalid_argument("build_agent_state: observation size mismatch");

  const auto n = static_cast<Eigen::Index>(segment.size());
  Eigen::VectorXd out(6 * n + op.obs_dim());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = segment[static_cast<std::size_t>(i)];
    for (int c = 0; c < 3; ++c) {
      out(6 * i + c) = p.state[c];
      out(6 * i + 3 + c) = p.deriv[c];
    }
  }
  out.tail(op.obs_dim()) = observation - op.project(segment.back().state);
  return out;
}

Eigen::VectorXd scale_agent_state(const Eigen::VectorXd& raw,
                                  const EnvConfig& cfg) {
  const int n_points = cfg.grid.steps_per_obs + 1;
  const int obs = cfg.obs_op.obs_dim();
  if (raw.size() != 6 * n_points + obs)
    throw std::invalid_argument("scale_agent_state: size mismatch");

  Eigen::VectorXd out(raw.size());
  for (int i = 0; i < n_points; ++i) {
    out.segment<3>(6 * i) = raw.segment<3>(6 * i) / cfg.pos_scale;
    out.segment<3>(6 * i + 3) = raw.segment<3>(6 * i + 3) / cfg.deriv_scale;
  }
  out.tail(obs) = raw.tail(obs) / cfg.innov_scale;
  return out;
}

Environment::Environment(EnvConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  // Resolve the fill value up front so worker threads never race on the
  // shared cache.
  dynamics::climatological_mean(cfg_.params, cfg_.grid.dt);
}

Environment::Environment(EnvConfig cfg, Twin fixed_twin)
    : cfg_(std::move(cfg)), twin_(std::move(fixed_twin)), fixed_twin_(true) {
  cfg_.validate();
  dynamics::climatological_mean(cfg_.params, cfg_.grid.dt);
}

const dynamics::StateVec& Environment::forecast_endpoint() const {
  return segment_.back().state;
}

Eigen::VectorXd Environment::observe_and_build(int obs_index) {
  const Eigen::VectorXd& y = twin_.observations[static_cast<std::size_t>(obs_index)];
  return scale_agent_state(build_agent_state(segment_, y, cfg_.obs_op), cfg_);
}

Eigen::VectorXd Environment::reset(std::uint64_t episode_seed) {
  if (!fixed_twin_) twin_ = generate_twin(cfg_, episode_seed);

  const dynamics::StateVec fill =
      dynamics::climatological_mean(cfg_.params, cfg_.grid.dt);
  analysis_ = lift_observation(twin_.observations.front(), cfg_.obs_op, fill);
  actions_taken_ = 0;
  pending_divergence_ = false;

  dynamics::Trajectory t = dynamics::integrate(
      analysis_, cfg_.params, cfg_.grid,
      static_cast<std::size_t>(cfg_.grid.steps_per_obs));
  segment_ = std::move(t.points);
  if (t.diverged) {
    pad_segment(segment_, static_cast<std::size_t>(cfg_.grid.steps_per_obs) + 1);
    pending_divergence_ = true;
  }
  obs_index_ = 1;
  return observe_and_build(obs_index_);
}

ppo::EnvStepOut Environment::step(const Eigen::Vector3d& action) {
  if (segment_.empty())
    throw std::logic_error("environment stepped before reset");

  ppo::EnvStepOut out;
  if (pending_divergence_) {
    out.state = observe_and_build(obs_index_);
    out.reward = cfg_.reward_floor;
    out.terminal = true;
    out.episode_over = true;
    return out;
  }

  analysis_ = forecast_endpoint();
  for (int i = 0; i < 3; ++i) analysis_[i] += action(i);
  ++actions_taken_;

  bool diverged = !dynamics::finite_bounded(analysis_);
  if (!diverged) {
    dynamics::Trajectory t = dynamics::integrate(
        analysis_, cfg_.params, cfg_.grid,
        static_cast<std::size_t>(cfg_.grid.steps_per_obs));
    segment_ = std::move(t.points);
    diverged = t.diverged;
  }
  if (diverged) {
    pad_segment(segment_, static_cast<std::size_t>(cfg_.grid.steps_per_obs) + 1);
    ++obs_index_;
    out.state = observe_and_build(obs_index_);
    out.reward = cfg_.reward_floor;
    out.terminal = true;
    out.episode_over = true;
    return out;
  }

  ++obs_index_;
  const Eigen::VectorXd& y = twin_.observations[static_cast<std::size_t>(obs_index_)];
  out.reward = negative_rmse(y, cfg_.obs_op.project(forecast_endpoint()));
  out.state = observe_and_build(obs_index_);
  out.episode_over = actions_taken_ >= cfg_.n_cycles;
  return out;
}

MemberRun run_rl_member(const ppo::GaussianPolicy& policy, const EnvConfig& cfg,
                        const Twin& twin, std::uint64_t member_seed,
                        bool stochastic) {
  cfg.validate();
  if (policy.mean_net.input_dim() != cfg.state_dim())
    throw std::invalid_argument("policy input dimension does not match config");
  if (policy.mean_net.output_dim() != 3)
    throw std::invalid_argument("policy must emit 3-component actions");

  const int T = cfg.grid.steps_per_obs;
  const dynamics::StateVec fill =
      dynamics::climatological_mean(cfg.params, cfg.grid.dt);
  Rng action_rng(derive_seed(member_seed, "actions"));

  MemberRun run;
  run.analyses.reserve(static_cast<std::size_t>(cfg.n_cycles) + 1);
  run.forecasts.reserve(static_cast<std::size_t>(cfg.n_cycles) + 1);
  run.rmse.reserve(static_cast<std::size_t>(cfg.n_cycles) + 1);
  run.path.reserve(static_cast<std::size_t>(cfg.n_cycles) *
                       static_cast<std::size_t>(T) +
                   1);

  dynamics::StateVec a = lift_observation(twin.observations.front(), cfg.obs_op, fill);
  run.analyses.push_back(a);
  run.forecasts.push_back(a);
  run.path.push_back(a);
  run.rmse.push_back(rmse_full_state(a, twin.ref_at_obs(0, T)));

  for (int k = 1; k <= cfg.n_cycles; ++k) {
    const Eigen::VectorXd& y = twin.observations[static_cast<std::size_t>(k)];
    dynamics::Trajectory t = dynamics::integrate(
        a, cfg.params, cfg.grid, static_cast<std::size_t>(T));
    if (t.diverged)
      pad_segment(t.points, static_cast<std::size_t>(T) + 1);
    for (int s = 1; s < T; ++s)
      run.path.push_back(t.points[static_cast<std::size_t>(s)].state);

    if (t.diverged) {
      a = lift_observation(y, cfg.obs_op, fill);
      ++run.n_reinits;
    } else {
      const Eigen::VectorXd state =
          scale_agent_state(build_agent_state(t.points, y, cfg.obs_op), cfg);
      const Eigen::Vector3d act =
          stochastic ? ppo::sample_action(policy, state, action_rng).action
                     : ppo::deterministic_action(policy, state);
      a = t.points.back().state;
      for (int i = 0; i < 3; ++i) a[i] += act(i);
      if (!dynamics::finite_bounded(a)) {
        a = lift_observation(y, cfg.obs_op, fill);
        ++run.n_reinits;
      }
    }
    run.analyses.push_back(a);
    run.forecasts.push_back(t.points.back().state);
    run.path.push_back(a);
    run.rmse.push_back(rmse_full_state(a, twin.ref_at_obs(k, T)));
  }
  return run;
}

RlRunResult run_rl_assimilation(const ppo::GaussianPolicy& policy,
                                const EnvConfig& cfg, const Twin& twin,
                                const RlRunMode& mode, std::uint64_t seed) {
  if (mode.n_members < 1)
    throw std::invalid_argument("mc ensemble needs at least one member");

  const int n_members = mode.stochastic ? mode.n_members : 1;
  RlRunResult out;
  out.members.reserve(static_cast<std::size_t>(n_members));
  for (int m = 0; m < n_members; ++m) {
    out.members.push_back(
        run_rl_member(policy, cfg, twin,
                      derive_seed(seed, "member", static_cast<std::uint64_t>(m)),
                      mode.stochastic));
  }

  const std::size_t n_times = out.members.front().analyses.size();
  out.times.resize(n_times);
  out.mean_analysis.resize(n_times);
  out.mean_rmse.resize(n_times);
  for (std::size_t k = 0; k < n_times; ++k) {
    out.times[k] = static_cast<double>(k) * cfg.grid.obs_interval();
    dynamics::StateVec mean;
    for (const auto& m : out.members)
      for (int i = 0; i < 3; ++i) mean[i] += m.analyses[k][i];
    for (int i = 0; i < 3; ++i) mean[i] /= static_cast<double>(n_members);
    out.mean_analysis[k] = mean;
    out.mean_rmse[k] = rmse_full_state(
        mean, twin.ref_at_obs(static_cast<int>(k), cfg.grid.steps_per_obs));
  }

  const std::size_t n_steps = out.members.front().path.size();
  out.mean_path.resize(n_steps);
  out.mean_path_rmse.resize(n_steps);
  for (std::size_t j = 0; j < n_steps; ++j) {
    dynamics::StateVec mean;
    for (const auto& m : out.members)
      for (int i = 0; i < 3; ++i) mean[i] += m.path[j][i];
    for (int i = 0; i < 3; ++i) mean[i] /= static_cast<double>(n_members);
    out.mean_path[j] = mean;
    out.mean_path_rmse[j] = rmse_full_state(mean, twin.reference[j].state);
  }
  return out;
}

}  // namespace chaosda::envda
