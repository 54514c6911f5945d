#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <vector>

#include "chaosda/dynamics.hpp"
#include "chaosda/ppo.hpp"
#include "chaosda/rng.hpp"

namespace chaosda::envda {

// Diagonal 0/1 selection of observed state components.
struct ObservationOperator {
  std::array<bool, 3> mask{true, true, true};

  int obs_dim() const;
  std::vector<int> observed_indices() const;
  Eigen::VectorXd project(const dynamics::StateVec& s) const;
  void validate() const;  // at least one component must be observed
};

enum class NoiseKind { none, gaussian, lognormal, uniform };

// Additive observation noise, drawn independently per observed component.
struct NoiseModel {
  NoiseKind kind = NoiseKind::none;
  double sigma = 1.0;  // gaussian only

  double draw(Rng& rng) const;
  double variance() const;
  void validate() const;
};

struct EnvConfig {
  dynamics::LorenzParams params;
  dynamics::TimeGrid grid;
  ObservationOperator obs_op;
  NoiseModel noise;
  int n_cycles = 100;          // assimilation cycles per episode or run
  double spinup_time = 10.0;   // discarded before the experiment window
  double reward_floor = -100.0;
  // Fixed input scales; raw Lorenz derivatives are O(100) and would
  // saturate tanh layers.
  double pos_scale = 20.0;
  double deriv_scale = 200.0;
  double innov_scale = 5.0;

  int state_dim() const {
    return 6 * (grid.steps_per_obs + 1) + obs_op.obs_dim();
  }
  void validate() const;
};

// Reference trajectory plus the noisy observations drawn from it. The
// reference spans n_cycles + 1 observation intervals so the final cycle
// still has a next observation to score against; observations are indexed
// 0 .. n_cycles + 1 at every steps_per_obs model steps.
struct Twin {
  std::vector<dynamics::StatePair> reference;
  std::vector<Eigen::VectorXd> observations;

  const dynamics::StateVec& ref_at_obs(int k, int steps_per_obs) const {
    return reference[static_cast<std::size_t>(k) *
                     static_cast<std::size_t>(steps_per_obs)]
        .state;
  }
};

Twin generate_twin(const EnvConfig& cfg, std::uint64_t seed);

// -sqrt(mean of squared differences); both vectors live in observation space.
double negative_rmse(const Eigen::VectorXd& observation,
                     const Eigen::VectorXd& projected);

double rmse_full_state(const dynamics::StateVec& a, const dynamics::StateVec& b);

// Observed components from the observation, the rest from `fill`.
dynamics::StateVec lift_observation(const Eigen::VectorXd& observation,
                                    const ObservationOperator& op,
                                    const dynamics::StateVec& fill);

// Raw (unscaled) flat vector: (x, y, z, dx, dy, dz) for each forecast step
// in time order, then the innovation y - Hx at the forecast endpoint.
Eigen::VectorXd build_agent_state(const std::vector<dynamics::StatePair>& segment,
                                  const Eigen::VectorXd& observation,
                                  const ObservationOperator& op);

// Applies the config scales to a raw agent state (positions, derivatives,
// innovation block).
Eigen::VectorXd scale_agent_state(const Eigen::VectorXd& raw, const EnvConfig& cfg);

// One assimilation episode as seen by the policy-gradient trainer. Each
// reset generates a fresh twin from the episode seed unless a fixed twin
// was supplied. A step corrects the current forecast endpoint with the
// action, integrates to the next observation, and pays the negative RMSE
// between that observation and the projected new forecast.
class Environment final : public ppo::EnvInterface {
 public:
  explicit Environment(EnvConfig cfg);
  Environment(EnvConfig cfg, Twin fixed_twin);

  int state_dim() const override { return cfg_.state_dim(); }
  Eigen::VectorXd reset(std::uint64_t episode_seed) override;
  ppo::EnvStepOut step(const Eigen::Vector3d& action) override;

  const Twin& twin() const { return twin_; }
  const dynamics::StateVec& analysis() const { return analysis_; }
  const dynamics::StateVec& forecast_endpoint() const;
  const std::vector<dynamics::StatePair>& segment() const { return segment_; }
  int actions_taken() const { return actions_taken_; }

 private:
  Eigen::VectorXd observe_and_build(int obs_index);

  EnvConfig cfg_;
  Twin twin_;
  bool fixed_twin_ = false;
  std::vector<dynamics::StatePair> segment_;
  dynamics::StateVec analysis_;
  int obs_index_ = 0;  // observation at the current segment endpoint
  int actions_taken_ = 0;
  bool pending_divergence_ = false;
};

// Evaluation over a fixed twin. Deterministic mode runs the policy mean
// once; the Monte-Carlo mode evolves independent members, each sampling
// its own actions, and reports the member mean as the assimilated solution.
struct RlRunMode {
  bool stochastic = false;
  int n_members = 1;
};

struct MemberRun {
  std::vector<dynamics::StateVec> analyses;   // indexed by observation 0..n
  std::vector<dynamics::StateVec> forecasts;  // pre-correction endpoints, same index
  std::vector<double> rmse;                   // versus noise-free reference
  // Corrected state at every model step: forecast states between
  // observations, the post-correction analysis at observation nodes.
  std::vector<dynamics::StateVec> path;
  int n_reinits = 0;
};

struct RlRunResult {
  std::vector<double> times;
  std::vector<MemberRun> members;
  std::vector<dynamics::StateVec> mean_analysis;
  std::vector<double> mean_rmse;
  std::vector<dynamics::StateVec> mean_path;  // member mean at every model step
  std::vector<double> mean_path_rmse;
};

// A diverged member is restarted from the lifted current observation and
// counted; the run itself never aborts.
MemberRun run_rl_member(const ppo::GaussianPolicy& policy, const EnvConfig& cfg,
                        const Twin& twin, std::uint64_t member_seed,
                        bool stochastic);

RlRunResult run_rl_assimilation(const ppo::GaussianPolicy& policy,
                                const EnvConfig& cfg, const Twin& twin,
                                const RlRunMode& mode, std::uint64_t seed);

}  // namespace chaosda::envda
