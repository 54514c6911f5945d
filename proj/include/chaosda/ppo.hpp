#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "chaosda/neural.hpp"
#include "chaosda/rng.hpp"

namespace chaosda::ppo {

// Diagonal Gaussian policy: MLP mean plus a state-independent learnable
// log-std. Actions are always 3-dimensional (full state-space corrections).
struct GaussianPolicy {
  neural::MlpParams mean_net;
  Eigen::Vector3d log_std = Eigen::Vector3d::Zero();
};

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

struct Transition {
  Eigen::VectorXd s;
  Eigen::Vector3d a = Eigen::Vector3d::Zero();
  double r = 0.0;
  Eigen::VectorXd s_next;
  double log_prob_old = 0.0;
  double value_old = 0.0;
  // True only for terminal failures (divergence). Episodes that merely
  // exhaust their cycle budget are truncations and keep the value bootstrap.
  bool done = false;
};

struct PpoHyperparams {
  double gamma = 0.99;
  double clip_epsilon = 0.2;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  int n_assim_per_episode = 100;
  double learning_rate = 1e-3;
  int epochs_per_update = 10;
  int minibatch_size = 64;
  int n_workers = 8;  // environment instances; a semantic knob, not threads
  int total_episodes = 2000;
};

struct AdvantageRecord {
  double v_target = 0.0;
  double advantage = 0.0;
};

struct ActionSample {
  Eigen::Vector3d action;
  double log_prob = 0.0;
};

ActionSample sample_action(const GaussianPolicy& policy,
                           const Eigen::VectorXd& state, Rng& rng);

double action_log_prob(const GaussianPolicy& policy, const Eigen::VectorXd& state,
                       const Eigen::Vector3d& action);

Eigen::Vector3d deterministic_action(const GaussianPolicy& policy,
                                     const Eigen::VectorXd& state);

// n-step targets over one contiguous episode segment:
//   v_target(t) = sum_i gamma^i r_{t+i} + gamma^{T-t} V(s_T),
// with the bootstrap dropped when the final transition is terminal.
// advantage(t) = v_target(t) - value_old(t).
std::vector<AdvantageRecord> compute_returns_and_advantages(
    const std::vector<Transition>& episode, const neural::MlpParams& critic,
    double gamma);

// All gradients are with respect to total_loss = actor_loss +
// value_coef * critic_loss (the critic block already carries value_coef).
struct PpoLossResult {
  double total_loss = 0.0;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  neural::Gradients policy_grads;
  Eigen::Vector3d log_std_grad = Eigen::Vector3d::Zero();
  neural::Gradients critic_grads;
};

// Advantages are normalized (zero mean, unit variance) over the given batch
// before entering the clipped surrogate; batches of one are left raw.
PpoLossResult ppo_loss(const GaussianPolicy& policy,
                       const neural::MlpParams& critic,
                       const std::vector<Transition>& data,
                       const std::vector<AdvantageRecord>& recs,
                       const std::vector<int>& batch_index,
                       const PpoHyperparams& hp);

PpoLossResult ppo_loss(const GaussianPolicy& policy,
                       const neural::MlpParams& critic,
                       const std::vector<Transition>& batch,
                       const std::vector<AdvantageRecord>& recs,
                       const PpoHyperparams& hp);

// Minimal environment surface the trainer drives. Implementations must be
// deterministic per reset seed.
struct EnvStepOut {
  Eigen::VectorXd state;
  double reward = 0.0;
  bool episode_over = false;
  bool terminal = false;  // divergence; drops the value bootstrap
};

class EnvInterface {
 public:
  virtual ~EnvInterface() = default;
  virtual int state_dim() const = 0;
  virtual Eigen::VectorXd reset(std::uint64_t episode_seed) = 0;
  virtual EnvStepOut step(const Eigen::Vector3d& action) = 0;
};

using EnvFactory = std::function<std::unique_ptr<EnvInterface>(int worker_index)>;

struct TrainLogRow {
  int update_index = 0;
  double mean_episode_reward = 0.0;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double grad_norm_pre_clip = 0.0;
  double log_std_mean = 0.0;
};

struct TrainResult {
  GaussianPolicy policy;
  neural::MlpParams critic;
  std::vector<TrainLogRow> log;
  std::int64_t episodes_run = 0;
  std::int64_t divergences = 0;
};

struct TrainOptions {
  int threads = 1;       // execution parallelism only; never changes results
  int start_update = 0;  // resume: first update index to emit
  std::optional<GaussianPolicy> initial_policy;
  std::optional<neural::MlpParams> initial_critic;
  std::function<void(const TrainLogRow&)> on_update;
};

// Runs total_episodes episodes across hp.n_workers environment instances,
// one episode per worker per update. Fully determined by (seed, hp).
TrainResult train(const EnvFactory& factory, const PpoHyperparams& hp,
                  std::uint64_t seed, const TrainOptions& opts = {});

}  // namespace chaosda::ppo
