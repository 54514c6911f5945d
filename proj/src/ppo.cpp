#include "chaosda/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>

namespace chaosda::ppo {
namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

// Shared by sampling and the surrogate so that re-evaluating a freshly
// collected action reproduces its stored log-probability except for
// forward-pass rounding.
double gaussian_log_prob(const Eigen::Vector3d& a, const Eigen::Vector3d& mu,
                         const Eigen::Vector3d& log_std) {
  const Eigen::Array3d z = (a - mu).array() * (-log_std.array()).exp();
  return -0.5 * z.square().sum() - log_std.sum() - 3.0 * kHalfLog2Pi;
}

void validate(const PpoHyperparams& hp) {
  if (!(hp.gamma >= 0.0 && hp.gamma <= 1.0))
    throw std::invalid_argument("ppo: gamma must lie in [0, 1]");
  if (!(hp.clip_epsilon > 0.0 && hp.clip_epsilon < 1.0))
    throw std::invalid_argument("ppo: clip_epsilon must lie in (0, 1)");
  if (!(hp.value_coef > 0.0))
    throw std::invalid_argument("ppo: value_coef must be positive");
  if (!(hp.max_grad_norm > 0.0))
    throw std::invalid_argument("ppo: max_grad_norm must be positive");
  if (!(hp.learning_rate > 0.0))
    throw std::invalid_argument("ppo: learning_rate must be positive");
  if (hp.n_assim_per_episode < 1)
    throw std::invalid_argument("ppo: n_assim_per_episode must be >= 1");
  if (hp.epochs_per_update < 1)
    throw std::invalid_argument("ppo: epochs_per_update must be >= 1");
  if (hp.minibatch_size < 1)
    throw std::invalid_argument("ppo: minibatch_size must be >= 1");
  if (hp.n_workers < 1)
    throw std::invalid_argument("ppo: n_workers must be >= 1");
  if (hp.total_episodes < 0)
    throw std::invalid_argument("ppo: total_episodes must be >= 0");
}

void scale_layers(neural::Gradients& g, double s) {
  for (auto& l : g.layers) {
    l.w *= s;
    l.b *= s;
  }
}

struct EpisodeData {
  std::vector<Transition> transitions;
  double total_reward = 0.0;
  bool terminated = false;
};

EpisodeData collect_episode(EnvInterface& env, const GaussianPolicy& policy,
                            const neural::MlpParams& critic,
                            std::uint64_t run_seed, std::int64_t episode_index) {
  const std::uint64_t a = static_cast<std::uint64_t>(episode_index);
  Rng action_rng(derive_seed(run_seed, "actions", a));
  Eigen::VectorXd s = env.reset(derive_seed(run_seed, "episode", a));

  EpisodeData out;
  for (;;) {
    const ActionSample as = sample_action(policy, s, action_rng);
    const EnvStepOut st = env.step(as.action);
    Transition t;
    t.s = std::move(s);
    t.a = as.action;
    t.r = st.reward;
    t.s_next = st.state;
    t.log_prob_old = as.log_prob;
    t.done = st.terminal;
    out.transitions.push_back(std::move(t));
    out.total_reward += st.reward;
    s = st.state;
    if (st.episode_over) {
      out.terminated = st.terminal;
      break;
    }
  }

  // One batched critic pass over the visited states instead of a forward
  // per step.
  const auto n = static_cast<Eigen::Index>(out.transitions.size());
  Eigen::MatrixXd states(out.transitions.front().s.size(), n);
  for (Eigen::Index i = 0; i < n; ++i) states.col(i) = out.transitions[i].s;
  const Eigen::MatrixXd values = neural::mlp_forward_batch(critic, states);
  for (Eigen::Index i = 0; i < n; ++i) out.transitions[i].value_old = values(0, i);
  return out;
}

void fisher_yates(std::vector<int>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.raw() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace

ActionSample sample_action(const GaussianPolicy& policy,
                           const Eigen::VectorXd& state, Rng& rng) {
  const Eigen::Vector3d mu = neural::mlp_forward(policy.mean_net, state);
  const Eigen::Array3d sigma = policy.log_std.array().exp();
  Eigen::Vector3d action;
  for (int i = 0; i < 3; ++i) action(i) = mu(i) + sigma(i) * rng.normal();
  return {action, gaussian_log_prob(action, mu, policy.log_std)};
}

double action_log_prob(const GaussianPolicy& policy, const Eigen::VectorXd& state,
                       const Eigen::Vector3d& action) {
  const Eigen::Vector3d mu = neural::mlp_forward(policy.mean_net, state);
  return gaussian_log_prob(action, mu, policy.log_std);
}

Eigen::Vector3d deterministic_action(const GaussianPolicy& policy,
                                     const Eigen::VectorXd& state) {
  return neural::mlp_forward(policy.mean_net, state);
}

std::vector<AdvantageRecord> compute_returns_and_advantages(
    const std::vector<Transition>& episode, const neural::MlpParams& critic,
    double gamma) {
  std::vector<AdvantageRecord> out(episode.size());
  if (episode.empty()) return out;

  const Transition& last = episode.back();
  double tail = last.done ? 0.0 : neural::mlp_forward(critic, last.s_next)(0);
  for (std::size_t i = episode.size(); i-- > 0;) {
    tail = episode[i].r + gamma * tail;
    out[i].v_target = tail;
    out[i].advantage = tail - episode[i].value_old;
  }
  return out;
}

PpoLossResult ppo_loss(const GaussianPolicy& policy,
                       const neural::MlpParams& critic,
                       const std::vector<Transition>& data,
                       const std::vector<AdvantageRecord>& recs,
                       const std::vector<int>& batch_index,
                       const PpoHyperparams& hp) {
  if (batch_index.empty()) throw std::invalid_argument("ppo_loss: empty batch");
  if (data.size() != recs.size())
    throw std::invalid_argument("ppo_loss: transition/advantage size mismatch");

  const auto B = static_cast<Eigen::Index>(batch_index.size());
  const Eigen::Index dim = policy.mean_net.input_dim();

  Eigen::MatrixXd X(dim, B);
  Eigen::MatrixXd A(3, B);
  Eigen::VectorXd lpo(B), vt(B), adv(B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto& t = data.at(static_cast<std::size_t>(batch_index[j]));
    X.col(j) = t.s;
    A.col(j) = t.a;
    lpo(j) = t.log_prob_old;
    const auto& rec = recs[static_cast<std::size_t>(batch_index[j])];
    vt(j) = rec.v_target;
    adv(j) = rec.advantage;
  }

  Eigen::VectorXd an = adv;
  if (B > 1) {
    const double mean = adv.mean();
    const double sd =
        std::sqrt((adv.array() - mean).square().sum() / static_cast<double>(B - 1));
    an = (adv.array() - mean) / (sd + 1e-8);
  }

  neural::ForwardTrace trace;
  const Eigen::MatrixXd mu = neural::mlp_forward_batch(policy.mean_net, X, &trace);

  const Eigen::Array3d inv_var = (-2.0 * policy.log_std.array()).exp();
  const double lo = 1.0 - hp.clip_epsilon;
  const double hi = 1.0 + hp.clip_epsilon;
  const double inv_b = 1.0 / static_cast<double>(B);

  Eigen::MatrixXd mu_grad = Eigen::MatrixXd::Zero(3, B);
  Eigen::Vector3d log_std_grad = Eigen::Vector3d::Zero();
  double surrogate_sum = 0.0;
  for (Eigen::Index j = 0; j < B; ++j) {
    const double logp = gaussian_log_prob(A.col(j), mu.col(j), policy.log_std);
    const double q = std::exp(logp - lpo(j));
    const double u = q * an(j);
    const double c = std::clamp(q, lo, hi) * an(j);
    surrogate_sum += std::min(u, c);
    if (u <= c) {
      // Gradient flows through the unclipped branch only.
      const double coef = -an(j) * q * inv_b;
      const Eigen::Array3d d = A.col(j).array() - mu.col(j).array();
      mu_grad.col(j) = coef * (d * inv_var).matrix();
      log_std_grad += coef * (d.square() * inv_var - 1.0).matrix();
    }
  }

  PpoLossResult res;
  res.actor_loss = -surrogate_sum * inv_b;
  res.log_std_grad = log_std_grad;
  res.policy_grads = neural::mlp_backward_batch(policy.mean_net, trace, mu_grad);

  neural::ForwardTrace critic_trace;
  const Eigen::MatrixXd v = neural::mlp_forward_batch(critic, X, &critic_trace);
  const Eigen::ArrayXd residual = v.row(0).transpose().array() - vt.array();
  res.critic_loss = residual.square().mean();
  const Eigen::MatrixXd v_grad =
      (hp.value_coef * 2.0 * inv_b * residual).matrix().transpose();
  res.critic_grads = neural::mlp_backward_batch(critic, critic_trace, v_grad);

  res.total_loss = res.actor_loss + hp.value_coef * res.critic_loss;
  return res;
}

PpoLossResult ppo_loss(const GaussianPolicy& policy,
                       const neural::MlpParams& critic,
                       const std::vector<Transition>& batch,
                       const std::vector<AdvantageRecord>& recs,
                       const PpoHyperparams& hp) {
  std::vector<int> idx(batch.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  return ppo_loss(policy, critic, batch, recs, idx, hp);
}

TrainResult train(const EnvFactory& factory, const PpoHyperparams& hp,
                  std::uint64_t seed, const TrainOptions& opts) {
  validate(hp);
  if (!factory) throw std::invalid_argument("ppo: null environment factory");

  std::vector<std::unique_ptr<EnvInterface>> envs;
  envs.reserve(static_cast<std::size_t>(hp.n_workers));
  for (int w = 0; w < hp.n_workers; ++w) {
    envs.push_back(factory(w));
    if (!envs.back()) throw std::invalid_argument("ppo: factory returned null env");
  }
  const int dim = envs.front()->state_dim();

  TrainResult result;
  if (opts.initial_policy) {
    result.policy = *opts.initial_policy;
    if (result.policy.mean_net.input_dim() != dim)
      throw std::invalid_argument("ppo: resumed policy input dim mismatch");
  } else {
    result.policy.mean_net =
        neural::mlp_init({dim, 128, 128, 3}, derive_seed(seed, "actor"));
    result.policy.log_std.setZero();
  }
  if (opts.initial_critic) {
    result.critic = *opts.initial_critic;
    if (result.critic.input_dim() != dim)
      throw std::invalid_argument("ppo: resumed critic input dim mismatch");
  } else {
    result.critic = neural::mlp_init({dim, 128, 128, 1}, derive_seed(seed, "critic"));
  }

  neural::AdamState policy_opt = neural::adam_init(result.policy.mean_net, hp.learning_rate);
  neural::AdamState critic_opt = neural::adam_init(result.critic, hp.learning_rate);
  neural::AdamVecState log_std_opt = neural::adam_vec_init(3, hp.learning_rate);

  const int n_updates =
      (hp.total_episodes + hp.n_workers - 1) / std::max(hp.n_workers, 1);
  std::int64_t episodes_left = hp.total_episodes;

  for (int u = 0; u < n_updates; ++u) {
    const int update_index = opts.start_update + u;
    const int count =
        static_cast<int>(std::min<std::int64_t>(hp.n_workers, episodes_left));

    std::vector<EpisodeData> episodes(static_cast<std::size_t>(count));
    const int n_threads = std::clamp(opts.threads, 1, count);
    if (n_threads == 1) {
      for (int w = 0; w < count; ++w) {
        episodes[static_cast<std::size_t>(w)] = collect_episode(
            *envs[static_cast<std::size_t>(w)], result.policy, result.critic, seed,
            static_cast<std::int64_t>(update_index) * hp.n_workers + w);
      }
    } else {
      // Each worker slot owns its env and output slot; results are merged in
      // slot order below, so the thread count cannot influence the numbers.
      std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
      std::vector<std::thread> pool;
      pool.reserve(static_cast<std::size_t>(n_threads));
      for (int t = 0; t < n_threads; ++t) {
        pool.emplace_back([&, t] {
          try {
            for (int w = t; w < count; w += n_threads) {
              episodes[static_cast<std::size_t>(w)] = collect_episode(
                  *envs[static_cast<std::size_t>(w)], result.policy, result.critic,
                  seed, static_cast<std::int64_t>(update_index) * hp.n_workers + w);
            }
          } catch (...) {
            errors[static_cast<std::size_t>(t)] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    }

    episodes_left -= count;
    result.episodes_run += count;

    std::vector<Transition> flat;
    std::vector<AdvantageRecord> recs;
    double reward_sum = 0.0;
    for (auto& ep : episodes) {
      if (ep.terminated) ++result.divergences;
      reward_sum += ep.total_reward;
      auto ra = compute_returns_and_advantages(ep.transitions, result.critic, hp.gamma);
      recs.insert(recs.end(), ra.begin(), ra.end());
      flat.insert(flat.end(), std::make_move_iterator(ep.transitions.begin()),
                  std::make_move_iterator(ep.transitions.end()));
    }

    const int n = static_cast<int>(flat.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    double actor_sum = 0.0;
    double critic_sum = 0.0;
    double norm_sum = 0.0;
    int batches = 0;
    for (int epoch = 0; epoch < hp.epochs_per_update; ++epoch) {
      Rng shuffle_rng(derive_seed(seed, "shuffle",
                                  static_cast<std::uint64_t>(update_index),
                                  static_cast<std::uint64_t>(epoch)));
      fisher_yates(order, shuffle_rng);

      for (int start = 0; start < n; start += hp.minibatch_size) {
        const int stop = std::min(start + hp.minibatch_size, n);
        const std::vector<int> batch(order.begin() + start, order.begin() + stop);
        PpoLossResult loss = ppo_loss(result.policy, result.critic, flat, recs, batch, hp);

        const double pn = neural::global_norm(loss.policy_grads);
        const double cn = neural::global_norm(loss.critic_grads);
        const double joint = std::sqrt(pn * pn + cn * cn +
                                       loss.log_std_grad.squaredNorm());
        if (joint > hp.max_grad_norm * (1.0 + 1e-9)) {
          const double s = hp.max_grad_norm / joint;
          scale_layers(loss.policy_grads, s);
          scale_layers(loss.critic_grads, s);
          loss.log_std_grad *= s;
        }

        neural::adam_step_inplace(result.policy.mean_net, loss.policy_grads, policy_opt);
        neural::adam_step_inplace(result.critic, loss.critic_grads, critic_opt);
        Eigen::VectorXd ls = result.policy.log_std;
        neural::adam_vec_step_inplace(ls, loss.log_std_grad, log_std_opt);
        result.policy.log_std =
            ls.array().max(kLogStdMin).min(kLogStdMax).matrix();

        actor_sum += loss.actor_loss;
        critic_sum += loss.critic_loss;
        norm_sum += joint;
        ++batches;
      }
    }

    TrainLogRow row;
    row.update_index = update_index;
    row.mean_episode_reward = reward_sum / static_cast<double>(count);
    row.actor_loss = batches > 0 ? actor_sum / batches : 0.0;
    row.critic_loss = batches > 0 ? critic_sum / batches : 0.0;
    row.grad_norm_pre_clip = batches > 0 ? norm_sum / batches : 0.0;
    row.log_std_mean = result.policy.log_std.mean();
    result.log.push_back(row);
    if (opts.on_update) opts.on_update(row);
  }

  return result;
}

}  // namespace chaosda::ppo
