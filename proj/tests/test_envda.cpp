#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "chaosda/dynamics.hpp"
#include "chaosda/envda.hpp"
#include "chaosda/neural.hpp"
#include "chaosda/ppo.hpp"
#include "chaosda/rng.hpp"
#include "doctest.h"

using chaosda::Rng;
using chaosda::derive_seed;
namespace dyn = chaosda::dynamics;
namespace envda = chaosda::envda;
namespace neural = chaosda::neural;
namespace ppo = chaosda::ppo;

namespace {

envda::EnvConfig small_config(int steps_per_obs = 5, int n_cycles = 4) {
  envda::EnvConfig cfg;
  cfg.grid.steps_per_obs = steps_per_obs;
  cfg.n_cycles = n_cycles;
  return cfg;
}

ppo::GaussianPolicy tiny_policy(int state_dim, std::uint64_t seed) {
  ppo::GaussianPolicy p;
  p.mean_net = neural::mlp_init({state_dim, 8, 3}, seed);
  return p;
}

}  // namespace

TEST_CASE("observation operator projects the masked components in order") {
  envda::ObservationOperator full;
  CHECK(full.obs_dim() == 3);
  const dyn::StateVec s{1.5, -2.5, 30.0};
  const Eigen::VectorXd y = full.project(s);
  CHECK(y(0) == 1.5);
  CHECK(y(1) == -2.5);
  CHECK(y(2) == 30.0);

  envda::ObservationOperator xz{{true, false, true}};
  CHECK(xz.obs_dim() == 2);
  CHECK(xz.observed_indices() == std::vector<int>{0, 2});
  const Eigen::VectorXd p = xz.project(s);
  CHECK(p(0) == 1.5);
  CHECK(p(1) == 30.0);

  envda::ObservationOperator none{{false, false, false}};
  CHECK_THROWS_AS(none.validate(), std::invalid_argument);
}

TEST_CASE("noise models have the documented moments") {
  Rng rng(404);

  envda::NoiseModel quiet;
  CHECK(quiet.draw(rng) == 0.0);
  CHECK(quiet.variance() == 0.0);

  envda::NoiseModel gauss{envda::NoiseKind::gaussian, 2.0};
  CHECK(gauss.variance() == 4.0);
  gauss.sigma = 0.0;
  CHECK_THROWS_AS(gauss.validate(), std::invalid_argument);

  envda::NoiseModel logn{envda::NoiseKind::lognormal};
  const double e = std::exp(1.0);
  CHECK(logn.variance() == doctest::Approx((e - 1.0) * e).epsilon(1e-12));
  std::vector<double> draws(20001);
  for (auto& d : draws) {
    d = logn.draw(rng);
    CHECK(d > 0.0);
  }
  std::nth_element(draws.begin(), draws.begin() + 10000, draws.end());
  CHECK(draws[10000] == doctest::Approx(1.0).epsilon(0.05));

  envda::NoiseModel uni{envda::NoiseKind::uniform};
  CHECK(uni.variance() == doctest::Approx(1.0 / 12.0).epsilon(1e-12));
  double sum = 0.0, sum_sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double d = uni.draw(rng);
    CHECK(d >= 0.0);
    CHECK(d < 1.0);
    sum += d;
    sum_sq += d * d;
  }
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));
  CHECK(sum_sq / n - (sum / n) * (sum / n) ==
        doctest::Approx(1.0 / 12.0).epsilon(0.05));
}

TEST_CASE("twin generation emits exact observations when noise is off") {
  const envda::EnvConfig cfg = small_config(5, 10);
  const envda::Twin twin = envda::generate_twin(cfg, 7);

  REQUIRE(twin.observations.size() == 12);
  REQUIRE(twin.reference.size() == 11u * 5u + 1u);
  for (int k = 0; k < 12; ++k) {
    const Eigen::VectorXd expect =
        cfg.obs_op.project(twin.ref_at_obs(k, cfg.grid.steps_per_obs));
    CHECK(twin.observations[static_cast<std::size_t>(k)] == expect);
  }

  const envda::Twin again = envda::generate_twin(cfg, 7);
  CHECK(again.reference.size() == twin.reference.size());
  for (std::size_t i = 0; i < twin.reference.size(); ++i) {
    CHECK(again.reference[i].state.x == twin.reference[i].state.x);
    CHECK(again.reference[i].state.z == twin.reference[i].state.z);
  }

  const envda::Twin other = envda::generate_twin(cfg, 8);
  CHECK(other.reference.front().state.x != twin.reference.front().state.x);
}

TEST_CASE("gaussian observation noise has the right sample moments") {
  envda::EnvConfig cfg = small_config(5, 9998);  // 10^4 observations
  cfg.noise = {envda::NoiseKind::gaussian, 1.0};
  const envda::Twin twin = envda::generate_twin(cfg, 99);

  const auto n = twin.observations.size();
  REQUIRE(n == 10000);
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double v = twin.observations[k](c) -
                       twin.ref_at_obs(static_cast<int>(k), 5)[c];
      sum += v;
      sum_sq += v * v;
    }
    const double mean = sum / static_cast<double>(n);
    const double sd = std::sqrt(sum_sq / static_cast<double>(n) - mean * mean);
    CHECK(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
    CHECK(sd == doctest::Approx(1.0).epsilon(0.05));
  }
}

TEST_CASE("lognormal observation noise is positive with unit median") {
  envda::EnvConfig cfg = small_config(5, 1998);
  cfg.noise = {envda::NoiseKind::lognormal};
  const envda::Twin twin = envda::generate_twin(cfg, 300);

  std::vector<double> draws;
  for (std::size_t k = 0; k < twin.observations.size(); ++k)
    for (int c = 0; c < 3; ++c) {
      const double v = twin.observations[k](c) -
                       twin.ref_at_obs(static_cast<int>(k), 5)[c];
      CHECK(v > 0.0);
      draws.push_back(v);
    }
  std::nth_element(draws.begin(), draws.begin() + draws.size() / 2, draws.end());
  CHECK(draws[draws.size() / 2] == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("agent state layout, dimensions, and innovation block") {
  std::vector<dyn::StatePair> segment(51);
  Rng r(5);
  for (auto& p : segment)
    for (int c = 0; c < 3; ++c) {
      p.state[c] = r.uniform(-10.0, 10.0);
      p.deriv[c] = r.uniform(-100.0, 100.0);
    }

  envda::ObservationOperator full;
  Eigen::VectorXd obs = full.project(segment.back().state);
  const Eigen::VectorXd s = envda::build_agent_state(segment, obs, full);
  REQUIRE(s.size() == 309);

  CHECK(s(0) == segment[0].state.x);
  CHECK(s(1) == segment[0].state.y);
  CHECK(s(2) == segment[0].state.z);
  CHECK(s(3) == segment[0].deriv.x);
  CHECK(s(5) == segment[0].deriv.z);
  CHECK(s(6 * 17 + 2) == segment[17].state.z);
  CHECK(s(6 * 50 + 4) == segment[50].deriv.y);
  // Exact tracking: innovation entries vanish.
  CHECK(s(306) == 0.0);
  CHECK(s(307) == 0.0);
  CHECK(s(308) == 0.0);

  envda::ObservationOperator x_only{{true, false, false}};
  Eigen::VectorXd ox(1);
  ox << segment.back().state.x + 2.5;
  const Eigen::VectorXd sx = envda::build_agent_state(segment, ox, x_only);
  REQUIRE(sx.size() == 307);
  CHECK(sx(306) == doctest::Approx(2.5).epsilon(1e-15));

  CHECK_THROWS_AS(envda::build_agent_state({}, obs, full), std::invalid_argument);
  CHECK_THROWS_AS(envda::build_agent_state(segment, ox, full), std::invalid_argument);
}

TEST_CASE("state scaling divides each block by its fixed constant") {
  envda::EnvConfig cfg = small_config(1, 1);  // 2 points per segment
  std::vector<dyn::StatePair> segment(2);
  segment[0].state = {20.0, -40.0, 10.0};
  segment[0].deriv = {200.0, -400.0, 100.0};
  segment[1].state = {2.0, 4.0, 6.0};
  segment[1].deriv = {20.0, 40.0, 60.0};
  Eigen::VectorXd obs = cfg.obs_op.project(segment[1].state);
  obs.array() += 5.0;

  const Eigen::VectorXd raw = envda::build_agent_state(segment, obs, cfg.obs_op);
  const Eigen::VectorXd scaled = envda::scale_agent_state(raw, cfg);
  REQUIRE(scaled.size() == 15);
  CHECK(scaled(0) == 1.0);    // 20 / 20
  CHECK(scaled(1) == -2.0);   // -40 / 20
  CHECK(scaled(3) == 1.0);    // 200 / 200
  CHECK(scaled(4) == -2.0);   // -400 / 200
  CHECK(scaled(6) == 0.1);    // 2 / 20
  CHECK(scaled(9) == 0.1);    // 20 / 200
  CHECK(scaled(12) == 1.0);   // innovation 5 / 5
  CHECK(scaled(13) == 1.0);
  CHECK(scaled(14) == 1.0);

  CHECK_THROWS_AS(envda::scale_agent_state(raw.head(10), cfg),
                  std::invalid_argument);
}

TEST_CASE("lifting an observation keeps unobserved fill values") {
  envda::ObservationOperator x_only{{true, false, false}};
  Eigen::VectorXd obs(1);
  obs << -4.5;
  const dyn::StateVec fill{9.0, 8.0, 7.0};
  const dyn::StateVec lifted = envda::lift_observation(obs, x_only, fill);
  CHECK(lifted.x == -4.5);
  CHECK(lifted.y == 8.0);
  CHECK(lifted.z == 7.0);

  CHECK_THROWS_AS(envda::lift_observation(obs, envda::ObservationOperator{}, fill),
                  std::invalid_argument);
}

TEST_CASE("reward is the negative observation space rmse") {
  Eigen::VectorXd y(3), f(3);
  y << 3.0, 1.0, -2.0;
  f << 0.0, 1.0, -2.0;
  CHECK(envda::negative_rmse(y, f) == doctest::Approx(-std::sqrt(3.0)).epsilon(1e-15));
  CHECK(envda::negative_rmse(y, y) == 0.0);

  // Purely observation space: unobserved components cannot matter.
  envda::ObservationOperator x_only{{true, false, false}};
  const dyn::StateVec f1{2.0, 100.0, -300.0};
  const dyn::StateVec f2{2.0, -7.0, 55.0};
  Eigen::VectorXd ox(1);
  ox << 3.5;
  CHECK(envda::negative_rmse(ox, x_only.project(f1)) ==
        envda::negative_rmse(ox, x_only.project(f2)));

  Eigen::VectorXd bad(2);
  CHECK_THROWS_AS(envda::negative_rmse(y, bad), std::invalid_argument);
}

TEST_CASE("environment tracks the reference exactly under innovation actions") {
  const envda::EnvConfig cfg = small_config(5, 6);
  envda::Environment env(cfg);

  Eigen::VectorXd s = env.reset(31);
  REQUIRE(s.size() == cfg.state_dim());
  CHECK(s.allFinite());

  // Scaling cross-check against the raw builder.
  const Eigen::VectorXd raw = envda::build_agent_state(
      env.segment(), env.twin().observations[1], cfg.obs_op);
  CHECK(s == envda::scale_agent_state(raw, cfg));

  for (int k = 1; k <= cfg.n_cycles; ++k) {
    const Eigen::VectorXd& y = env.twin().observations[static_cast<std::size_t>(k)];
    const Eigen::VectorXd innov = y - cfg.obs_op.project(env.forecast_endpoint());
    const dyn::StateVec before = env.forecast_endpoint();
    const Eigen::Vector3d action(innov(0), innov(1), innov(2));

    const ppo::EnvStepOut out = env.step(action);

    // Additive update identity, component-wise exact.
    CHECK(env.analysis().x == before.x + action(0));
    CHECK(env.analysis().y == before.y + action(1));
    CHECK(env.analysis().z == before.z + action(2));
    // Perfect correction on a noise-free twin reproduces the reference.
    const dyn::StateVec& ref = env.twin().ref_at_obs(k, cfg.grid.steps_per_obs);
    CHECK(env.analysis().x == ref.x);
    CHECK(env.analysis().y == ref.y);
    CHECK(env.analysis().z == ref.z);
    CHECK(out.reward == 0.0);
    CHECK_FALSE(out.terminal);
    CHECK(out.episode_over == (k == cfg.n_cycles));
    CHECK(out.state.allFinite());
  }
}

TEST_CASE("rewards stay nonpositive under noisy observations") {
  envda::EnvConfig cfg = small_config(5, 5);
  cfg.noise = {envda::NoiseKind::gaussian, 1.0};
  envda::Environment env(cfg);
  env.reset(77);
  Rng r(1);
  for (int k = 0; k < cfg.n_cycles; ++k) {
    Eigen::Vector3d a;
    for (int i = 0; i < 3; ++i) a(i) = r.uniform(-1.0, 1.0);
    const ppo::EnvStepOut out = env.step(a);
    CHECK(out.reward <= 0.0);
    CHECK(out.reward >= cfg.reward_floor);
  }
}

TEST_CASE("a blown up forecast ends the episode at the reward floor") {
  const envda::EnvConfig cfg = small_config(5, 5);
  envda::Environment env(cfg);
  env.reset(3);
  const ppo::EnvStepOut out = env.step(Eigen::Vector3d(2e6, 0.0, 0.0));
  CHECK(out.terminal);
  CHECK(out.episode_over);
  CHECK(out.reward == cfg.reward_floor);
  CHECK(out.state.allFinite());

  envda::Environment fresh(cfg);
  CHECK_THROWS_AS(fresh.step(Eigen::Vector3d::Zero()), std::logic_error);
}

TEST_CASE("partial observation lifts unobserved components from climatology") {
  envda::EnvConfig cfg = small_config(5, 3);
  cfg.obs_op.mask = {true, false, false};
  envda::Environment env(cfg);
  env.reset(12);

  CHECK(env.state_dim() == 6 * 6 + 1);
  const dyn::StateVec clim =
      dyn::climatological_mean(cfg.params, cfg.grid.dt);
  // Noise-free: the observed component equals the reference.
  CHECK(env.twin().observations[0](0) ==
        env.twin().ref_at_obs(0, cfg.grid.steps_per_obs).x);
  const dyn::StateVec& ref0 = env.twin().ref_at_obs(0, cfg.grid.steps_per_obs);
  envda::Environment probe(cfg);
  probe.reset(12);
  CHECK(probe.analysis().x == ref0.x);
  CHECK(probe.analysis().y == clim.y);
  CHECK(probe.analysis().z == clim.z);
}

TEST_CASE("the trainer runs end to end against the real environment") {
  envda::EnvConfig cfg = small_config(5, 3);
  cfg.noise = {envda::NoiseKind::gaussian, 1.0};

  ppo::PpoHyperparams hp;
  hp.n_assim_per_episode = cfg.n_cycles;
  hp.epochs_per_update = 1;
  hp.minibatch_size = 8;
  hp.n_workers = 2;
  hp.total_episodes = 4;

  const ppo::EnvFactory factory = [cfg](int) {
    return std::make_unique<envda::Environment>(cfg);
  };
  const auto res = ppo::train(factory, hp, 5150);
  REQUIRE(res.log.size() == 2);
  CHECK(res.episodes_run == 4);
  for (const auto& row : res.log) {
    CHECK(std::isfinite(row.mean_episode_reward));
    CHECK(row.mean_episode_reward <= 0.0);
  }
}

TEST_CASE("evaluation modes agree when the sampling noise vanishes") {
  const envda::EnvConfig cfg = small_config(5, 2);
  const envda::Twin twin = envda::generate_twin(cfg, 44);
  ppo::GaussianPolicy policy = tiny_policy(cfg.state_dim(), 10);
  policy.log_std = Eigen::Vector3d::Constant(-5.0);

  const auto det = envda::run_rl_assimilation(policy, cfg, twin, {false, 1}, 4);
  const auto mc1 = envda::run_rl_assimilation(policy, cfg, twin, {true, 1}, 4);
  REQUIRE(det.members.size() == 1);
  REQUIRE(mc1.members.size() == 1);
  REQUIRE(det.times.size() == 3);
  for (std::size_t k = 0; k < det.times.size(); ++k)
    for (int c = 0; c < 3; ++c)
      CHECK(std::abs(det.members[0].analyses[k][c] -
                     mc1.members[0].analyses[k][c]) < 1e-2);
}

TEST_CASE("a passive member's path reproduces the reference exactly") {
  // Noise-free full observation and a zero policy: the initial lift lands on
  // the reference and zero corrections keep the forecast on it, so every
  // model step must match the reference integration bitwise.
  const envda::EnvConfig cfg = small_config(5, 6);
  ppo::GaussianPolicy idle = tiny_policy(cfg.state_dim(), 9);
  for (auto& l : idle.mean_net.layers) {
    l.w.setZero();
    l.b.setZero();
  }
  const envda::Twin twin = envda::generate_twin(cfg, 13);
  const auto run = envda::run_rl_member(idle, cfg, twin, 5, false);

  REQUIRE(run.path.size() ==
          static_cast<std::size_t>(cfg.n_cycles * cfg.grid.steps_per_obs) + 1);
  REQUIRE(run.forecasts.size() == run.analyses.size());
  for (std::size_t j = 0; j < run.path.size(); ++j)
    for (int c = 0; c < 3; ++c)
      CHECK(run.path[j][c] == twin.reference[j].state[c]);
  for (std::size_t k = 0; k < run.analyses.size(); ++k)
    for (int c = 0; c < 3; ++c)
      CHECK(run.forecasts[k][c] == run.analyses[k][c]);
  for (const double r : run.rmse) CHECK(r == 0.0);
}

TEST_CASE("monte carlo evaluation is deterministic and seed factored") {
  const envda::EnvConfig cfg = small_config(5, 4);
  const envda::Twin twin = envda::generate_twin(cfg, 21);
  const ppo::GaussianPolicy policy = tiny_policy(cfg.state_dim(), 10);

  const auto a = envda::run_rl_assimilation(policy, cfg, twin, {true, 3}, 99);
  const auto b = envda::run_rl_assimilation(policy, cfg, twin, {true, 3}, 99);
  REQUIRE(a.members.size() == 3);
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t k = 0; k < a.times.size(); ++k)
      for (int c = 0; c < 3; ++c)
        CHECK(a.members[m].analyses[k][c] == b.members[m].analyses[k][c]);

  // Each member is a pure function of its member seed.
  for (std::size_t m = 0; m < 3; ++m) {
    const auto solo = envda::run_rl_member(
        policy, cfg, twin, derive_seed(99, "member", m), true);
    for (std::size_t k = 0; k < a.times.size(); ++k)
      for (int c = 0; c < 3; ++c)
        CHECK(solo.analyses[k][c] == a.members[m].analyses[k][c]);
  }

  // Member mean is the arithmetic average.
  for (int c = 0; c < 3; ++c) {
    const double mean = (a.members[0].analyses[2][c] + a.members[1].analyses[2][c] +
                         a.members[2].analyses[2][c]) /
                        3.0;
    CHECK(a.mean_analysis[2][c] == doctest::Approx(mean).epsilon(1e-15));
  }

  // The per-step mean path averages the member paths the same way.
  REQUIRE(a.mean_path.size() ==
          static_cast<std::size_t>(cfg.n_cycles * cfg.grid.steps_per_obs) + 1);
  REQUIRE(a.mean_path_rmse.size() == a.mean_path.size());
  const std::size_t probe = a.mean_path.size() / 2;
  for (int c = 0; c < 3; ++c) {
    const double mean = (a.members[0].path[probe][c] + a.members[1].path[probe][c] +
                         a.members[2].path[probe][c]) /
                        3.0;
    CHECK(a.mean_path[probe][c] == doctest::Approx(mean).epsilon(1e-15));
  }

  CHECK_THROWS_AS(envda::run_rl_assimilation(policy, cfg, twin, {true, 0}, 1),
                  std::invalid_argument);
  const ppo::GaussianPolicy wrong = tiny_policy(cfg.state_dim() + 1, 2);
  CHECK_THROWS_AS(envda::run_rl_assimilation(wrong, cfg, twin, {false, 1}, 1),
                  std::invalid_argument);
}

TEST_CASE("diverging members restart from the lifted observation") {
  const envda::EnvConfig cfg = small_config(5, 4);
  const envda::Twin twin = envda::generate_twin(cfg, 60);

  ppo::GaussianPolicy runaway = tiny_policy(cfg.state_dim(), 3);
  for (auto& l : runaway.mean_net.layers) l.w.setZero();
  runaway.mean_net.layers.back().b << 5e6, 0.0, 0.0;

  const auto run = envda::run_rl_member(runaway, cfg, twin, 1, false);
  CHECK(run.n_reinits == cfg.n_cycles);
  // Noise-free full observation: every restart lands on the reference.
  for (std::size_t k = 1; k < run.analyses.size(); ++k)
    CHECK(run.rmse[k] == 0.0);
  // The per-step path stays defined and finite through every blow-up.
  REQUIRE(run.path.size() ==
          static_cast<std::size_t>(cfg.n_cycles * cfg.grid.steps_per_obs) + 1);
  for (const auto& s : run.path)
    for (int c = 0; c < 3; ++c) CHECK(std::isfinite(s[c]));
}
