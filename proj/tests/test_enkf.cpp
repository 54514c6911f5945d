#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "chaosda/dynamics.hpp"
#include "chaosda/enkf.hpp"
#include "chaosda/envda.hpp"
#include "chaosda/rng.hpp"
#include "doctest.h"

using chaosda::Rng;
using chaosda::derive_seed;
namespace dyn = chaosda::dynamics;
namespace envda = chaosda::envda;
namespace enkf = chaosda::enkf;

namespace {

enkf::Ensemble random_ensemble(int n, std::uint64_t seed, double scale = 5.0) {
  Rng r(seed);
  enkf::Ensemble e;
  e.members.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    dyn::StateVec m;
    for (int c = 0; c < 3; ++c) m[c] = r.uniform(-scale, scale);
    e.members.push_back(m);
  }
  return e;
}

Eigen::Vector3d to_vec(const dyn::StateVec& s) { return {s.x, s.y, s.z}; }

// Exact 3D linear-Gaussian test system for the sampled-filter oracle runs.
struct LinearSystem {
  Eigen::Matrix3d a;
  Eigen::Matrix3d q = 0.05 * Eigen::Matrix3d::Identity();
  Eigen::Matrix3d r = 0.4 * Eigen::Matrix3d::Identity();
  Eigen::Matrix3d p0 = 0.6 * Eigen::Matrix3d::Identity();
  Eigen::Vector3d m0{1.0, -0.5, 2.0};
  Eigen::Vector3d y{1.2, -0.3, 2.2};

  LinearSystem() {
    a << 0.95, 0.08, 0.0,
        -0.08, 0.95, 0.04,
         0.02, -0.03, 0.9;
  }
};

// Samples, propagates, and assimilates one cycle of the linear system with
// n members; returns the analysis ensemble.
enkf::Ensemble linear_cycle(const LinearSystem& sys, int n, std::uint64_t seed) {
  Rng rng(seed);
  const double p_std = std::sqrt(0.6);
  const double q_std = std::sqrt(0.05);
  enkf::Ensemble e;
  e.members.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d m = sys.m0;
    for (int c = 0; c < 3; ++c) m(c) += p_std * rng.normal();
    m = sys.a * m;
    for (int c = 0; c < 3; ++c) m(c) += q_std * rng.normal();
    e.members.push_back({m(0), m(1), m(2)});
  }
  return enkf::enkf_analysis(e, sys.y, envda::ObservationOperator{}, 0.4, rng);
}

}  // namespace

TEST_CASE("ensemble and config validation") {
  enkf::Ensemble one;
  one.members.push_back({1, 2, 3});
  CHECK_THROWS_AS(one.validate(), std::invalid_argument);
  one.members.push_back({1, 2, std::nan("")});
  CHECK_THROWS_AS(one.validate(), std::invalid_argument);

  enkf::EnkfConfig cfg;
  cfg.n_ens = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.n_ens = 10;
  cfg.r_variance = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.r_variance = 1.0;
  cfg.initial_spread = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("assumed observation variance follows the noise model") {
  const double e = std::exp(1.0);
  CHECK(enkf::matched_r_variance({envda::NoiseKind::gaussian, 2.0}) == 4.0);
  CHECK(enkf::matched_r_variance({envda::NoiseKind::lognormal}) ==
        doctest::Approx((e - 1.0) * e).epsilon(1e-12));
  CHECK(enkf::matched_r_variance({envda::NoiseKind::uniform}) ==
        doctest::Approx(1.0 / 12.0).epsilon(1e-12));
  CHECK(enkf::matched_r_variance({envda::NoiseKind::none}) == 1e-6);
}

TEST_CASE("ensemble statistics use the unbiased divisor") {
  enkf::Ensemble e;
  e.members.push_back({0.0, 1.0, -2.0});
  e.members.push_back({2.0, 1.0, 4.0});
  const Eigen::Vector3d mean = enkf::ensemble_mean(e);
  CHECK(mean(0) == 1.0);
  CHECK(mean(1) == 1.0);
  CHECK(mean(2) == 1.0);
  const Eigen::Matrix3d cov = enkf::sample_covariance(e);
  CHECK(cov(0, 0) == 2.0);   // (1 + 1) / (2 - 1)
  CHECK(cov(1, 1) == 0.0);
  CHECK(cov(2, 2) == 18.0);  // (9 + 9) / 1
  CHECK(cov(0, 2) == 6.0);   // (-1)(-3) + (1)(3)
}

TEST_CASE("forecast propagates members deterministically when q is zero") {
  dyn::LorenzParams params;
  dyn::TimeGrid grid;
  grid.steps_per_obs = 7;

  enkf::Ensemble e;
  for (int i = 0; i < 4; ++i) e.members.push_back({2.0, 3.0, 15.0});
  Rng rng(1);
  const auto out = enkf::enkf_forecast(e, params, grid, 0.0, rng);
  CHECK(out.diverged_members == 0);

  const dyn::Trajectory t = dyn::integrate({2.0, 3.0, 15.0}, params, grid, 7);
  for (const auto& m : out.ensemble.members) {
    CHECK(m.x == t.points.back().state.x);
    CHECK(m.y == t.points.back().state.y);
    CHECK(m.z == t.points.back().state.z);
  }

  // No draws are consumed when q == 0.
  Rng replay(1);
  CHECK(rng.raw() == replay.raw());

  const double s = std::sqrt(72.0);
  enkf::Ensemble fixed;
  fixed.members.push_back({s, s, 27.0});
  fixed.members.push_back({s, s, 27.0});
  Rng rng2(2);
  const auto still = enkf::enkf_forecast(fixed, params, grid, 0.0, rng2);
  for (const auto& m : still.ensemble.members) {
    CHECK(m.x == doctest::Approx(s).epsilon(1e-12));
    CHECK(m.z == doctest::Approx(27.0).epsilon(1e-12));
  }
}

TEST_CASE("model noise has the configured covariance") {
  dyn::LorenzParams params;
  dyn::TimeGrid grid;
  grid.steps_per_obs = 1;
  const double q = 0.09;  // q_std = 0.3

  enkf::Ensemble e;
  const int n = 10000;
  for (int i = 0; i < n; ++i) e.members.push_back({1.0, 1.0, 1.0});
  Rng rng(33);
  const auto out = enkf::enkf_forecast(e, params, grid, q, rng);

  const dyn::StateVec det =
      dyn::integrate({1.0, 1.0, 1.0}, params, grid, 1).points.back().state;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sum_sq = 0.0;
    for (const auto& m : out.ensemble.members) {
      const double d = m[c] - det[c];
      sum += d;
      sum_sq += d * d;
    }
    const double mean = sum / n;
    const double var = sum_sq / n - mean * mean;
    CHECK(var == doctest::Approx(q).epsilon(0.05));
  }
}

TEST_CASE("diverged members are frozen and counted") {
  dyn::LorenzParams params;
  dyn::TimeGrid grid;
  grid.steps_per_obs = 10;
  enkf::Ensemble e;
  e.members.push_back({2.0, 3.0, 15.0});
  e.members.push_back({9e5, 9e5, 9e5});  // blows past the guard immediately
  Rng rng(4);
  const auto out = enkf::enkf_forecast(e, params, grid, 0.0, rng);
  CHECK(out.diverged_members == 1);
  for (const auto& m : out.ensemble.members)
    CHECK(dyn::finite_bounded(m));
}

TEST_CASE("kalman gain reproduces the scalar textbook value") {
  const double d = 1.0 / std::sqrt(2.0);
  enkf::Ensemble e;
  e.members.push_back({5.0 - d, 7.0, 9.0});
  e.members.push_back({5.0 + d, 7.0, 9.0});  // sample var of x is exactly 1

  envda::ObservationOperator x_only{{true, false, false}};
  const Eigen::MatrixXd k = enkf::kalman_gain(e, x_only, 1.0);
  REQUIRE(k.rows() == 3);
  REQUIRE(k.cols() == 1);
  CHECK(k(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(std::abs(k(1, 0)) <= 1e-14);
  CHECK(std::abs(k(2, 0)) <= 1e-14);
}

TEST_CASE("huge observation variance ignores the data") {
  const enkf::Ensemble e = random_ensemble(12, 8);
  const Eigen::MatrixXd k =
      enkf::kalman_gain(e, envda::ObservationOperator{}, 1e12);
  CHECK(k.cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("gain matches an explicit inverse computation") {
  const enkf::Ensemble e = random_ensemble(8, 17);
  const envda::ObservationOperator full;
  const double r = 0.5;
  const Eigen::MatrixXd k = enkf::kalman_gain(e, full, r);

  const Eigen::Matrix3d p = enkf::sample_covariance(e);
  const Eigen::Matrix3d s = p + r * Eigen::Matrix3d::Identity();
  const Eigen::MatrixXd oracle = p * s.inverse();
  CHECK((k - oracle).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("degenerate ensemble with vanishing observation error fails loudly") {
  enkf::Ensemble e;
  e.members.push_back({1.0, 2.0, 3.0});
  e.members.push_back({1.0, 2.0, 3.0});
  CHECK_THROWS_AS(enkf::kalman_gain(e, envda::ObservationOperator{}, 0.0),
                  std::runtime_error);
}

TEST_CASE("gain eigenvalues stay inside the unit interval") {
  for (const std::uint64_t seed : {3u, 14u, 15u}) {
    for (const double r : {0.25, 1.0, 9.0}) {
      const enkf::Ensemble e = random_ensemble(20, seed);
      const Eigen::MatrixXd k =
          enkf::kalman_gain(e, envda::ObservationOperator{}, r);
      const Eigen::Matrix3d sym = 0.5 * (k + k.transpose());
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(sym);
      CHECK(es.eigenvalues().minCoeff() >= -1e-10);
      CHECK(es.eigenvalues().maxCoeff() <= 1.0 + 1e-10);
    }
  }
}

TEST_CASE("analysis shifts members by gain times perturbed innovation") {
  const enkf::Ensemble e = random_ensemble(3, 55);
  const envda::ObservationOperator full;
  const double r = 0.25;
  Eigen::VectorXd y(3);
  y << 1.0, -2.0, 3.0;

  Rng rng(777);
  const enkf::Ensemble analyzed = enkf::enkf_analysis(e, y, full, r, rng);

  const Eigen::MatrixXd k = enkf::kalman_gain(e, full, r);
  Rng replay(777);
  for (int i = 0; i < 3; ++i) {
    Eigen::VectorXd innovation = y - full.project(e.members[static_cast<std::size_t>(i)]);
    for (int c = 0; c < 3; ++c) innovation(c) += replay.normal(0.0, std::sqrt(r));
    const Eigen::Vector3d expect =
        to_vec(e.members[static_cast<std::size_t>(i)]) + k * innovation;
    for (int c = 0; c < 3; ++c)
      CHECK(analyzed.members[static_cast<std::size_t>(i)][c] == expect(c));
  }
}

TEST_CASE("analysis reduces to the forecast when data are uninformative") {
  const enkf::Ensemble e = random_ensemble(10, 91);
  Eigen::VectorXd y(3);
  y << 0.0, 0.0, 0.0;
  Rng rng(5);
  const enkf::Ensemble out =
      enkf::enkf_analysis(e, y, envda::ObservationOperator{}, 1e12, rng);
  // The perturbations scale with sqrt(R), so the residual shift is
  // O(P / sqrt(R)) ~ 1e-5, not machine epsilon.
  for (std::size_t i = 0; i < e.members.size(); ++i)
    for (int c = 0; c < 3; ++c)
      CHECK(std::abs(out.members[i][c] - e.members[i][c]) <= 1e-4);

  Eigen::VectorXd bad(2);
  CHECK_THROWS_AS(
      enkf::enkf_analysis(e, bad, envda::ObservationOperator{}, 1.0, rng),
      std::invalid_argument);
}

TEST_CASE("permuting members permutes analyses and preserves the gain") {
  const enkf::Ensemble e = random_ensemble(6, 23);
  enkf::Ensemble permuted;
  const int order[6] = {4, 0, 5, 2, 1, 3};
  for (int i : order) permuted.members.push_back(e.members[static_cast<std::size_t>(i)]);

  const envda::ObservationOperator full;
  const Eigen::MatrixXd k1 = enkf::kalman_gain(e, full, 0.7);
  const Eigen::MatrixXd k2 = enkf::kalman_gain(permuted, full, 0.7);
  CHECK((k1 - k2).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((enkf::ensemble_mean(e) - enkf::ensemble_mean(permuted))
            .cwiseAbs()
            .maxCoeff() <= 1e-13);

  // With observation perturbations paired to members, the analysis set is
  // equivariant under member permutation.
  Eigen::VectorXd y(3);
  y << 2.0, 1.0, 0.0;
  std::vector<Eigen::Vector3d> mu(6);
  Rng rng(64);
  for (auto& m : mu)
    for (int c = 0; c < 3; ++c) m(c) = rng.normal(0.0, 0.5);

  auto analyze = [&](const dyn::StateVec& m, const Eigen::Vector3d& noise) {
    const Eigen::Vector3d innovation = y + noise - full.project(m);
    return (to_vec(m) + k1 * innovation).eval();
  };
  for (int j = 0; j < 6; ++j) {
    const int i = order[j];
    const Eigen::Vector3d a = analyze(e.members[static_cast<std::size_t>(i)],
                                      mu[static_cast<std::size_t>(i)]);
    const Eigen::Vector3d b = analyze(permuted.members[static_cast<std::size_t>(j)],
                                      mu[static_cast<std::size_t>(i)]);
    CHECK(a == b);
  }
}

TEST_CASE("exact filter conjugate update halves an identity prior") {
  const Eigen::Matrix3d eye = Eigen::Matrix3d::Identity();
  const Eigen::Vector3d m0(1.0, 2.0, 3.0);
  const Eigen::Vector3d y(2.0, 2.0, 2.0);
  const auto out = enkf::kf_exact(m0, eye, eye, eye, Eigen::Matrix3d::Zero(),
                                  eye, std::optional<Eigen::VectorXd>(y));
  CHECK((out.cov - 0.5 * eye).cwiseAbs().maxCoeff() <= 1e-12);
  const Eigen::Vector3d expect = 0.5 * (m0 + y);
  CHECK((out.mean - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("exact filter prediction follows the covariance recursion") {
  Rng r(6);
  Eigen::Matrix3d a, b;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      a(i, j) = r.uniform(-1.0, 1.0);
      b(i, j) = r.uniform(-1.0, 1.0);
    }
  const Eigen::Matrix3d p = b * b.transpose();
  const Eigen::Matrix3d q = 0.1 * Eigen::Matrix3d::Identity();
  const Eigen::Vector3d m0(0.5, -0.5, 0.25);

  const auto out = enkf::kf_exact(m0, p, a, Eigen::MatrixXd::Identity(3, 3), q,
                                  Eigen::Matrix3d::Identity(), std::nullopt);
  const Eigen::Matrix3d expect = a * p * a.transpose() + q;
  CHECK((out.cov - expect).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((out.mean - a * m0).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("exact filter matches a hand iterated scalar recursion") {
  const double a = 0.9, q = 0.05, r = 0.4;
  double p = 0.6, m = 1.0;

  Eigen::VectorXd mean(1);
  mean << m;
  Eigen::MatrixXd cov(1, 1), model(1, 1), h(1, 1), qm(1, 1), rm(1, 1);
  cov << p;
  model << a;
  h << 1.0;
  qm << q;
  rm << r;

  for (int k = 0; k < 20; ++k) {
    const double y = std::sin(0.7 * k) + 0.3;
    // Scalar Riccati recursion.
    p = a * a * p + q;
    m = a * m;
    const double gain = p / (p + r);
    m += gain * (y - m);
    p = (1.0 - gain) * p;

    Eigen::VectorXd obs(1);
    obs << y;
    const auto out = enkf::kf_exact(mean, cov, model, h, qm, rm,
                                    std::optional<Eigen::VectorXd>(obs));
    mean = out.mean;
    cov = out.cov;
    CHECK(mean(0) == doctest::Approx(m).epsilon(1e-12));
    CHECK(cov(0, 0) == doctest::Approx(p).epsilon(1e-12));
  }
}

TEST_CASE("exact filter rejects malformed covariances") {
  const Eigen::Matrix3d eye = Eigen::Matrix3d::Identity();
  const Eigen::Vector3d m0(0, 0, 0);

  Eigen::Matrix3d indefinite = eye;
  indefinite(2, 2) = -1.0;
  CHECK_THROWS_AS(enkf::kf_exact(m0, indefinite, eye, eye, eye, eye, std::nullopt),
                  std::invalid_argument);

  Eigen::Matrix3d asym = eye;
  asym(0, 1) = 0.5;
  CHECK_THROWS_AS(enkf::kf_exact(m0, asym, eye, eye, eye, eye, std::nullopt),
                  std::invalid_argument);

  CHECK_THROWS_AS(enkf::kf_exact(m0, eye, Eigen::MatrixXd::Identity(2, 2), eye,
                                 eye, eye, std::nullopt),
                  std::invalid_argument);
}

TEST_CASE("sampled filter converges to the exact filter on a linear system") {
  const LinearSystem sys;
  const auto predicted = enkf::kf_exact(sys.m0, sys.p0, sys.a,
                                        Eigen::MatrixXd::Identity(3, 3), sys.q,
                                        sys.r, std::optional<Eigen::VectorXd>(sys.y));

  SUBCASE("one large-ensemble cycle matches mean and covariance to 2%") {
    const enkf::Ensemble analyzed = linear_cycle(sys, 10000, 2718);
    const Eigen::Vector3d mean = enkf::ensemble_mean(analyzed);
    const Eigen::Matrix3d cov = enkf::sample_covariance(analyzed);
    CHECK((mean - predicted.mean).norm() / predicted.mean.norm() <= 0.02);
    CHECK((cov - predicted.cov).norm() / predicted.cov.norm() <= 0.02);
  }

  SUBCASE("mean error decreases monotonically with ensemble size") {
    double err[3] = {0.0, 0.0, 0.0};
    const int sizes[3] = {100, 1000, 10000};
    for (int s = 0; s < 3; ++s)
      for (std::uint64_t rep = 0; rep < 20; ++rep) {
        const enkf::Ensemble analyzed =
            linear_cycle(sys, sizes[s], derive_seed(1000, "conv", rep, s));
        err[s] += (enkf::ensemble_mean(analyzed) - predicted.mean).norm();
      }
    CHECK(err[0] > err[1]);
    CHECK(err[1] > err[2]);
  }
}

TEST_CASE("near perfect observations force the filter onto the reference") {
  envda::EnvConfig env_cfg;
  env_cfg.grid.steps_per_obs = 5;
  env_cfg.n_cycles = 10;
  const envda::Twin twin = envda::generate_twin(env_cfg, 12);

  enkf::EnkfConfig cfg;
  cfg.n_ens = 30;
  cfg.r_variance = 1e-6;
  const auto run = enkf::run_enkf(cfg, env_cfg, twin, 9);

  REQUIRE(run.times.size() == 11);
  REQUIRE(run.mean_analysis.size() == 11);
  REQUIRE(run.analysis_members.front().size() == 30);
  for (std::size_t k = 5; k < run.times.size(); ++k) {
    const dyn::StateVec& ref = twin.ref_at_obs(static_cast<int>(k), 5);
    for (int c = 0; c < 3; ++c)
      CHECK(std::abs(run.mean_analysis[k][c] - ref[c]) <= 1e-2);
  }

  // The per-step mean path carries the analysis mean at observation nodes.
  REQUIRE(run.mean_path.size() == static_cast<std::size_t>(10 * 5) + 1);
  REQUIRE(run.mean_path_rmse.size() == run.mean_path.size());
  for (int k = 0; k <= 10; ++k)
    for (int c = 0; c < 3; ++c)
      CHECK(run.mean_path[static_cast<std::size_t>(k) * 5][c] ==
            run.mean_analysis[static_cast<std::size_t>(k)][c]);
  for (std::size_t j = 5 * 5; j < run.mean_path.size(); ++j)
    CHECK(run.mean_path_rmse[j] <= 5e-2);

  const auto again = enkf::run_enkf(cfg, env_cfg, twin, 9);
  for (std::size_t k = 0; k < run.times.size(); ++k)
    for (int c = 0; c < 3; ++c)
      CHECK(again.mean_analysis[k][c] == run.mean_analysis[k][c]);
}

TEST_CASE("analyses contract the innovation on average") {
  envda::EnvConfig env_cfg;
  env_cfg.grid.steps_per_obs = 50;
  env_cfg.n_cycles = 40;
  env_cfg.noise = {envda::NoiseKind::gaussian, 1.0};
  const envda::Twin twin = envda::generate_twin(env_cfg, 31);

  enkf::EnkfConfig cfg;
  cfg.n_ens = 20;
  cfg.r_variance = 1.0;
  const auto run = enkf::run_enkf(cfg, env_cfg, twin, 8);

  // Two caveats make this statistical. The mean observation perturbation is
  // O(1/sqrt(N)), so cycles with small innovations can expand slightly. And
  // the innovation cannot drop below the observation noise itself
  // (mean |v| ~ 0.8 here), so only the forecast-error part contracts.
  double total_f = 0.0, total_a = 0.0;
  int expanded = 0;
  for (int k = 1; k <= env_cfg.n_cycles; ++k) {
    const Eigen::VectorXd& y = twin.observations[static_cast<std::size_t>(k)];
    const auto idx = static_cast<std::size_t>(k);
    const Eigen::VectorXd f = env_cfg.obs_op.project(run.mean_forecast[idx]);
    const Eigen::VectorXd a = env_cfg.obs_op.project(run.mean_analysis[idx]);
    const double innov_f = (y - f).cwiseAbs().mean();
    const double innov_a = (y - a).cwiseAbs().mean();
    total_f += innov_f;
    total_a += innov_a;
    if (innov_a > innov_f) ++expanded;
  }
  CHECK(total_a < 0.95 * total_f);
  CHECK(expanded <= 8);
}

TEST_CASE("filtering beats the observation noise on the standard setup") {
  envda::EnvConfig env_cfg;
  env_cfg.grid.steps_per_obs = 50;
  env_cfg.n_cycles = 200;
  env_cfg.noise = {envda::NoiseKind::gaussian, 1.0};
  const envda::Twin twin = envda::generate_twin(env_cfg, 77);

  enkf::EnkfConfig cfg;  // N = 50, R = 1
  const auto run = enkf::run_enkf(cfg, env_cfg, twin, 3);

  double avg = 0.0;
  for (std::size_t k = 1; k < run.rmse.size(); ++k) avg += run.rmse[k];
  avg /= static_cast<double>(run.rmse.size() - 1);
  CHECK(avg < 1.0);
  CHECK(run.diverged_member_steps == 0);

  envda::EnvConfig longer = env_cfg;
  longer.n_cycles = 500;
  CHECK_THROWS_AS(enkf::run_enkf(cfg, longer, twin, 3), std::invalid_argument);
}
