#include "chaosda/enkf.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace chaosda::enkf {

namespace {

Eigen::MatrixXd selection_matrix(const envda::ObservationOperator& op) {
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(op.obs_dim(), 3);
  int row = 0;
  for (int i = 0; i < 3; ++i)
    if (op.mask[static_cast<std::size_t>(i)]) h(row++, i) = 1.0;
  return h;
}

void require_symmetric_psd(const Eigen::MatrixXd& p, const char* what) {
  const double scale = 1.0 + p.cwiseAbs().maxCoeff();
  if ((p - p.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw std::invalid_argument(std::string(what) + " is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-9 * scale)
    throw std::invalid_argument(std::string(what) + " is not positive semi-definite");
}

}  // namespace

void Ensemble::validate() const {
  if (members.size() < 2)
    throw std::invalid_argument("ensemble needs at least 2 members");
  for (const auto& m : members)
    for (int c = 0; c < 3; ++c)
      if (!std::isfinite(m[c]))
        throw std::invalid_argument("ensemble member is not finite");
}

void EnkfConfig::validate() const {
  if (n_ens < 2) throw std::invalid_argument("n_ens must be >= 2");
  if (!(r_variance > 0.0))
    throw std::invalid_argument("r_variance must be positive");
  if (!(q_variance >= 0.0))
    throw std::invalid_argument("q_variance must be non-negative");
  if (!(initial_spread > 0.0))
    throw std::invalid_argument("initial_spread must be positive");
}

double matched_r_variance(const envda::NoiseModel& noise) {
  constexpr double kFloor = 1e-6;
  const double v = noise.variance();
  return v > kFloor ? v : kFloor;
}

Eigen::Vector3d ensemble_mean(const Ensemble& e) {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& m : e.members)
    for (int c = 0; c < 3; ++c) mean(c) += m[c];
  return mean / static_cast<double>(e.members.size());
}

Eigen::Matrix3d sample_covariance(const Ensemble& e) {
  e.validate();
  const Eigen::Vector3d mean = ensemble_mean(e);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& m : e.members) {
    const Eigen::Vector3d d(m.x - mean(0), m.y - mean(1), m.z - mean(2));
    cov += d * d.transpose();
  }
  return cov / static_cast<double>(e.members.size() - 1);
}

ForecastOutcome enkf_forecast(const Ensemble& e, const dynamics::LorenzParams& p,
                              const dynamics::TimeGrid& grid, double q_variance,
                              Rng& rng, std::vector<Eigen::Vector3d>* step_sums) {
  e.validate();
  if (!(q_variance >= 0.0))
    throw std::invalid_argument("q_variance must be non-negative");

  const std::size_t n_steps = static_cast<std::size_t>(grid.steps_per_obs);
  std::size_t base = 0;
  if (step_sums) {
    base = step_sums->size();
    step_sums->insert(step_sums->end(), n_steps, Eigen::Vector3d::Zero());
  }

  ForecastOutcome out;
  out.ensemble.members.reserve(e.members.size());
  for (const auto& m : e.members) {
    const dynamics::Trajectory t = dynamics::integrate(m, p, grid, n_steps);
    // Freeze diverged members at the last point that still passed the
    // blow-up guard.
    const std::size_t last_ok =
        t.diverged ? (t.points.size() >= 2 ? t.points.size() - 2 : 0)
                   : t.points.size() - 1;
    if (t.diverged) ++out.diverged_members;
    out.ensemble.members.push_back(t.points[last_ok].state);
    if (step_sums) {
      for (std::size_t s = 1; s <= n_steps; ++s) {
        const dynamics::StateVec& st = t.points[std::min(s, last_ok)].state;
        (*step_sums)[base + s - 1] += Eigen::Vector3d(st.x, st.y, st.z);
      }
    }
  }

  if (q_variance > 0.0) {
    const double q_std = std::sqrt(q_variance);
    for (auto& m : out.ensemble.members)
      for (int c = 0; c < 3; ++c) m[c] += rng.normal(0.0, q_std);
  }
  return out;
}

Eigen::MatrixXd kalman_gain(const Ensemble& e, const envda::ObservationOperator& op,
                            double r_variance) {
  e.validate();
  op.validate();
  if (!(r_variance >= 0.0))
    throw std::invalid_argument("r_variance must be non-negative");

  const Eigen::Matrix3d p = sample_covariance(e);
  const Eigen::MatrixXd h = selection_matrix(op);
  const Eigen::MatrixXd ph_t = p * h.transpose();
  Eigen::MatrixXd s = h * ph_t;
  s.diagonal().array() += r_variance;

  const Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("innovation covariance is not positive-definite");
  // K = PH^T S^-1, computed as the transposed solve against symmetric S.
  return llt.solve(ph_t.transpose()).transpose();
}

Ensemble enkf_analysis(const Ensemble& e, const Eigen::VectorXd& observation,
                       const envda::ObservationOperator& op, double r_variance,
                       Rng& rng) {
  if (observation.size() != op.obs_dim())
    throw std::invalid_argument("observation size does not match operator");
  const Eigen::MatrixXd k = kalman_gain(e, op, r_variance);
  const double r_std = std::sqrt(r_variance);

  Ensemble out;
  out.members.reserve(e.members.size());
  for (const auto& m : e.members) {
    Eigen::VectorXd innovation = observation - op.project(m);
    for (Eigen::Index c = 0; c < innovation.size(); ++c)
      innovation(c) += rng.normal(0.0, r_std);
    const Eigen::Vector3d delta = k * innovation;
    dynamics::StateVec updated = m;
    for (int c = 0; c < 3; ++c) updated[c] += delta(c);
    out.members.push_back(updated);
  }
  return out;
}

KfResult kf_exact(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                  const Eigen::MatrixXd& model, const Eigen::MatrixXd& obs_matrix,
                  const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                  const std::optional<Eigen::VectorXd>& observation) {
  const Eigen::Index n = mean.size();
  if (cov.rows() != n || cov.cols() != n || model.rows() != n ||
      model.cols() != n || q.rows() != n || q.cols() != n ||
      obs_matrix.cols() != n)
    throw std::invalid_argument("kf_exact: inconsistent dimensions");
  const Eigen::Index d = obs_matrix.rows();
  if (r.rows() != d || r.cols() != d)
    throw std::invalid_argument("kf_exact: observation covariance shape");
  require_symmetric_psd(cov, "prior covariance");

  KfResult out;
  out.mean = model * mean;
  out.cov = model * cov * model.transpose() + q;

  if (observation) {
    if (observation->size() != d)
      throw std::invalid_argument("kf_exact: observation length");
    const Eigen::MatrixXd ph_t = out.cov * obs_matrix.transpose();
    const Eigen::MatrixXd s = obs_matrix * ph_t + r;
    const Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("kf_exact: innovation covariance not positive-definite");
    const Eigen::MatrixXd k = llt.solve(ph_t.transpose()).transpose();
    out.mean += k * (*observation - obs_matrix * out.mean);
    out.cov = (Eigen::MatrixXd::Identity(n, n) - k * obs_matrix) * out.cov;
  }
  return out;
}

EnkfRunResult run_enkf(const EnkfConfig& cfg, const envda::EnvConfig& env_cfg,
                       const envda::Twin& twin, std::uint64_t seed) {
  cfg.validate();
  env_cfg.validate();
  if (twin.observations.size() < static_cast<std::size_t>(env_cfg.n_cycles) + 1)
    throw std::invalid_argument("twin horizon shorter than n_cycles");

  const dynamics::StateVec fill =
      dynamics::climatological_mean(env_cfg.params, env_cfg.grid.dt);
  Rng rng(derive_seed(seed, "enkf"));

  Ensemble current;
  {
    const dynamics::StateVec center =
        envda::lift_observation(twin.observations.front(), env_cfg.obs_op, fill);
    current.members.reserve(static_cast<std::size_t>(cfg.n_ens));
    for (int i = 0; i < cfg.n_ens; ++i) {
      dynamics::StateVec m = center;
      for (int c = 0; c < 3; ++c) m[c] += rng.normal(0.0, cfg.initial_spread);
      current.members.push_back(m);
    }
  }

  EnkfRunResult out;
  const auto record = [&](const Ensemble& forecast, const Ensemble& analysis,
                          int k) {
    out.times.push_back(static_cast<double>(k) * env_cfg.grid.obs_interval());
    const Eigen::Vector3d mf = ensemble_mean(forecast);
    const Eigen::Vector3d ma = ensemble_mean(analysis);
    out.mean_forecast.push_back({mf(0), mf(1), mf(2)});
    out.mean_analysis.push_back({ma(0), ma(1), ma(2)});
    out.rmse.push_back(envda::rmse_full_state(
        out.mean_analysis.back(),
        twin.ref_at_obs(k, env_cfg.grid.steps_per_obs)));
    out.forecast_members.push_back(forecast);
    out.analysis_members.push_back(analysis);
  };

  std::vector<Eigen::Vector3d> step_sums;
  step_sums.reserve(static_cast<std::size_t>(env_cfg.n_cycles) *
                    static_cast<std::size_t>(env_cfg.grid.steps_per_obs));

  record(current, current, 0);
  for (int k = 1; k <= env_cfg.n_cycles; ++k) {
    ForecastOutcome fc = enkf_forecast(current, env_cfg.params, env_cfg.grid,
                                       cfg.q_variance, rng, &step_sums);
    out.diverged_member_steps += fc.diverged_members;
    current = enkf_analysis(fc.ensemble,
                            twin.observations[static_cast<std::size_t>(k)],
                            env_cfg.obs_op, cfg.r_variance, rng);
    record(fc.ensemble, current, k);
  }

  const int T = env_cfg.grid.steps_per_obs;
  const double inv_n = 1.0 / static_cast<double>(cfg.n_ens);
  out.mean_path.resize(step_sums.size() + 1);
  out.mean_path[0] = out.mean_analysis.front();
  for (std::size_t j = 0; j < step_sums.size(); ++j) {
    const Eigen::Vector3d v = step_sums[j] * inv_n;
    out.mean_path[j + 1] = {v(0), v(1), v(2)};
  }
  for (int k = 1; k <= env_cfg.n_cycles; ++k)
    out.mean_path[static_cast<std::size_t>(k) * static_cast<std::size_t>(T)] =
        out.mean_analysis[static_cast<std::size_t>(k)];
  out.mean_path_rmse.resize(out.mean_path.size());
  for (std::size_t j = 0; j < out.mean_path.size(); ++j)
    out.mean_path_rmse[j] =
        envda::rmse_full_state(out.mean_path[j], twin.reference[j].state);
  return out;
}

}  // namespace chaosda::enkf
