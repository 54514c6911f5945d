#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <vector>

#include "chaosda/dynamics.hpp"
#include "chaosda/envda.hpp"
#include "chaosda/rng.hpp"

namespace chaosda::enkf {

struct Ensemble {
  std::vector<dynamics::StateVec> members;

  int size() const { return static_cast<int>(members.size()); }
  void validate() const;  // >= 2 members, all finite
};

struct EnkfConfig {
  int n_ens = 50;
  double r_variance = 1.0;     // diagonal observation-error variance
  double q_variance = 0.0;     // diagonal model-error variance, 0 = perfect model
  double initial_spread = 1.0; // std of initial member perturbations
  void validate() const;
};

// Observation-error variance the filter assumes for a given noise model.
// Biased or non-Gaussian noise is deliberately matched by variance only;
// noise-free data gets a small positive floor so R stays invertible.
double matched_r_variance(const envda::NoiseModel& noise);

Eigen::Vector3d ensemble_mean(const Ensemble& e);
Eigen::Matrix3d sample_covariance(const Ensemble& e);  // unbiased, divisor N-1

struct ForecastOutcome {
  Ensemble ensemble;
  int diverged_members = 0;  // members frozen at their last finite state
};

// Propagates each member steps_per_obs RK2 steps, then adds model noise
// N(0, q_variance I) per member (no draws are consumed when q_variance == 0).
// When step_sums is given, appends one entry per step (1 .. steps_per_obs)
// holding the sum of member states at that step, frozen members included;
// the model-noise perturbation is not reflected in these sums.
ForecastOutcome enkf_forecast(const Ensemble& e, const dynamics::LorenzParams& p,
                              const dynamics::TimeGrid& grid, double q_variance,
                              Rng& rng,
                              std::vector<Eigen::Vector3d>* step_sums = nullptr);

// K = P H^T (H P H^T + R)^-1 with P the unbiased sample covariance; the
// symmetric positive-definite system is solved by Cholesky factorization,
// never by forming an inverse. Throws when the innovation covariance is not
// positive-definite (degenerate ensemble with vanishing R).
Eigen::MatrixXd kalman_gain(const Ensemble& e, const envda::ObservationOperator& op,
                            double r_variance);

// Perturbed-observation update: x_i <- x_i + K (y + mu_i - H x_i) with
// mu_i ~ N(0, R) drawn per member in index order.
Ensemble enkf_analysis(const Ensemble& e, const Eigen::VectorXd& observation,
                       const envda::ObservationOperator& op, double r_variance,
                       Rng& rng);

// Exact Kalman recursion on a linear-Gaussian system; the verification
// oracle for the sampled filter. Dimension-generic. Pass no observation to
// run the prediction step alone.
struct KfResult {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

KfResult kf_exact(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                  const Eigen::MatrixXd& model, const Eigen::MatrixXd& obs_matrix,
                  const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                  const std::optional<Eigen::VectorXd>& observation);

struct EnkfRunResult {
  std::vector<double> times;
  std::vector<dynamics::StateVec> mean_forecast;
  std::vector<dynamics::StateVec> mean_analysis;
  std::vector<double> rmse;  // analysis mean versus noise-free reference
  std::vector<Ensemble> forecast_members;
  std::vector<Ensemble> analysis_members;
  // Ensemble mean at every model step; the post-analysis mean at
  // observation nodes, the propagated member mean in between.
  std::vector<dynamics::StateVec> mean_path;
  std::vector<double> mean_path_rmse;
  int diverged_member_steps = 0;
};

// Initial ensemble: first observation lifted to state space (unobserved
// components from the climatological mean) plus N(0, spread^2) member
// perturbations; then forecast/analysis cycles across the twin's horizon.
// Index 0 of every series is the initial ensemble before any cycle.
EnkfRunResult run_enkf(const EnkfConfig& cfg, const envda::EnvConfig& env_cfg,
                       const envda::Twin& twin, std::uint64_t seed);

}  // namespace chaosda::enkf
