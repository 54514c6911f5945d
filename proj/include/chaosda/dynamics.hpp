#pragma once

#include <cstddef>
#include <vector>

namespace chaosda::dynamics {

struct LorenzParams {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
};

struct StateVec {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
};

// Model time step and observation cadence. obs_interval() is dt *
// steps_per_obs by construction, so the observation time is always an exact
// step boundary.
struct TimeGrid {
  double dt = 1e-3;
  int steps_per_obs = 50;

  double obs_interval() const { return dt * steps_per_obs; }
};

// throws std::invalid_argument on dt <= 0 or steps_per_obs < 1
void validate(const TimeGrid& grid);

StateVec lorenz_rhs(const StateVec& s, const LorenzParams& p);

// explicit midpoint step: k1 = f(s), k2 = f(s + dt/2 * k1), s + dt * k2
StateVec rk2_step(const StateVec& s, const LorenzParams& p, double dt);

struct StatePair {
  StateVec state;
  StateVec deriv;  // lorenz_rhs at state
};

struct Trajectory {
  // n_steps + 1 entries unless the blow-up guard truncated the run
  std::vector<StatePair> points;
  bool diverged = false;
};

bool finite_bounded(const StateVec& s, double limit = 1e6);

// Integrates n_steps RK2 steps of size grid.dt. Stops early (diverged=true)
// as soon as any component leaves [-1e6, 1e6]; the offending state is kept
// as the last point.
Trajectory integrate(const StateVec& s0, const LorenzParams& p,
                     const TimeGrid& grid, std::size_t n_steps);

// Long-run state average for the given parameters (spin-up discarded),
// used to fill unobserved components when lifting an observation to state
// space. Deterministic; cached per parameter set.
StateVec climatological_mean(const LorenzParams& p, double dt = 1e-3);

}  // namespace chaosda::dynamics
