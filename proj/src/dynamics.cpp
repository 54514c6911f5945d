#include "chaosda/dynamics.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>

namespace chaosda::dynamics {

void validate(const TimeGrid& grid) {
  if (!(grid.dt > 0.0)) throw std::invalid_argument("TimeGrid: dt must be positive");
  if (grid.steps_per_obs < 1)
    throw std::invalid_argument("TimeGrid: steps_per_obs must be >= 1");
}

StateVec lorenz_rhs(const StateVec& s, const LorenzParams& p) {
  return {p.sigma * (s.y - s.x), s.x * (p.rho - s.z) - s.y,
          s.x * s.y - p.beta * s.z};
}

StateVec rk2_step(const StateVec& s, const LorenzParams& p, double dt) {
  const StateVec k1 = lorenz_rhs(s, p);
  const double h = 0.5 * dt;
  const StateVec mid{s.x + h * k1.x, s.y + h * k1.y, s.z + h * k1.z};
  const StateVec k2 = lorenz_rhs(mid, p);
  return {s.x + dt * k2.x, s.y + dt * k2.y, s.z + dt * k2.z};
}

bool finite_bounded(const StateVec& s, double limit) {
  return std::isfinite(s.x) && std::isfinite(s.y) && std::isfinite(s.z) &&
         std::fabs(s.x) <= limit && std::fabs(s.y) <= limit &&
         std::fabs(s.z) <= limit;
}

Trajectory integrate(const StateVec& s0, const LorenzParams& p,
                     const TimeGrid& grid, std::size_t n_steps) {
  validate(grid);
  Trajectory out;
  out.points.reserve(n_steps + 1);
  StateVec s = s0;
  out.points.push_back({s, lorenz_rhs(s, p)});
  if (!finite_bounded(s)) {
    out.diverged = true;
    return out;
  }
  for (std::size_t i = 0; i < n_steps; ++i) {
    s = rk2_step(s, p, grid.dt);
    out.points.push_back({s, lorenz_rhs(s, p)});
    if (!finite_bounded(s)) {
      out.diverged = true;
      return out;
    }
  }
  return out;
}

StateVec climatological_mean(const LorenzParams& p, double dt) {
  using Key = std::tuple<double, double, double, double>;
  static std::map<Key, StateVec> cache;
  static std::mutex mu;
  const Key key{p.sigma, p.rho, p.beta, dt};
  {
    std::lock_guard<std::mutex> lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }

  const TimeGrid grid{dt, 1};
  StateVec s{1.0, 1.0, 1.0};
  const auto spin_steps = static_cast<std::size_t>(std::llround(10.0 / dt));
  for (std::size_t i = 0; i < spin_steps; ++i) s = rk2_step(s, p, grid.dt);

  const auto avg_steps = static_cast<std::size_t>(std::llround(500.0 / dt));
  double sx = 0.0, sy = 0.0, sz = 0.0;
  for (std::size_t i = 0; i < avg_steps; ++i) {
    s = rk2_step(s, p, grid.dt);
    sx += s.x;
    sy += s.y;
    sz += s.z;
  }
  const double n = static_cast<double>(avg_steps);
  const StateVec mean{sx / n, sy / n, sz / n};
  std::lock_guard<std::mutex> lock(mu);
  cache[key] = mean;
  return mean;
}

}  // namespace chaosda::dynamics
