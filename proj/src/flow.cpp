#include "cfmlab/flow.hpp"

#include <ostream>

#include "cfmlab/csv.hpp"
#include "cfmlab/velocity.hpp"

namespace cfmlab {

namespace {

// Velocity of every row of the combined state against the particle rows.
Mat system_velocity(const LayerParams& layer, const Mat& state) {
  return batched_velocity(layer, state, state.bottomRows(state.rows() - 1));
}

void check_finite(const Mat& state, int step, int layer) {
  if (!state.allFinite())
    throw NonFiniteState("integrate_forward: non-finite state at step " + std::to_string(step) +
                         " (layer " + std::to_string(layer) + ")");
}

}  // namespace

Trajectory integrate_forward(const Vec& x0, const Ensemble& mu0, const ParameterPath& theta,
                             const IntegratorConfig& cfg) {
  if (mu0.n() < 1) throw std::invalid_argument("integrate_forward: empty ensemble");
  if (theta.num_layers() < 1) throw std::invalid_argument("integrate_forward: empty path");
  if (mu0.dim() != x0.size() || theta.dim() != x0.size())
    throw std::invalid_argument("integrate_forward: dimension mismatch");
  if (cfg.substeps < 1) throw std::invalid_argument("integrate_forward: substeps must be >= 1");

  const int L = theta.num_layers();
  const int T = L * cfg.substeps;
  const double h = 1.0 / T;

  Trajectory traj;
  traj.cfg = cfg;
  traj.layers = L;
  traj.grid.resize(T + 1);
  for (int t = 0; t <= T; ++t) traj.grid[t] = static_cast<double>(t) / T;

  Mat state(mu0.n() + 1, x0.size());
  state.row(0) = x0.transpose();
  state.bottomRows(mu0.n()) = mu0.particles;
  traj.states.reserve(T + 1);
  traj.states.push_back(state);
  if (cfg.scheme == Scheme::RK4) traj.stages.reserve(T);

  for (int t = 0; t < T; ++t) {
    const int layer = traj.layer_of_step(t);
    const LayerParams& params = theta.at_layer(layer);
    if (cfg.scheme == Scheme::Euler) {
      state += h * system_velocity(params, state);
    } else {
      const Mat& y0 = traj.states.back();
      const Mat k1 = system_velocity(params, y0);
      const Mat y1 = y0 + 0.5 * h * k1;
      const Mat k2 = system_velocity(params, y1);
      const Mat y2 = y0 + 0.5 * h * k2;
      const Mat k3 = system_velocity(params, y2);
      const Mat y3 = y0 + h * k3;
      const Mat k4 = system_velocity(params, y3);
      state = y0 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      traj.stages.push_back({y0, y1, y2, y3});
    }
    check_finite(state, t + 1, layer);
    traj.states.push_back(state);
  }
  return traj;
}

Vec output_token(const Trajectory& traj) { return traj.states.back().row(0).transpose(); }

void dump_trajectory_csv(const Trajectory& traj, std::ostream& out) {
  const int d = traj.dim();
  out << "step,s,kind,particle_index";
  for (int c = 0; c < d; ++c) out << ",coord_" << c;
  out << "\r\n";
  for (int t = 0; t <= traj.steps(); ++t) {
    out << t << ',' << format_real(traj.grid[t]) << ",token,-1";
    for (int c = 0; c < d; ++c) out << ',' << format_real(traj.states[t](0, c));
    out << "\r\n";
    for (int i = 0; i < traj.n(); ++i) {
      out << t << ',' << format_real(traj.grid[t]) << ",particle," << i;
      for (int c = 0; c < d; ++c) out << ',' << format_real(traj.states[t](i + 1, c));
      out << "\r\n";
    }
  }
}

}  // namespace cfmlab
