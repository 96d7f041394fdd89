#pragma once

#include <array>
#include <iosfwd>

#include "cfmlab/types.hpp"

namespace cfmlab {

enum class Scheme { Euler, RK4 };

struct IntegratorConfig {
  Scheme scheme = Scheme::RK4;
  int substeps = 8;  // per layer; total step h = 1 / (L * substeps)
};

/// Raised when a non-finite state or adjoint appears mid-integration.
struct NonFiniteState : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Forward states of the coupled token/particle system on the full grid.
/// Row 0 of each state matrix is the distinguished token, rows 1..n the
/// context particles (the empirical measure is transported by moving them
/// along the shared characteristics). RK4 stage evaluation points are kept
/// so the backward pass can evaluate its coefficient matrices at them.
struct Trajectory {
  IntegratorConfig cfg;
  int layers = 0;
  std::vector<double> grid;                // T+1 depths, T = layers * substeps
  std::vector<Mat> states;                 // T+1 combined (n+1) x d states
  std::vector<std::array<Mat, 4>> stages;  // per step, RK4 only

  int steps() const { return static_cast<int>(grid.size()) - 1; }
  int layer_of_step(int t) const { return t / cfg.substeps; }
  int n() const { return static_cast<int>(states.front().rows()) - 1; }
  int dim() const { return static_cast<int>(states.front().cols()); }
  double step_size() const { return 1.0 / (layers * cfg.substeps); }

  Vec token(int t) const { return states[t].row(0).transpose(); }
  Mat particles(int t) const { return states[t].bottomRows(states[t].rows() - 1); }
};

/// Integrates the coupled system over depth [0,1]. Within layer l the layer's
/// parameters are constant; token and particles advance under the same
/// scheme and velocity field. Throws NonFiniteState (with step and layer)
/// if the state leaves the finite range.
Trajectory integrate_forward(const Vec& x0, const Ensemble& mu0, const ParameterPath& theta,
                             const IntegratorConfig& cfg);

/// Terminal token x_1.
Vec output_token(const Trajectory& traj);

/// CSV dump: step, s, kind in {token, particle}, particle_index, coord_*.
void dump_trajectory_csv(const Trajectory& traj, std::ostream& out);

}  // namespace cfmlab
