#pragma once

#include "cfmlab/flow.hpp"
#include "cfmlab/types.hpp"

namespace cfmlab {

/// Raised when a measured quantity exceeds its Gronwall/regularity envelope.
struct BoundViolation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Token adjoint p_s and per-particle measure-adjoint gradients
/// g_s^{(i)} = grad phi_s at particle i's current position, on the forward
/// grid. p_states[T] = grad_x l(x_1, y_0); g_states[T] = 0.
struct AdjointTrajectory {
  std::vector<Vec> p_states;  // T+1
  std::vector<Mat> g_states;  // T+1, each n x d (row i = g^{(i)})
};

/// Squared loss l(x1, y0) = |x1 - y0|^2 / 2.
double loss_eval(const Vec& x1, const Vec& y0);

/// Terminal adjoint data: p1 = x1 - y0 and g1 = 0 (n rows).
std::pair<Vec, Mat> terminal_conditions(const Vec& x1, const Vec& y0, int n);

/// Solves the backward adjoint system along the stored forward trajectory,
/// in Lagrangian form:
///   dp/ds     = -D_x V(x_s, mu_s)^T p
///   dg_i/ds   = -D_x V(z_i, mu_s)^T g_i - grad_W V[x_s](z_i)^T p
///               - (1/n) sum_j grad_W V[z_j](z_i)^T g_j
/// using the forward scheme with coefficients at the stored (stage) states.
/// Asserts the discrete Gronwall envelope |p_s| <= |p_1| exp(sum h |D_xV|)
/// along the solve. Throws UnsupportedFamily for NearestNeighborDrift.
AdjointTrajectory backward_integrate(const Trajectory& traj, const ParameterPath& theta,
                                     const Vec& y0);

/// Layer blocks of the loss gradient: the in-layer quadrature of
///   D_theta V(x_s, mu_s)^T p_s + (1/n) sum_i D_theta V(z_i, mu_s)^T g_i.
/// RK4 uses the trapezoidal rule on grid nodes; Euler uses the left-point
/// rule with the adjoint at the right node, which reproduces the exact
/// discrete backprop of the forward Euler scheme.
LossGradient assemble_gradient(const Trajectory& traj, const AdjointTrajectory& adj,
                               const ParameterPath& theta);

/// Forward-integrate and evaluate the loss for one observation.
double pipeline_loss(const Vec& x0, const Ensemble& mu0, const Vec& y0,
                     const ParameterPath& theta, const IntegratorConfig& cfg);

/// Full gradient pipeline: forward, backward, assemble.
LossGradient pipeline_gradient(const Vec& x0, const Ensemble& mu0, const Vec& y0,
                               const ParameterPath& theta, const IntegratorConfig& cfg,
                               double* loss_out = nullptr);

/// Finite-difference validation of the adjoint gradient.
struct FdCheckReport {
  std::vector<double> per_direction;  // relative errors at cfg.substeps
  double max_rel_error = 0.0;         // at cfg.substeps
  double max_rel_error_refined = 0.0; // at 2 * cfg.substeps
};

/// Compares <grad, eta> against central differences of the loss along
/// `directions` random unit-norm direction paths, at substeps m and 2m.
/// A Population context is materialized once with context_n particles.
FdCheckReport gradient_fd_check(const Sample& sample, const ParameterPath& theta,
                                const IntegratorConfig& cfg, int directions, RngHandle rng,
                                int context_n = 16);

}  // namespace cfmlab
