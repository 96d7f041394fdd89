#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cfmlab/adjoint.hpp"
#include "cfmlab/experiments.hpp"
#include "cfmlab/velocity.hpp"

using namespace cfmlab;

namespace {

Ensemble random_ensemble(int n, int d, RngHandle& rng, double scale = 1.0) {
  Mat p(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) p(i, j) = scale * rng.normal();
  return Ensemble(p);
}

Vec random_vec(int d, RngHandle& rng, double scale = 1.0) {
  Vec v(d);
  for (int j = 0; j < d; ++j) v(j) = scale * rng.normal();
  return v;
}

ParameterPath zero_mlp_path(int d, int L) {
  ParameterPath theta;
  for (int l = 0; l < L; ++l) {
    MlpParams mlp;
    mlp.W1 = Mat::Zero(d, d);
    mlp.W2 = Mat::Zero(d, d);
    mlp.b = Vec::Zero(d);
    theta.layers.push_back(mlp);
  }
  return theta;
}

double opnorm(const Mat& m) { return m.jacobiSvd().singularValues()(0); }

}  // namespace

TEST_CASE("loss_eval: zero, hand value, and quadratic homogeneity") {
  CHECK(loss_eval(Vec::Ones(3), Vec::Ones(3)) == 0.0);
  Vec x1(1), y0(1);
  x1 << 3.0;
  y0 << 1.0;
  CHECK(loss_eval(x1, y0) == doctest::Approx(2.0));
  RngHandle rng(70);
  const Vec a = random_vec(4, rng), b = random_vec(4, rng);
  CHECK(loss_eval(3.0 * a, 3.0 * b) == doctest::Approx(9.0 * loss_eval(a, b)).epsilon(1e-12));
}

TEST_CASE("terminal_conditions: exact gradient of the squared loss and zero g") {
  Vec x1(2), y0(2);
  x1 << 1.0, 0.0;
  y0 << 0.0, 0.0;
  const auto [p1, g1] = terminal_conditions(x1, y0, 5);
  CHECK(p1 == Vec(x1 - y0));
  CHECK(g1.rows() == 5);
  CHECK(g1.norm() == 0.0);
  const auto [pz, gz] = terminal_conditions(y0, y0, 3);
  CHECK(pz.norm() == 0.0);
  CHECK(gz.norm() == 0.0);
}

TEST_CASE("backward_integrate: terminal conditions stored bitwise") {
  RngHandle rng(71);
  const int d = 3, n = 4;
  const ParameterPath theta = make_path({"attention"}, d, 0.4, rng);
  const Vec x0 = random_vec(d, rng);
  const Ensemble mu0 = random_ensemble(n, d, rng);
  const Vec y0 = random_vec(d, rng);
  const Trajectory traj = integrate_forward(x0, mu0, theta, IntegratorConfig{Scheme::RK4, 4});
  const AdjointTrajectory adj = backward_integrate(traj, theta, y0);
  const int T = traj.steps();
  CHECK(adj.p_states[T] == Vec(output_token(traj) - y0));
  CHECK(adj.g_states[T].rows() == n);
  CHECK(adj.g_states[T].norm() == 0.0);
}

TEST_CASE("backward_integrate: zero parameters give constant p and zero g") {
  RngHandle rng(72);
  const int d = 3;
  const ParameterPath theta = zero_mlp_path(d, 2);
  const Vec x0 = random_vec(d, rng);
  const Ensemble mu0 = random_ensemble(4, d, rng);
  const Vec y0 = random_vec(d, rng);
  const Trajectory traj = integrate_forward(x0, mu0, theta, IntegratorConfig{Scheme::RK4, 4});
  const AdjointTrajectory adj = backward_integrate(traj, theta, y0);
  for (std::size_t t = 0; t < adj.p_states.size(); ++t) {
    CHECK(adj.p_states[t] == Vec(x0 - y0));
    CHECK(adj.g_states[t].norm() == 0.0);
  }
}

TEST_CASE("backward_integrate: MLP paths keep the measure adjoint at zero") {
  RngHandle rng(73);
  const int d = 3;
  const ParameterPath theta = make_path({"mlp", "mlp"}, d, 0.6, rng);
  const Trajectory traj = integrate_forward(random_vec(d, rng), random_ensemble(5, d, rng), theta,
                                            IntegratorConfig{Scheme::RK4, 8});
  const AdjointTrajectory adj = backward_integrate(traj, theta, random_vec(d, rng));
  for (const Mat& g : adj.g_states) CHECK(g.norm() == 0.0);
}

TEST_CASE("backward_integrate: discrete adjoint norm envelope (seeded attention case)") {
  RngHandle rng(42);
  const int d = 2, n = 3;
  const ParameterPath theta = make_path({"attention"}, d, 0.5, rng);
  const Vec x0 = random_vec(d, rng);
  const Ensemble mu0 = random_ensemble(n, d, rng);
  const Vec y0 = random_vec(d, rng);
  const Trajectory traj = integrate_forward(x0, mu0, theta, IntegratorConfig{Scheme::RK4, 16});
  const AdjointTrajectory adj = backward_integrate(traj, theta, y0);

  double lhat = 0.0;
  for (int t = 0; t <= traj.steps(); ++t)
    lhat = std::max(lhat,
                    opnorm(jac_x(theta.layers[0], traj.token(t), Ensemble(traj.particles(t)))));
  const double p1 = adj.p_states.back().norm();
  for (const Vec& p : adj.p_states) CHECK(p.norm() <= p1 * std::exp(lhat) + 1e-12);
}

TEST_CASE("backward_integrate: nearest-neighbor family is unsupported") {
  RngHandle rng(74);
  const int d = 2;
  ParameterPath theta;
  theta.layers.push_back(random_layer("nearest", d, 0.3, rng));
  const Trajectory traj = integrate_forward(random_vec(d, rng), random_ensemble(3, d, rng), theta,
                                            IntegratorConfig{Scheme::Euler, 2});
  CHECK_THROWS_AS(backward_integrate(traj, theta, random_vec(d, rng)), UnsupportedFamily);
}

TEST_CASE("assemble_gradient: zero adjoint gives a zero gradient") {
  RngHandle rng(75);
  const int d = 3;
  const ParameterPath theta = zero_mlp_path(d, 2);
  const Vec x0 = random_vec(d, rng);
  // x0 = y0 with zero parameters: x1 = y0, so p vanishes identically.
  const Trajectory traj = integrate_forward(x0, random_ensemble(4, d, rng), theta,
                                            IntegratorConfig{Scheme::RK4, 4});
  const AdjointTrajectory adj = backward_integrate(traj, theta, x0);
  const LossGradient grad = assemble_gradient(traj, adj, theta);
  CHECK(grad_norm(grad, PathNorm::Linf) == 0.0);
}

TEST_CASE("assemble_gradient: single-layer MLP with one Euler step is scalar backprop") {
  // d = 1, m = 1, L = 1: x1 = x0 + W1 gelu(W2 x0 + b) and h = 1, so the
  // gradient must equal the hand chain rule of the one-step loss.
  const double x0 = 0.7, y0 = -0.4, w1 = 0.8, w2 = -0.5, b = 0.3;
  MlpParams mlp;
  mlp.W1 = Mat::Constant(1, 1, w1);
  mlp.W2 = Mat::Constant(1, 1, w2);
  mlp.b = Vec::Constant(1, b);
  ParameterPath theta;
  theta.layers.push_back(mlp);

  Mat ctx(2, 1);
  ctx << 0.1, -0.2;  // MLP field ignores the context
  const Trajectory traj = integrate_forward(Vec::Constant(1, x0), Ensemble(ctx), theta,
                                            IntegratorConfig{Scheme::Euler, 1});
  const AdjointTrajectory adj = backward_integrate(traj, theta, Vec::Constant(1, y0));
  const LossGradient grad = assemble_gradient(traj, adj, theta);

  const double pre = w2 * x0 + b;
  const double x1 = x0 + w1 * gelu(pre);
  const double r = x1 - y0;
  const auto& g = std::get<MlpParams>(grad.blocks[0]);
  CHECK(traj.token(1)(0) == doctest::Approx(x1).epsilon(1e-14));
  CHECK(g.W1(0, 0) == doctest::Approx(r * gelu(pre)).epsilon(1e-12));
  CHECK(g.W2(0, 0) == doctest::Approx(r * w1 * gelu_prime(pre) * x0).epsilon(1e-12));
  CHECK(g.b(0) == doctest::Approx(r * w1 * gelu_prime(pre)).epsilon(1e-12));
}

TEST_CASE("assemble_gradient: directional FD oracle, attention d=3 n=8 L=2 m=8") {
  RngHandle rng(76);
  const int d = 3;
  const ParameterPath theta = make_path({"attention", "attention"}, d, 0.3, rng);
  const IntegratorConfig cfg{Scheme::RK4, 8};
  const Vec x0 = random_vec(d, rng, 0.5);
  const Ensemble mu0 = random_ensemble(8, d, rng, 0.5);
  const Vec y0 = random_vec(d, rng, 0.5);

  const LossGradient grad = pipeline_gradient(x0, mu0, y0, theta, cfg);
  const double eps = 1e-4;
  double sum_sq_diff = 0.0, sum_sq_fd = 0.0;
  std::vector<double> diffs, fds;
  for (int dir = 0; dir < 20; ++dir) {
    RngHandle drng = rng.child(100 + dir);
    ParameterPath eta = make_path({"attention", "attention"}, d, 1.0, drng);
    const double nrm = path_norm(eta, PathNorm::Linf);
    LossGradient eta_g = as_gradient(eta);
    // <grad, eta> pairs the layer-average blocks against the direction path.
    double pairing = 0.0;
    for (int l = 0; l < 2; ++l) {
      const auto& gb = std::get<AttentionParams>(grad.blocks[l]);
      const auto& eb = std::get<AttentionParams>(eta.layers[l]);
      pairing += ((gb.Q.array() * eb.Q.array()).sum() + (gb.K.array() * eb.K.array()).sum() +
                  (gb.V.array() * eb.V.array()).sum()) /
                 2.0;  // each layer occupies depth 1/L
    }
    const ParameterPath up = path_axpy(eps, eta_g, 1.0, theta);
    const ParameterPath dn = path_axpy(-eps, eta_g, 1.0, theta);
    const double fd = (pipeline_loss(x0, mu0, y0, up, cfg) - pipeline_loss(x0, mu0, y0, dn, cfg)) /
                      (2 * eps);
    diffs.push_back(pairing - fd);
    fds.push_back(fd);
    sum_sq_diff += (pairing - fd) * (pairing - fd);
    sum_sq_fd += fd * fd;
    (void)nrm;
  }
  // Aggregate relative error across all directions; single directions with a
  // near-zero directional derivative would inflate their own ratio, so the
  // per-direction check uses the rms derivative as a denominator floor.
  const double rms_fd = std::sqrt(sum_sq_fd / 20.0);
  for (std::size_t i = 0; i < diffs.size(); ++i)
    CHECK(std::abs(diffs[i]) / std::max(std::abs(fds[i]), rms_fd) <= 1e-3);
  CHECK(std::sqrt(sum_sq_diff) / std::max(std::sqrt(sum_sq_fd), 1e-10) <= 1e-3);
}

TEST_CASE("gradient_fd_check: zero-parameter MLP b-block and analytic value") {
  RngHandle rng(77);
  const int d = 2;
  const ParameterPath theta = zero_mlp_path(d, 1);
  Sample sample;
  sample.x0 = random_vec(d, rng);
  sample.y0 = sample.x0 + Vec::Ones(d);
  sample.context = random_ensemble(4, d, rng);
  // With W1 = 0 the velocity is zero for every b, so both the adjoint b-block
  // and the finite difference vanish.
  const LossGradient grad = pipeline_gradient(sample.x0, std::get<Ensemble>(sample.context),
                                              sample.y0, theta, IntegratorConfig{Scheme::RK4, 4});
  const auto& g = std::get<MlpParams>(grad.blocks[0]);
  CHECK(g.b.norm() == 0.0);
  CHECK(g.W2.norm() == 0.0);
  // W1 sees the (zero) activation of W2 x + b = 0 through gelu(0) = 0.
  CHECK(g.W1.norm() == 0.0);
  // Finite difference restricted to the b-block: W1 = 0 keeps the velocity at
  // zero for every b, so the loss is exactly flat along b directions.
  const double eps = 1e-4;
  for (int j = 0; j < d; ++j) {
    ParameterPath up = theta, dn = theta;
    std::get<MlpParams>(up.layers[0]).b(j) += eps;
    std::get<MlpParams>(dn.layers[0]).b(j) -= eps;
    const IntegratorConfig cfg{Scheme::RK4, 4};
    const Ensemble& mu = std::get<Ensemble>(sample.context);
    const double fd = (pipeline_loss(sample.x0, mu, sample.y0, up, cfg) -
                       pipeline_loss(sample.x0, mu, sample.y0, dn, cfg)) /
                      (2 * eps);
    CHECK(std::abs(g.b(j) - fd) <= 1e-6);
  }
}

TEST_CASE("gradient_fd_check: x1 = y0 makes both sides vanish") {
  RngHandle rng(78);
  const int d = 2;
  const ParameterPath theta = zero_mlp_path(d, 1);
  Sample sample;
  sample.x0 = random_vec(d, rng);
  sample.y0 = sample.x0;  // zero field keeps x1 = x0
  sample.context = random_ensemble(3, d, rng);
  const FdCheckReport report =
      gradient_fd_check(sample, theta, IntegratorConfig{Scheme::RK4, 4}, 3, rng.child(1), 4);
  // The adjoint gradient is exactly zero and the finite difference is pure
  // roundoff of order eps^2; the reported ratio sits on its 1e-10 floor.
  CHECK(report.max_rel_error <= 1e-6);
  CHECK(report.max_rel_error_refined <= 1e-6);
}

TEST_CASE("gradient_fd_check: attention default config and refinement factor") {
  RngHandle rng(79);
  const int d = 3;
  const ParameterPath theta = make_path({"attention"}, d, 0.4, rng);
  Sample sample;
  sample.x0 = random_vec(d, rng, 0.5);
  sample.y0 = random_vec(d, rng, 0.5);
  sample.context = random_ensemble(8, d, rng, 0.5);
  const FdCheckReport report =
      gradient_fd_check(sample, theta, IntegratorConfig{Scheme::Euler, 8}, 5, rng.child(2));
  CHECK(report.max_rel_error <= 1e-3);
  CHECK(report.per_direction.size() == 5);
  // Halving h shrinks the discretization error; require at least the
  // guaranteed first-order factor with margin, unless already at roundoff.
  if (report.max_rel_error > 1e-6)
    CHECK(report.max_rel_error_refined <= 0.55 * report.max_rel_error);
}

TEST_CASE("gradient_fd_check: order-2 consistency of the RK4 continuous adjoint") {
  RngHandle rng(80);
  const int d = 3;
  const ParameterPath theta = make_path({"attention"}, d, 0.5, rng);
  Sample sample;
  sample.x0 = random_vec(d, rng, 0.5);
  sample.y0 = random_vec(d, rng, 0.5);
  sample.context = random_ensemble(8, d, rng, 0.5);
  const FdCheckReport report =
      gradient_fd_check(sample, theta, IntegratorConfig{Scheme::RK4, 4}, 5, rng.child(3));
  // m = 4 is deliberately coarse so the order-2 shrink factor is visible.
  CHECK(report.max_rel_error <= 5e-2);
  if (report.max_rel_error > 1e-6)
    CHECK(report.max_rel_error_refined <= 0.3 * report.max_rel_error);
}

TEST_CASE("pipeline_gradient: permutation of particles leaves the gradient unchanged") {
  RngHandle rng(81);
  const int d = 3, n = 6;
  const ParameterPath theta = make_path({"attention"}, d, 0.5, rng);
  const Vec x0 = random_vec(d, rng);
  const Ensemble mu0 = random_ensemble(n, d, rng);
  Mat perm(n, d);
  for (int i = 0; i < n; ++i) perm.row(i) = mu0.particles.row((i + 1) % n);
  const Vec y0 = random_vec(d, rng);
  const IntegratorConfig cfg{Scheme::RK4, 4};
  const LossGradient ga = pipeline_gradient(x0, mu0, y0, theta, cfg);
  const LossGradient gb = pipeline_gradient(x0, Ensemble(perm), y0, theta, cfg);
  ParameterPath diff = path_axpy(-1.0, gb, 1.0, as_path(ga));
  CHECK(path_norm(diff, PathNorm::Linf) <= 1e-12);
}

TEST_CASE("pipeline_gradient: loss output parameter matches pipeline_loss") {
  RngHandle rng(82);
  const int d = 2;
  const ParameterPath theta = make_path({"mlp"}, d, 0.5, rng);
  const Vec x0 = random_vec(d, rng);
  const Ensemble mu0 = random_ensemble(3, d, rng);
  const Vec y0 = random_vec(d, rng);
  const IntegratorConfig cfg{Scheme::RK4, 4};
  double loss = -1.0;
  pipeline_gradient(x0, mu0, y0, theta, cfg, &loss);
  CHECK(loss == pipeline_loss(x0, mu0, y0, theta, cfg));
}
