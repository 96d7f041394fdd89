#include "cfmlab/adjoint.hpp"

#include <Eigen/SVD>
#include <cmath>

#include "cfmlab/velocity.hpp"

namespace cfmlab {

namespace {

// Backward right-hand side for the combined adjoint (row 0 = p, rows 1.. =
// g_i), with coefficient matrices evaluated at the given forward state.
Mat adjoint_rhs(const LayerParams& layer, const Mat& state, const Mat& adj) {
  const int n = static_cast<int>(state.rows()) - 1;
  const int d = static_cast<int>(state.cols());
  const Mat Z = state.bottomRows(n);

  if (const auto* att = std::get_if<AttentionParams>(&layer)) {
    const BatchedAttention ba = batched_attention(*att, state, Z);
    const Mat KtQ = att->K.transpose() * att->Q;

    // Transport: row r of -(M_r w_r)^T K^T Q with w_r = V^T adj_r.
    const Mat W = adj * att->V;                       // rows w_r^T
    const Mat C = W * Z.transpose();                  // (n+1) x n, C(r,j) = w_r . z_j
    const Vec rowdot = (ba.U.array() * W.array()).rowwise().sum();
    Mat MW = (ba.alpha.array() * C.array()).matrix() * Z;
    MW -= rowdot.asDiagonal() * ba.U;                 // rows (M_r w_r)^T
    Mat rhs = -(MW * KtQ);

    // Token source on the particles: -grad_W V[x](z_i)^T p. In the measure
    // convention alpha(x, z_i) is n times the softmax weight.
    const Vec wp = W.row(0).transpose();              // V^T p
    const Vec kqx = KtQ * state.row(0).transpose();
    const Vec alpha_x = static_cast<double>(n) * ba.alpha.row(0).transpose();
    const Vec ci =
        alpha_x.array() * ((Z.rowwise() - ba.U.row(0)) * wp).array();
    rhs.bottomRows(n).noalias() -= ci * kqx.transpose();
    rhs.bottomRows(n).noalias() -= alpha_x * wp.transpose();

    // Particle coupling: -(1/n) sum_j grad_W V[z_j](z_i)^T g_j. The measure
    // factor n in grad_W cancels the 1/n of the empirical average.
    const Mat alpha_p = ba.alpha.bottomRows(n);       // row j = softmax at z_j
    const Mat Wg = W.bottomRows(n);
    const Mat A = Z * KtQ.transpose();                // rows a_j^T = (K^T Q z_j)^T
    Mat B = Wg * Z.transpose();                       // B(j,i) = w_j . z_i
    B.colwise() -= rowdot.tail(n);
    B.array() *= alpha_p.array();
    rhs.bottomRows(n).noalias() -= B.transpose() * A + alpha_p.transpose() * Wg;
    return rhs;
  }

  if (const auto* mlp = std::get_if<MlpParams>(&layer)) {
    Mat pre = state * mlp->W2.transpose();
    pre.rowwise() += mlp->b.transpose();
    for (Eigen::Index i = 0; i < pre.size(); ++i) pre.data()[i] = gelu_prime(pre.data()[i]);
    // row r: -(adj_r^T W1 diag(s') W2)
    return -(((adj * mlp->W1).array() * pre.array()).matrix() * mlp->W2);
  }
  (void)d;
  throw UnsupportedFamily("backward_integrate: NearestNeighborDrift is not differentiable");
}

double op_norm(const Mat& m) {
  return Eigen::JacobiSVD<Mat>(m).singularValues()[0];
}

}  // namespace

double loss_eval(const Vec& x1, const Vec& y0) { return 0.5 * (x1 - y0).squaredNorm(); }

std::pair<Vec, Mat> terminal_conditions(const Vec& x1, const Vec& y0, int n) {
  return {x1 - y0, Mat::Zero(n, x1.size())};
}

AdjointTrajectory backward_integrate(const Trajectory& traj, const ParameterPath& theta,
                                     const Vec& y0) {
  const int T = traj.steps();
  const int n = traj.n();
  const double h = traj.step_size();

  std::vector<Mat> adj(T + 1);
  auto [p1, g1] = terminal_conditions(output_token(traj), y0, n);
  adj[T] = Mat(n + 1, traj.dim());
  adj[T].row(0) = p1.transpose();
  adj[T].bottomRows(n) = g1;

  const double p1_norm = p1.norm();
  double gronwall_exponent = 0.0;

  for (int t = T - 1; t >= 0; --t) {
    const LayerParams& params = theta.at_layer(traj.layer_of_step(t));
    const Mat& a = adj[t + 1];
    if (traj.cfg.scheme == Scheme::Euler) {
      // Exact discrete adjoint of the forward Euler step.
      adj[t] = a - h * adjoint_rhs(params, traj.states[t], a);
    } else {
      const auto& st = traj.stages[t];
      const Mat k1 = adjoint_rhs(params, traj.states[t + 1], a);
      const Mat k2 = adjoint_rhs(params, st[2], a - 0.5 * h * k1);
      const Mat k3 = adjoint_rhs(params, st[1], a - 0.5 * h * k2);
      const Mat k4 = adjoint_rhs(params, st[0], a - h * k3);
      adj[t] = a - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!adj[t].allFinite())
      throw NonFiniteState("backward_integrate: non-finite adjoint at step " + std::to_string(t));

    // Discrete Gronwall envelope on the token adjoint.
    const Ensemble mu_t(traj.particles(t));
    const Ensemble mu_t1(traj.particles(t + 1));
    const double jn = std::max(op_norm(jac_x(params, traj.token(t), mu_t)),
                               op_norm(jac_x(params, traj.token(t + 1), mu_t1)));
    gronwall_exponent += h * jn;
    const double bound = p1_norm * std::exp(gronwall_exponent);
    if (adj[t].row(0).norm() > bound * (1.0 + 1e-6) + 1e-12)
      throw BoundViolation("backward_integrate: |p| exceeds Gronwall envelope at step " +
                           std::to_string(t));
  }

  AdjointTrajectory out;
  out.p_states.resize(T + 1);
  out.g_states.resize(T + 1);
  for (int t = 0; t <= T; ++t) {
    out.p_states[t] = adj[t].row(0).transpose();
    out.g_states[t] = adj[t].bottomRows(n);
  }
  return out;
}

namespace {

// Integrand of the gradient formula at one grid node: the theta-shaped block
// D_theta V(x,mu)^T p + (1/n) sum_i D_theta V(z_i,mu)^T g_i, batched over
// particles.
LayerParams gradient_integrand(const LayerParams& layer, const Mat& state, const Vec& p,
                               const Mat& G) {
  const int n = static_cast<int>(state.rows()) - 1;
  const Mat Z = state.bottomRows(n);
  const Vec x = state.row(0).transpose();
  const Ensemble mu(Z);
  LayerParams block = jac_theta_transpose_apply(layer, x, mu, p);

  if (const auto* att = std::get_if<AttentionParams>(&layer)) {
    const BatchedAttention ba = batched_attention(*att, Z, Z);
    const Mat W = G * att->V;                  // rows V^T g_i
    const Mat C = W * Z.transpose();
    const Vec rowdot = (ba.U.array() * W.array()).rowwise().sum();
    Mat MW = (ba.alpha.array() * C.array()).matrix() * Z;
    MW -= rowdot.asDiagonal() * ba.U;          // rows (M_i V^T g_i)^T
    auto& gb = std::get<AttentionParams>(block);
    const double inv_n = 1.0 / n;
    gb.V.noalias() += inv_n * (G.transpose() * ba.U);
    gb.Q.noalias() += inv_n * (att->K * (MW.transpose() * Z));
    gb.K.noalias() += inv_n * ((att->Q * Z.transpose()) * MW);
    return block;
  }
  const auto& mlp = std::get<MlpParams>(layer);
  Mat pre = Z * mlp.W2.transpose();
  pre.rowwise() += mlp.b.transpose();
  Mat act = pre;
  for (Eigen::Index i = 0; i < pre.size(); ++i) {
    act.data()[i] = gelu(pre.data()[i]);
    pre.data()[i] = gelu_prime(pre.data()[i]);
  }
  const Mat back = ((G * mlp.W1).array() * pre.array()).matrix();
  auto& gb = std::get<MlpParams>(block);
  const double inv_n = 1.0 / n;
  gb.W1.noalias() += inv_n * (G.transpose() * act);
  gb.W2.noalias() += inv_n * (back.transpose() * Z);
  gb.b.noalias() += inv_n * back.colwise().sum().transpose();
  return block;
}

}  // namespace

LossGradient assemble_gradient(const Trajectory& traj, const AdjointTrajectory& adj,
                               const ParameterPath& theta) {
  const int T = traj.steps();
  if (static_cast<int>(adj.p_states.size()) != T + 1)
    throw std::invalid_argument("assemble_gradient: grid mismatch");
  const int m = traj.cfg.substeps;
  LossGradient grad = zero_gradient(theta);

  if (traj.cfg.scheme == Scheme::Euler) {
    // Left-point states with right-node adjoints: exact Euler backprop.
    for (int t = 0; t < T; ++t) {
      const int l = traj.layer_of_step(t);
      const LayerParams integrand = gradient_integrand(
          theta.at_layer(l), traj.states[t], adj.p_states[t + 1], adj.g_states[t + 1]);
      grad.blocks[l] = block_axpy(1.0 / m, integrand, 1.0, grad.blocks[l]);
    }
    return grad;
  }

  for (int l = 0; l < theta.num_layers(); ++l) {
    for (int k = 0; k <= m; ++k) {
      const int t = l * m + k;
      const double w = (k == 0 || k == m) ? 0.5 / m : 1.0 / m;
      const LayerParams integrand = gradient_integrand(theta.at_layer(l), traj.states[t],
                                                       adj.p_states[t], adj.g_states[t]);
      grad.blocks[l] = block_axpy(w, integrand, 1.0, grad.blocks[l]);
    }
  }
  return grad;
}

double pipeline_loss(const Vec& x0, const Ensemble& mu0, const Vec& y0,
                     const ParameterPath& theta, const IntegratorConfig& cfg) {
  return loss_eval(output_token(integrate_forward(x0, mu0, theta, cfg)), y0);
}

LossGradient pipeline_gradient(const Vec& x0, const Ensemble& mu0, const Vec& y0,
                               const ParameterPath& theta, const IntegratorConfig& cfg,
                               double* loss_out) {
  const Trajectory traj = integrate_forward(x0, mu0, theta, cfg);
  if (loss_out) *loss_out = loss_eval(output_token(traj), y0);
  const AdjointTrajectory adj = backward_integrate(traj, theta, y0);
  return assemble_gradient(traj, adj, theta);
}

namespace {

// Unit-norm random direction with theta's schedule (global Euclidean norm
// over all blocks).
LossGradient random_direction(const ParameterPath& theta, RngHandle& rng) {
  LossGradient eta = zero_gradient(theta);
  double sq = 0.0;
  for (auto& block : eta.blocks) {
    auto fill = [&](auto& mat) {
      for (Eigen::Index i = 0; i < mat.size(); ++i) {
        mat.data()[i] = rng.normal();
        sq += mat.data()[i] * mat.data()[i];
      }
    };
    if (auto* a = std::get_if<AttentionParams>(&block)) {
      fill(a->Q);
      fill(a->K);
      fill(a->V);
    } else if (auto* mp = std::get_if<MlpParams>(&block)) {
      fill(mp->W1);
      fill(mp->W2);
      fill(mp->b);
    }
  }
  const double nrm = std::sqrt(sq);
  for (auto& block : eta.blocks) block = block_axpy(0.0, block, 1.0 / nrm, block);
  return eta;
}

double pairing(const LossGradient& grad, const LossGradient& eta) {
  // Frechet pairing for piecewise-constant paths: (1/L) sum_l <block, eta>.
  auto dot = [](const LayerParams& a, const LayerParams& b) -> double {
    if (const auto* aa = std::get_if<AttentionParams>(&a)) {
      const auto& bb = std::get<AttentionParams>(b);
      return aa->Q.cwiseProduct(bb.Q).sum() + aa->K.cwiseProduct(bb.K).sum() +
             aa->V.cwiseProduct(bb.V).sum();
    }
    const auto& am = std::get<MlpParams>(a);
    const auto& bm = std::get<MlpParams>(b);
    return am.W1.cwiseProduct(bm.W1).sum() + am.W2.cwiseProduct(bm.W2).sum() + am.b.dot(bm.b);
  };
  double acc = 0.0;
  for (std::size_t l = 0; l < grad.blocks.size(); ++l) acc += dot(grad.blocks[l], eta.blocks[l]);
  return acc / static_cast<double>(grad.blocks.size());
}

}  // namespace

FdCheckReport gradient_fd_check(const Sample& sample, const ParameterPath& theta,
                                const IntegratorConfig& cfg, int directions, RngHandle rng,
                                int context_n) {
  if (directions < 1) throw std::invalid_argument("gradient_fd_check: directions >= 1");
  Ensemble mu0;
  if (const auto* pop = std::get_if<PopulationSpec>(&sample.context)) {
    RngHandle ctx_rng = rng.child(0xC0);
    mu0 = sample_ensemble(*pop, context_n, ctx_rng);
  } else {
    mu0 = std::get<Ensemble>(sample.context);
  }

  std::vector<LossGradient> dirs;
  RngHandle dir_rng = rng.child(0xD1);
  for (int i = 0; i < directions; ++i) dirs.push_back(random_direction(theta, dir_rng));

  const double eps = 1e-4;
  FdCheckReport report;
  // Headline error: l2 ratio across directions, so a single direction with a
  // near-zero directional derivative cannot inflate it; per_direction keeps
  // the direction-wise relative errors for diagnostics.
  auto run_at = [&](int substeps, std::vector<double>* per_dir) -> double {
    IntegratorConfig c = cfg;
    c.substeps = substeps;
    const LossGradient grad = pipeline_gradient(sample.x0, mu0, sample.y0, theta, c);
    double num2 = 0.0, den2 = 0.0;
    for (const auto& eta : dirs) {
      const double adj = pairing(grad, eta);
      const ParameterPath tp = path_axpy(eps, eta, 1.0, theta);
      const ParameterPath tm = path_axpy(-eps, eta, 1.0, theta);
      const double fd = (pipeline_loss(sample.x0, mu0, sample.y0, tp, c) -
                         pipeline_loss(sample.x0, mu0, sample.y0, tm, c)) /
                        (2.0 * eps);
      const double scale = std::max({std::abs(adj), std::abs(fd), 1e-10});
      if (per_dir) per_dir->push_back(std::abs(adj - fd) / scale);
      num2 += (adj - fd) * (adj - fd);
      den2 += fd * fd;
    }
    return std::sqrt(num2) / std::max(std::sqrt(den2), 1e-10);
  };

  report.max_rel_error = run_at(cfg.substeps, &report.per_direction);
  report.max_rel_error_refined = run_at(2 * cfg.substeps, nullptr);
  return report;
}

}  // namespace cfmlab
