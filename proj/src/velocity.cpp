#include "cfmlab/velocity.hpp"

#include <cmath>
#include <numbers>

namespace cfmlab {

double gelu(double t) { return 0.5 * t * (1.0 + std::erf(t / std::numbers::sqrt2)); }

double gelu_prime(double t) {
  const double cdf = 0.5 * (1.0 + std::erf(t / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + t * pdf;
}

namespace {

void check_nonempty(const Ensemble& mu) {
  if (mu.n() < 1) throw std::invalid_argument("velocity: empty ensemble");
}

Vec mlp_pre(const MlpParams& mlp, const Vec& x) { return mlp.W2 * x + mlp.b; }

Vec gelu_vec(const Vec& u) {
  Vec out(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) out[i] = gelu(u[i]);
  return out;
}

Vec gelu_prime_vec(const Vec& u) {
  Vec out(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) out[i] = gelu_prime(u[i]);
  return out;
}

int nearest_index(const Mat& Z, const Vec& x) {
  int best = 0;
  double best_d = (Z.row(0).transpose() - x).squaredNorm();
  for (int i = 1; i < Z.rows(); ++i) {
    const double d = (Z.row(i).transpose() - x).squaredNorm();
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = i;
    }
  }
  return best;
}

}  // namespace

double AttentionCache::weight_at(const AttentionParams& att, const Vec& x, const Vec& z) const {
  // Measure convention: the normalizer is the integral (1/n) sum_i e^{l_i},
  // so alpha(x, z) is n times the softmax weight a particle at z would get.
  const double logit = (att.Q * x).dot(att.K * z);
  return static_cast<double>(logits.size()) * std::exp(logit - max_logit) / Z;
}

AttentionCache attention_cache(const AttentionParams& att, const Vec& x, const Ensemble& mu) {
  check_nonempty(mu);
  AttentionCache c;
  c.logits = mu.particles * (att.K.transpose() * (att.Q * x));
  c.max_logit = c.logits.maxCoeff();
  c.weights = (c.logits.array() - c.max_logit).exp();
  c.Z = c.weights.sum();
  c.weights /= c.Z;
  c.U = mu.particles.transpose() * c.weights;
  const Mat centered = mu.particles.rowwise() - c.U.transpose();
  c.Mmat = centered.transpose() * c.weights.asDiagonal() * centered;
  return c;
}

BatchedAttention batched_attention(const AttentionParams& att, const Mat& P, const Mat& Z) {
  if (Z.rows() < 1) throw std::invalid_argument("velocity: empty ensemble");
  BatchedAttention b;
  Mat logits = (P * att.Q.transpose()) * (Z * att.K.transpose()).transpose();  // m x n
  const Vec row_max = logits.rowwise().maxCoeff();
  logits.colwise() -= row_max;
  b.alpha = logits.array().exp();
  const Vec row_sum = b.alpha.rowwise().sum();
  b.alpha.array().colwise() /= row_sum.array();
  b.U = b.alpha * Z;
  return b;
}

Mat batched_velocity(const LayerParams& layer, const Mat& P, const Mat& Z) {
  if (const auto* att = std::get_if<AttentionParams>(&layer)) {
    return batched_attention(*att, P, Z).U * att->V.transpose();
  }
  if (const auto* mlp = std::get_if<MlpParams>(&layer)) {
    Mat pre = P * mlp->W2.transpose();
    pre.rowwise() += mlp->b.transpose();
    for (Eigen::Index i = 0; i < pre.size(); ++i) pre.data()[i] = gelu(pre.data()[i]);
    return pre * mlp->W1.transpose();
  }
  const auto& nn = std::get<NearestNeighborParams>(layer);
  if (Z.rows() < 1) throw std::invalid_argument("velocity: empty ensemble");
  Mat out(P.rows(), P.cols());
  for (int i = 0; i < P.rows(); ++i) {
    const Vec x = P.row(i).transpose();
    out.row(i) = (nn.A * (Z.row(nearest_index(Z, x)).transpose() - x)).transpose();
  }
  return out;
}

Vec eval_velocity(const LayerParams& layer, const Vec& x, const Ensemble& mu) {
  check_nonempty(mu);
  return batched_velocity(layer, x.transpose(), mu.particles).row(0).transpose();
}

Vec flat_derivative(const LayerParams& layer, const Vec& x, const Ensemble& mu, const Vec& z) {
  if (const auto* att = std::get_if<AttentionParams>(&layer)) {
    const AttentionCache c = attention_cache(*att, x, mu);
    return c.weight_at(*att, x, z) * (att->V * (z - c.U));
  }
  if (std::holds_alternative<MlpParams>(layer)) return Vec::Zero(x.size());
  throw UnsupportedFamily("flat_derivative: NearestNeighborDrift has no flat derivative");
}

Mat jac_x(const LayerParams& layer, const Vec& x, const Ensemble& mu) {
  if (const auto* att = std::get_if<AttentionParams>(&layer)) {
    const AttentionCache c = attention_cache(*att, x, mu);
    return att->V * c.Mmat * att->K.transpose() * att->Q;
  }
  if (const auto* mlp = std::get_if<MlpParams>(&layer)) {
    const Vec sp = gelu_prime_vec(mlp_pre(*mlp, x));
    return mlp->W1 * sp.asDiagonal() * mlp->W2;
  }
  throw UnsupportedFamily("jac_x: NearestNeighborDrift is not differentiable");
}

Mat wasserstein_jac(const LayerParams& layer, const Vec& x, const Ensemble& mu, const Vec& z) {
  if (const auto* att = std::get_if<AttentionParams>(&layer)) {
    const AttentionCache c = attention_cache(*att, x, mu);
    const double a = c.weight_at(*att, x, z);
    const Vec kqx = att->K.transpose() * (att->Q * x);
    return a * ((att->V * (z - c.U)) * kqx.transpose() + att->V);
  }
  if (std::holds_alternative<MlpParams>(layer)) return Mat::Zero(x.size(), x.size());
  throw UnsupportedFamily("wasserstein_jac: NearestNeighborDrift is not differentiable");
}

LayerParams jac_theta_transpose_apply(const LayerParams& layer, const Vec& x, const Ensemble& mu,
                                      const Vec& p) {
  if (const auto* att = std::get_if<AttentionParams>(&layer)) {
    const AttentionCache c = attention_cache(*att, x, mu);
    const Vec mvp = c.Mmat * (att->V.transpose() * p);
    AttentionParams g;
    g.V = p * c.U.transpose();
    g.Q = (att->K * mvp) * x.transpose();
    g.K = (att->Q * x) * mvp.transpose();
    return g;
  }
  if (const auto* mlp = std::get_if<MlpParams>(&layer)) {
    const Vec pre = mlp_pre(*mlp, x);
    const Vec act = gelu_vec(pre);
    const Vec back = gelu_prime_vec(pre).asDiagonal() * (mlp->W1.transpose() * p);
    MlpParams g;
    g.W1 = p * act.transpose();
    g.W2 = back * x.transpose();
    g.b = back;
    return g;
  }
  throw UnsupportedFamily("jac_theta_transpose_apply: NearestNeighborDrift is not differentiable");
}

Vec kernel_form_eval(const LayerParams& layer, const Vec& x, const Ensemble& mu) {
  const auto* att = std::get_if<AttentionParams>(&layer);
  if (!att) throw UnsupportedFamily("kernel_form_eval: attention family only");
  check_nonempty(mu);
  const Vec logits = mu.particles * (att->K.transpose() * (att->Q * x));
  const double max_logit = logits.maxCoeff();
  // w = (1/n) sum_i (e^{l_i - max} V z_i, e^{l_i - max}); output head(w)/w_{d+1}.
  const int d = static_cast<int>(x.size());
  Vec w = Vec::Zero(d + 1);
  for (int i = 0; i < mu.n(); ++i) {
    const double e = std::exp(logits[i] - max_logit);
    w.head(d) += e * (att->V * mu.particle(i));
    w[d] += e;
  }
  w /= static_cast<double>(mu.n());
  return w.head(d) / w[d];
}

}  // namespace cfmlab
