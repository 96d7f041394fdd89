#pragma once

#include "cfmlab/types.hpp"

namespace cfmlab {

/// Raised when a derivative object is requested for a family that does not
/// support it (NearestNeighborDrift is forward-only).
struct UnsupportedFamily : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// GELU in exact erf form, its derivative, and the global derivative bound
/// sup_t |gelu'(t)| used by the MLP Jacobian audit.
double gelu(double t);
double gelu_prime(double t);
inline constexpr double kGeluDerivBound = 1.1289042;  // attained at t = sqrt(2)

/// Softmax state of one attention evaluation at token x against ensemble mu:
/// logits <Qx, Kz_i>, weights alpha (max-subtracted softmax), attention mean
/// U = sum alpha_i z_i and centered second moment
/// Mmat = sum alpha_i (z_i - U)(z_i - U)^T.
struct AttentionCache {
  Vec logits;
  Vec weights;
  Vec U;
  Mat Mmat;
  double max_logit = 0.0;
  double Z = 0.0;  // sum_i exp(logit_i - max_logit)

  /// Weight alpha(x, z) for an arbitrary point z, sharing this normalizer.
  double weight_at(const AttentionParams& att, const Vec& x, const Vec& z) const;
};

AttentionCache attention_cache(const AttentionParams& att, const Vec& x, const Ensemble& mu);

/// Velocity field V(x, mu; theta) of the layer's family.
Vec eval_velocity(const LayerParams& layer, const Vec& x, const Ensemble& mu);

/// Flat derivative dV/dmu[x, mu](z). Attention: alpha(x,z) V (z - U(x));
/// MLP: zero (no measure dependence).
Vec flat_derivative(const LayerParams& layer, const Vec& x, const Ensemble& mu, const Vec& z);

/// Spatial Jacobian D_x V. Attention: V M(x) K^T Q; MLP: W1 diag(s') W2.
Mat jac_x(const LayerParams& layer, const Vec& x, const Ensemble& mu);

/// Wasserstein Jacobian grad_W V(z) = D_z of the flat derivative.
/// Attention: alpha(x,z) [V (z - U(x)) (K^T Q x)^T + V]; MLP: zero.
Mat wasserstein_jac(const LayerParams& layer, const Vec& x, const Ensemble& mu, const Vec& z);

/// Theta-shaped block G with <G, dtheta> = <p, D_theta V . dtheta> for every
/// parameter direction dtheta.
LayerParams jac_theta_transpose_apply(const LayerParams& layer, const Vec& x, const Ensemble& mu,
                                      const Vec& p);

/// Attention velocity through the kernel decomposition
/// F(int F(x,y) dmu) with F(x,y) = (e^{<Qx,Ky>} V y, e^{<Qx,Ky>}) and
/// F(w) = head(w)/w_{d+1}, max-logit guarded. Agrees with eval_velocity
/// to roundoff.
Vec kernel_form_eval(const LayerParams& layer, const Vec& x, const Ensemble& mu);

// ---------------------------------------------------------------------------
// Batched kernels. Rows of P are evaluation points, rows of Z particles.
// The scalar operations above are thin wrappers over these, so the single-
// point and whole-system paths compute identical values.

struct BatchedAttention {
  Mat alpha;  // m x n rowwise softmax of P Q^T K Z^T
  Mat U;      // m x d attention means
};

BatchedAttention batched_attention(const AttentionParams& att, const Mat& P, const Mat& Z);

/// Velocities of all points in P against context Z, one per row.
Mat batched_velocity(const LayerParams& layer, const Mat& P, const Mat& Z);

}  // namespace cfmlab
