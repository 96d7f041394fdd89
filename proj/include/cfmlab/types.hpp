#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "cfmlab/rng.hpp"

namespace cfmlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// n equal-weight particles in R^d, one per row. Represents the empirical
/// measure (1/n) sum_i delta_{z_i}.
struct Ensemble {
  Mat particles;  // n x d

  Ensemble() = default;
  explicit Ensemble(Mat p) : particles(std::move(p)) {}

  int n() const { return static_cast<int>(particles.rows()); }
  int dim() const { return static_cast<int>(particles.cols()); }
  Vec particle(int i) const { return particles.row(i).transpose(); }
  Vec mean() const { return particles.colwise().mean().transpose(); }
  double max_norm() const { return n() == 0 ? 0.0 : particles.rowwise().norm().maxCoeff(); }
};

// ---------------------------------------------------------------------------
// Layer parameter families

struct AttentionParams {
  Mat Q, K, V;  // d x d each
};

struct MlpParams {
  Mat W1, W2;  // d x d
  Vec b;       // d
};

/// Drift toward the nearest context particle. Not a kernel-form family and
/// not differentiable; forward evaluation only.
struct NearestNeighborParams {
  Mat A;  // d x d
};

using LayerParams = std::variant<AttentionParams, MlpParams, NearestNeighborParams>;

int layer_dim(const LayerParams& layer);
/// Euclidean norm of the flattened parameter block.
double block_norm(const LayerParams& layer);
/// Blockwise a*x + b*y; both blocks must share family and dimensions.
LayerParams block_axpy(double a, const LayerParams& x, double b, const LayerParams& y);
LayerParams zero_like(const LayerParams& layer);
bool same_schedule(const LayerParams& a, const LayerParams& b);

// ---------------------------------------------------------------------------
// Parameter paths

enum class PathNorm { L1, Linf };

/// Piecewise-constant parameter path over depth [0,1]: layer l is in force on
/// s in [l/L, (l+1)/L).
struct ParameterPath {
  std::vector<LayerParams> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }
  int dim() const { return layers.empty() ? 0 : layer_dim(layers.front()); }
  const LayerParams& at_layer(int l) const { return layers.at(l); }
};

/// Path-shaped gradient: one block per layer, the in-layer average of the
/// Frechet derivative of the loss over that layer's depth interval.
struct LossGradient {
  std::vector<LayerParams> blocks;

  int num_layers() const { return static_cast<int>(blocks.size()); }
};

bool same_schedule(const ParameterPath& a, const ParameterPath& b);
bool same_schedule(const LossGradient& g, const ParameterPath& t);

/// b*theta + a*g blockwise. Throws std::invalid_argument on schedule mismatch.
ParameterPath path_axpy(double a, const LossGradient& g, double b, const ParameterPath& theta);

/// L1 = (1/L) sum_l |theta_l|, Linf = max_l |theta_l| (exact for
/// piecewise-constant paths).
double path_norm(const ParameterPath& theta, PathNorm which);
double grad_norm(const LossGradient& g, PathNorm which);

LossGradient zero_gradient(const ParameterPath& theta);
LossGradient as_gradient(const ParameterPath& theta);
ParameterPath as_path(const LossGradient& g);

// ---------------------------------------------------------------------------
// Population measures (compact support of radius R)

struct UniformBall {
  double radius;
};

struct TruncatedGaussian {
  double sigma;
  double radius;
};

struct MixtureOfPointClusters {
  std::vector<Vec> centers;
  double spread;
  double radius;
};

struct PopulationSpec {
  std::variant<UniformBall, TruncatedGaussian, MixtureOfPointClusters> kind;
  int dim;

  double radius() const;
};

/// n i.i.d. draws from the population. Every particle satisfies |z| <= R;
/// truncation is by rejection, capped at 1e6 resamples per particle.
Ensemble sample_ensemble(const PopulationSpec& spec, int n, RngHandle& rng);

/// One draw from the population (a single context particle's law).
Vec sample_point(const PopulationSpec& spec, RngHandle& rng);

// ---------------------------------------------------------------------------
// Training samples

/// Observation triple (x0, context, y0). The context is either a population
/// law to be sampled per use or an explicit particle ensemble.
struct Sample {
  Vec x0;
  std::variant<PopulationSpec, Ensemble> context;
  Vec y0;
};

}  // namespace cfmlab
