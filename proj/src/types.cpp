#include "cfmlab/types.hpp"

#include <cmath>

namespace cfmlab {

namespace {

double sq(double x) { return x * x; }

}  // namespace

int layer_dim(const LayerParams& layer) {
  return std::visit(
      [](const auto& l) -> int {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, AttentionParams>) return static_cast<int>(l.Q.rows());
        else if constexpr (std::is_same_v<T, MlpParams>) return static_cast<int>(l.W1.rows());
        else return static_cast<int>(l.A.rows());
      },
      layer);
}

double block_norm(const LayerParams& layer) {
  return std::visit(
      [](const auto& l) -> double {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, AttentionParams>)
          return std::sqrt(sq(l.Q.norm()) + sq(l.K.norm()) + sq(l.V.norm()));
        else if constexpr (std::is_same_v<T, MlpParams>)
          return std::sqrt(sq(l.W1.norm()) + sq(l.W2.norm()) + sq(l.b.norm()));
        else
          return l.A.norm();
      },
      layer);
}

bool same_schedule(const LayerParams& a, const LayerParams& b) {
  return a.index() == b.index() && layer_dim(a) == layer_dim(b);
}

LayerParams block_axpy(double a, const LayerParams& x, double b, const LayerParams& y) {
  if (!same_schedule(x, y)) throw std::invalid_argument("block_axpy: family/dimension mismatch");
  if (const auto* xa = std::get_if<AttentionParams>(&x)) {
    const auto& ya = std::get<AttentionParams>(y);
    return AttentionParams{a * xa->Q + b * ya.Q, a * xa->K + b * ya.K, a * xa->V + b * ya.V};
  }
  if (const auto* xm = std::get_if<MlpParams>(&x)) {
    const auto& ym = std::get<MlpParams>(y);
    return MlpParams{a * xm->W1 + b * ym.W1, a * xm->W2 + b * ym.W2, a * xm->b + b * ym.b};
  }
  const auto& xn = std::get<NearestNeighborParams>(x);
  const auto& yn = std::get<NearestNeighborParams>(y);
  return NearestNeighborParams{a * xn.A + b * yn.A};
}

LayerParams zero_like(const LayerParams& layer) { return block_axpy(0.0, layer, 0.0, layer); }

bool same_schedule(const ParameterPath& a, const ParameterPath& b) {
  if (a.num_layers() != b.num_layers()) return false;
  for (int l = 0; l < a.num_layers(); ++l)
    if (!same_schedule(a.layers[l], b.layers[l])) return false;
  return true;
}

bool same_schedule(const LossGradient& g, const ParameterPath& t) {
  if (g.num_layers() != t.num_layers()) return false;
  for (int l = 0; l < t.num_layers(); ++l)
    if (!same_schedule(g.blocks[l], t.layers[l])) return false;
  return true;
}

ParameterPath path_axpy(double a, const LossGradient& g, double b, const ParameterPath& theta) {
  if (!same_schedule(g, theta)) throw std::invalid_argument("path_axpy: schedule mismatch");
  ParameterPath out;
  out.layers.reserve(theta.layers.size());
  for (int l = 0; l < theta.num_layers(); ++l)
    out.layers.push_back(block_axpy(a, g.blocks[l], b, theta.layers[l]));
  return out;
}

double path_norm(const ParameterPath& theta, PathNorm which) {
  double acc = 0.0;
  for (const auto& layer : theta.layers) {
    const double nrm = block_norm(layer);
    acc = which == PathNorm::L1 ? acc + nrm : std::max(acc, nrm);
  }
  if (which == PathNorm::L1 && !theta.layers.empty())
    acc /= static_cast<double>(theta.num_layers());
  return acc;
}

double grad_norm(const LossGradient& g, PathNorm which) {
  ParameterPath p;
  p.layers = g.blocks;
  return path_norm(p, which);
}

LossGradient zero_gradient(const ParameterPath& theta) {
  LossGradient g;
  g.blocks.reserve(theta.layers.size());
  for (const auto& layer : theta.layers) g.blocks.push_back(zero_like(layer));
  return g;
}

LossGradient as_gradient(const ParameterPath& theta) { return LossGradient{theta.layers}; }

ParameterPath as_path(const LossGradient& g) { return ParameterPath{g.blocks}; }

// ---------------------------------------------------------------------------

double PopulationSpec::radius() const {
  return std::visit([](const auto& k) { return k.radius; }, kind);
}

namespace {

Vec uniform_in_ball(int d, double radius, RngHandle& rng) {
  // Gaussian direction scaled by U^{1/d}.
  Vec g(d);
  for (int i = 0; i < d; ++i) g[i] = rng.normal();
  const double nrm = g.norm();
  if (nrm == 0.0) return Vec::Zero(d);
  const double r = radius * std::pow(rng.uniform01(), 1.0 / d);
  return g * (r / nrm);
}

constexpr int kMaxResamples = 1'000'000;

Vec truncated_gaussian(int d, double sigma, double radius, RngHandle& rng) {
  for (int attempt = 0; attempt < kMaxResamples; ++attempt) {
    Vec g(d);
    for (int i = 0; i < d; ++i) g[i] = sigma * rng.normal();
    if (g.norm() <= radius) return g;
  }
  throw std::runtime_error("truncated_gaussian: rejection cap exceeded (sigma too large for radius)");
}

}  // namespace

Vec sample_point(const PopulationSpec& spec, RngHandle& rng) {
  if (const auto* ub = std::get_if<UniformBall>(&spec.kind))
    return uniform_in_ball(spec.dim, ub->radius, rng);
  if (const auto* tg = std::get_if<TruncatedGaussian>(&spec.kind))
    return truncated_gaussian(spec.dim, tg->sigma, tg->radius, rng);
  const auto& mix = std::get<MixtureOfPointClusters>(spec.kind);
  if (mix.centers.empty()) throw std::invalid_argument("sample_point: empty mixture");
  const auto c = static_cast<std::size_t>(rng.uniform_below(mix.centers.size()));
  const Vec& center = mix.centers[c];
  if (mix.spread == 0.0) return center;
  for (int attempt = 0; attempt < kMaxResamples; ++attempt) {
    Vec g(spec.dim);
    for (int i = 0; i < spec.dim; ++i) g[i] = center[i] + mix.spread * rng.normal();
    if (g.norm() <= mix.radius) return g;
  }
  throw std::runtime_error("sample_point: mixture rejection cap exceeded");
}

Ensemble sample_ensemble(const PopulationSpec& spec, int n, RngHandle& rng) {
  if (n < 1) throw std::invalid_argument("sample_ensemble: n must be >= 1");
  Mat pts(n, spec.dim);
  for (int i = 0; i < n; ++i) pts.row(i) = sample_point(spec, rng).transpose();
  return Ensemble(std::move(pts));
}

}  // namespace cfmlab
