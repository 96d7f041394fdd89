#pragma once

#include "cfmlab/rng.hpp"
#include "cfmlab/types.hpp"

namespace cfmlab {

/// Optimal coupling between two uniform empirical measures. Masses are kept
/// as integers scaled by lcm(n_A, n_B) internally and reported as fractions.
struct TransportPlan {
  struct Flow {
    int i, j;
    double mass;
  };
  std::vector<Flow> flows;
  double cost = 0.0;
};

/// Exact 1-Wasserstein distance between uniform empirical measures, by
/// successive-shortest-path min-cost flow on the complete bipartite graph.
/// Throws std::invalid_argument when n_A * n_B > 2^22 (use w1_sliced).
std::pair<double, TransportPlan> w1_exact(const Ensemble& a, const Ensemble& b);

inline constexpr long kW1ExactPairCap = 1L << 22;

/// Exact 1D W1 between sorted-projection samples (quantile formula).
double w1_1d(std::vector<double> a, std::vector<double> b);

/// Sliced W1: average over random unit directions of the 1D W1 between
/// projections. A lower bound on the exact distance; reported separately,
/// never substituted for exact W1 silently.
double w1_sliced(const Ensemble& a, const Ensemble& b, int projections, RngHandle& rng);

/// Log-log OLS fit of value against n; slope estimates the rate exponent.
struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  std::vector<std::pair<double, double>> points;  // (ln n, ln value)
};

/// Requires >= 3 distinct n and strictly positive values.
RateFit fit_rate(const std::vector<std::pair<int, double>>& points);

}  // namespace cfmlab
