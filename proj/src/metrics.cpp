#include "cfmlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>

namespace cfmlab {

std::pair<double, TransportPlan> w1_exact(const Ensemble& a, const Ensemble& b) {
  const int na = a.n();
  const int nb = b.n();
  if (na < 1 || nb < 1) throw std::invalid_argument("w1_exact: empty ensemble");
  if (a.dim() != b.dim()) throw std::invalid_argument("w1_exact: dimension mismatch");
  if (static_cast<long>(na) * nb > kW1ExactPairCap)
    throw std::invalid_argument("w1_exact: size cap exceeded, use w1_sliced");

  // Integer masses: scale by lcm(na, nb).
  const long scale = std::lcm(static_cast<long>(na), static_cast<long>(nb));
  const long per_a = scale / na;
  const long per_b = scale / nb;

  // Pairwise costs.
  Mat cost(na, nb);
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j)
      cost(i, j) = (a.particles.row(i) - b.particles.row(j)).norm();

  std::vector<long> supply(na, per_a), demand(nb, per_b);
  std::vector<std::vector<long>> flow(na, std::vector<long>(nb, 0));
  // Per-B-column list of A rows with positive flow (residual backward arcs).
  std::vector<std::vector<int>> back(nb);
  std::vector<double> pa(na, 0.0), pb(nb, 0.0);  // potentials

  const int V = na + nb;  // node v: [0, na) = A, [na, V) = B
  std::vector<double> dist(V);
  std::vector<int> parent(V);
  std::vector<char> done(V);
  using QE = std::pair<double, int>;

  long pushed = 0;
  while (pushed < scale) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    std::fill(parent.begin(), parent.end(), -1);
    std::fill(done.begin(), done.end(), 0);
    std::priority_queue<QE, std::vector<QE>, std::greater<>> pq;
    for (int i = 0; i < na; ++i)
      if (supply[i] > 0) {
        dist[i] = 0.0;
        pq.emplace(0.0, i);
      }
    int target = -1;
    while (!pq.empty()) {
      const auto [dv, v] = pq.top();
      pq.pop();
      if (done[v]) continue;
      done[v] = 1;
      if (v >= na) {
        if (target < 0 && demand[v - na] > 0) {
          target = v - na;
          break;  // nearest deficit node reached; Dijkstra may stop
        }
        const int j = v - na;
        for (int i : back[j]) {
          if (flow[i][j] <= 0) continue;  // stale entry
          // residual backward arc j -> i, reduced cost clamped at 0
          const double rc = std::max(0.0, -cost(i, j) + pb[j] - pa[i]);
          if (dv + rc < dist[i]) {
            dist[i] = dv + rc;
            parent[i] = na + j;
            pq.emplace(dist[i], i);
          }
        }
      } else {
        for (int j = 0; j < nb; ++j) {
          const double rc = std::max(0.0, cost(v, j) + pa[v] - pb[j]);
          if (dv + rc < dist[na + j]) {
            dist[na + j] = dv + rc;
            parent[na + j] = v;
            pq.emplace(dist[na + j], na + j);
          }
        }
      }
    }
    if (target < 0) throw std::runtime_error("w1_exact: no augmenting path (internal error)");

    const double dt = dist[na + target];
    for (int i = 0; i < na; ++i)
      if (dist[i] < std::numeric_limits<double>::infinity()) pa[i] += std::min(dist[i], dt);
      else pa[i] += dt;
    for (int j = 0; j < nb; ++j)
      if (dist[na + j] < std::numeric_limits<double>::infinity())
        pb[j] += std::min(dist[na + j], dt);
      else pb[j] += dt;

    // Bottleneck: demand at the target, flow on backward arcs, supply at the
    // path's root. Forward arcs are uncapped.
    long delta = demand[target];
    {
      int v = na + target;
      while (parent[v] >= 0) {
        const int u = parent[v];
        if (v < na) delta = std::min(delta, flow[v][u - na]);
        v = u;
      }
      delta = std::min(delta, supply[v]);
    }
    // Apply.
    int v = na + target;
    while (parent[v] >= 0) {
      const int u = parent[v];
      if (v >= na) {
        const int j = v - na;
        if (flow[u][j] == 0) back[j].push_back(u);
        flow[u][j] += delta;
      } else {
        flow[v][u - na] -= delta;
      }
      v = u;
    }
    supply[v] -= delta;
    demand[target] -= delta;
    pushed += delta;
  }

  TransportPlan plan;
  double total = 0.0;
  const double inv_scale = 1.0 / static_cast<double>(scale);
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j)
      if (flow[i][j] > 0) {
        const double mass = static_cast<double>(flow[i][j]) * inv_scale;
        plan.flows.push_back({i, j, mass});
        total += mass * cost(i, j);
      }
  plan.cost = total;
  return {total, plan};
}

double w1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("w1_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t ia = 0, ib = 0;
  double q = 0.0, acc = 0.0;
  while (ia < a.size() && ib < b.size()) {
    const double qa = static_cast<double>(ia + 1) / na;
    const double qb = static_cast<double>(ib + 1) / nb;
    const double next = std::min(qa, qb);
    acc += (next - q) * std::abs(a[ia] - b[ib]);
    q = next;
    if (qa <= next) ++ia;
    if (qb <= next) ++ib;
  }
  return acc;
}

double w1_sliced(const Ensemble& a, const Ensemble& b, int projections, RngHandle& rng) {
  if (projections < 1) throw std::invalid_argument("w1_sliced: projections >= 1");
  if (a.dim() != b.dim()) throw std::invalid_argument("w1_sliced: dimension mismatch");
  const int d = a.dim();
  double acc = 0.0;
  for (int p = 0; p < projections; ++p) {
    Vec u(d);
    double nrm = 0.0;
    do {
      for (int c = 0; c < d; ++c) u[c] = rng.normal();
      nrm = u.norm();
    } while (nrm == 0.0);
    u /= nrm;
    std::vector<double> pa(a.n()), pb(b.n());
    for (int i = 0; i < a.n(); ++i) pa[i] = a.particles.row(i).dot(u);
    for (int j = 0; j < b.n(); ++j) pb[j] = b.particles.row(j).dot(u);
    acc += w1_1d(std::move(pa), std::move(pb));
  }
  return acc / projections;
}

RateFit fit_rate(const std::vector<std::pair<int, double>>& points) {
  std::vector<int> ns;
  for (const auto& [n, v] : points) {
    if (v <= 0.0) throw std::invalid_argument("fit_rate: nonpositive value (degenerate experiment)");
    ns.push_back(n);
  }
  std::sort(ns.begin(), ns.end());
  ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
  if (ns.size() < 3) throw std::invalid_argument("fit_rate: need >= 3 distinct n");

  RateFit fit;
  for (const auto& [n, v] : points)
    fit.points.emplace_back(std::log(static_cast<double>(n)), std::log(v));

  const double m = static_cast<double>(fit.points.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (const auto& [x, y] : fit.points) {
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    syy += y * y;
  }
  const double vxx = sxx - sx * sx / m;
  const double vxy = sxy - sx * sy / m;
  const double vyy = syy - sy * sy / m;
  fit.slope = vxy / vxx;
  fit.intercept = (sy - fit.slope * sx) / m;
  fit.r_squared = vyy > 0.0 ? (vxy * vxy) / (vxx * vyy) : 1.0;
  return fit;
}

}  // namespace cfmlab
