#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "cfmlab/experiments.hpp"
#include "cfmlab/train.hpp"

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

LayerParams scalar_block(double v) {
  NearestNeighborParams p;
  p.A = Mat::Constant(1, 1, v);
  return p;
}

/// MLP path with W1 = 0: the velocity vanishes for every input, so the loss
/// gradient is identically zero while the path norm stays positive.
ParameterPath flat_mlp_path(int d, double w2, double b) {
  MlpParams mlp;
  mlp.W1 = Mat::Zero(d, d);
  mlp.W2 = Mat::Constant(d, d, w2);
  mlp.b = Vec::Constant(d, b);
  ParameterPath theta;
  theta.layers.push_back(mlp);
  return theta;
}

}  // namespace

TEST_CASE("ogd_step: identity without gradient or ridge") {
  ParameterPath theta;
  theta.layers.push_back(scalar_block(2.0));
  const ParameterPath out = ogd_step(theta, zero_gradient(theta), 0.1, 0.0);
  CHECK(std::get<NearestNeighborParams>(out.layers[0]).A(0, 0) == 2.0);
}

TEST_CASE("ogd_step: pure ridge shrinks geometrically") {
  ParameterPath theta;
  theta.layers.push_back(scalar_block(1.0));
  const double eta = 0.1, lambda = 2.0;
  ParameterPath cur = theta;
  for (int k = 1; k <= 10; ++k) {
    cur = ogd_step(cur, zero_gradient(cur), eta, lambda);
    CHECK(std::get<NearestNeighborParams>(cur.layers[0]).A(0, 0) ==
          doctest::Approx(std::pow(1.0 - eta * lambda, k)).epsilon(1e-14));
  }
}

TEST_CASE("ogd_step: hand-computed scalar update") {
  ParameterPath theta;
  theta.layers.push_back(scalar_block(2.0));
  LossGradient grad;
  grad.blocks.push_back(scalar_block(1.0));
  const ParameterPath out = ogd_step(theta, grad, 0.1, 1.0);
  CHECK(std::get<NearestNeighborParams>(out.layers[0]).A(0, 0) == doctest::Approx(1.7));
}

TEST_CASE("ogd_step: rejects eta * lambda >= 1") {
  ParameterPath theta;
  theta.layers.push_back(scalar_block(1.0));
  CHECK_THROWS_AS(ogd_step(theta, zero_gradient(theta), 0.5, 2.0), std::invalid_argument);
}

TEST_CASE("run_ogd: zero iterations log only the initialization") {
  RngHandle rng(100);
  const int d = 2;
  const ParameterPath theta0 = make_path({"mlp"}, d, 0.3, rng);
  const Ensemble ctx = random_ensemble(4, d, rng);
  auto stream = [&](int) {
    Sample s;
    s.x0 = Vec::Zero(d);
    s.y0 = Vec::Ones(d);
    s.context = ctx;
    return s;
  };
  OgdConfig cfg;
  cfg.iterations = 0;
  const TrainLog log = run_ogd(theta0, stream, cfg, rng.child(1));
  CHECK(log.records.size() == 1);
  CHECK(log.records[0].k == 0);
  CHECK(path_norm(log.final_theta, PathNorm::Linf) ==
        doctest::Approx(path_norm(theta0, PathNorm::Linf)));
}

TEST_CASE("run_ogd: zero-gradient stream decays geometrically under ridge") {
  RngHandle rng(101);
  const int d = 2;
  const ParameterPath theta0 = flat_mlp_path(d, 0.4, -0.3);
  const double norm0 = path_norm(theta0, PathNorm::Linf);
  REQUIRE(norm0 > 0.0);
  auto stream = [&](int) {
    Sample s;
    s.x0 = random_vec(d, rng);
    s.y0 = s.x0;  // zero velocity keeps x1 = x0 = y0, so the gradient vanishes
    s.context = random_ensemble(3, d, rng);
    return s;
  };
  OgdConfig cfg;
  cfg.eta = 0.1;
  cfg.lambda = 1.5;
  cfg.iterations = 12;
  cfg.integrator = IntegratorConfig{Scheme::Euler, 2};
  const TrainLog log = run_ogd(theta0, stream, cfg, rng.child(1));
  REQUIRE(log.records.size() == 13);
  for (int k = 0; k <= 12; ++k) {
    CHECK(log.records[k].theta_linf ==
          doctest::Approx(std::pow(1.0 - cfg.eta * cfg.lambda, k) * norm0).epsilon(1e-12));
    if (k < 12) CHECK(log.records[k].grad_linf <= 1e-14);
  }
}

TEST_CASE("run_ogd: large-lambda iterates stay inside the gradient-over-lambda ball") {
  RngHandle rng(102);
  const int d = 2;
  const ParameterPath theta0 = make_path({"attention"}, d, 0.3, rng);
  const PopulationSpec pop{UniformBall{1.0}, d};
  auto stream = [&](int k) {
    RngHandle r = RngHandle(777).child(static_cast<std::uint64_t>(k));
    Sample s;
    s.x0 = sample_point(pop, r);
    s.y0 = sample_point(pop, r);
    s.context = pop;
    return s;
  };
  OgdConfig cfg;
  cfg.eta = 0.05;
  cfg.lambda = 4.0;
  cfg.iterations = 40;
  cfg.context_n = 8;
  cfg.integrator = IntegratorConfig{Scheme::Euler, 2};
  const TrainLog log = run_ogd(theta0, stream, cfg, rng.child(9));
  double ghat = 0.0;
  for (const TrainRecord& r : log.records)
    if (std::isfinite(r.grad_linf)) ghat = std::max(ghat, r.grad_linf);
  const double bound = path_norm(theta0, PathNorm::Linf) + ghat / cfg.lambda;
  for (const TrainRecord& r : log.records) CHECK(r.theta_linf <= bound + 1e-12);
}

TEST_CASE("run_paired_ogd: coupled identical contexts give a zero deviation series") {
  RngHandle rng(103);
  const int d = 2;
  const ParameterPath theta0 = make_path({"attention"}, d, 0.3, rng);
  const PopulationSpec pop{UniformBall{1.0}, d};
  auto xy = [&](int k) {
    RngHandle r = RngHandle(31).child(static_cast<std::uint64_t>(k));
    return std::make_pair(sample_point(pop, r), sample_point(pop, r));
  };
  OgdConfig cfg;
  cfg.eta = 0.05;
  cfg.iterations = 10;
  cfg.integrator = IntegratorConfig{Scheme::Euler, 2};
  const int n = 16;
  const TrainLog log = run_paired_ogd(theta0, pop, xy, n, n, cfg, rng.child(5), true);
  for (const TrainRecord& r : log.records) CHECK(r.deviation_linf == 0.0);
}

TEST_CASE("run_paired_ogd: reruns reproduce the deviation series bitwise") {
  RngHandle rng(104);
  const int d = 2;
  const ParameterPath theta0 = make_path({"attention"}, d, 0.3, rng);
  const PopulationSpec pop{UniformBall{1.0}, d};
  auto xy = [&](int k) {
    RngHandle r = RngHandle(77).child(static_cast<std::uint64_t>(k));
    return std::make_pair(sample_point(pop, r), sample_point(pop, r));
  };
  OgdConfig cfg;
  cfg.eta = 0.05;
  cfg.lambda = 0.5;
  cfg.iterations = 8;
  cfg.integrator = IntegratorConfig{Scheme::Euler, 2};
  const TrainLog a = run_paired_ogd(theta0, pop, xy, 8, 64, cfg, RngHandle(9).child(1));
  const TrainLog b = run_paired_ogd(theta0, pop, xy, 8, 64, cfg, RngHandle(9).child(1));
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].deviation_linf == b.records[i].deviation_linf);
    CHECK(a.records[i].theta_linf == b.records[i].theta_linf);
    if (std::isfinite(a.records[i].loss)) CHECK(a.records[i].loss == b.records[i].loss);
  }
}

TEST_CASE("run_paired_ogd: reference size precondition") {
  RngHandle rng(105);
  const int d = 2;
  const ParameterPath theta0 = make_path({"attention"}, d, 0.3, rng);
  const PopulationSpec pop{UniformBall{1.0}, d};
  auto xy = [&](int) { return std::make_pair(Vec::Zero(d).eval(), Vec::Ones(d).eval()); };
  OgdConfig cfg;
  cfg.iterations = 1;
  CHECK_THROWS_AS(run_paired_ogd(theta0, pop, xy, 16, 64, cfg, rng.child(1)),
                  std::invalid_argument);
}

TEST_CASE("run_paired_ogd: lambda = 0 finite-horizon deviation is recorded and finite") {
  RngHandle rng(106);
  const int d = 2;
  const ParameterPath theta0 = make_path({"attention"}, d, 0.3, rng);
  const PopulationSpec pop{UniformBall{1.0}, d};
  auto xy = [&](int k) {
    RngHandle r = RngHandle(3).child(static_cast<std::uint64_t>(k));
    return std::make_pair(sample_point(pop, r), sample_point(pop, r));
  };
  OgdConfig cfg;
  cfg.eta = 0.2;
  cfg.lambda = 0.0;
  cfg.iterations = 5;  // ceil(1 / eta)
  cfg.integrator = IntegratorConfig{Scheme::Euler, 2};
  const TrainLog log = run_paired_ogd(theta0, pop, xy, 8, 64, cfg, rng.child(2));
  REQUIRE(log.records.size() == 6);
  CHECK(std::isfinite(log.records.back().deviation_linf));
}

TEST_CASE("paired trainers obey the one-step deviation envelope") {
  // Manual lockstep replication: two trainers sharing (x0, y0) but drawing
  // their own contexts; the deviation may grow per step by at most eta times
  // the sum of the two gradient norms (a coarse but assumption-free envelope
  // implied by the triangle inequality on the update rule).
  RngHandle rng(107);
  const int d = 2;
  ParameterPath theta = make_path({"attention"}, d, 0.3, rng);
  ParameterPath theta_hat = theta;
  const PopulationSpec pop{UniformBall{1.0}, d};
  const OgdConfig cfg{0.05, 1.0, 15, 8, IntegratorConfig{Scheme::Euler, 2}};
  RngHandle stream = rng.child(1);
  double prev_dev = 0.0;
  for (int k = 0; k < cfg.iterations; ++k) {
    RngHandle rk = stream.child(static_cast<std::uint64_t>(k));
    const Vec x0 = sample_point(pop, rk);
    const Vec y0 = sample_point(pop, rk);
    RngHandle ra = rk.child(1), rb = rk.child(2);
    const Ensemble ctx_a = sample_ensemble(pop, 64, ra);
    const Ensemble ctx_b = sample_ensemble(pop, 8, rb);
    const LossGradient ga = pipeline_gradient(x0, ctx_a, y0, theta, cfg.integrator);
    const LossGradient gb = pipeline_gradient(x0, ctx_b, y0, theta_hat, cfg.integrator);
    theta = ogd_step(theta, ga, cfg.eta, cfg.lambda);
    theta_hat = ogd_step(theta_hat, gb, cfg.eta, cfg.lambda);
    const ParameterPath diff = path_axpy(-1.0, as_gradient(theta_hat), 1.0, theta);
    const double dev = path_norm(diff, PathNorm::Linf);
    const double budget = grad_norm(ga, PathNorm::Linf) + grad_norm(gb, PathNorm::Linf);
    CHECK(dev <= prev_dev + cfg.eta * budget + 1e-12);
    prev_dev = dev;
  }
}

TEST_CASE("TrainLog: CSV header and row count") {
  TrainLog log;
  TrainRecord r;
  r.k = 0;
  r.loss = 0.5;
  r.theta_linf = 1.0;
  log.records.push_back(r);
  r.k = 1;
  log.records.push_back(r);
  const std::string csv = log.to_csv();
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();  // RFC-4180 line endings
  CHECK(line == "k,loss_pop,loss_emp,theta_linf,grad_linf,deviation_linf");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty() && line != "\r") ++rows;
  CHECK(rows == 2);
}
