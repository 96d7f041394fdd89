// Full-scale acceptance suite. Each criterion prints one PASS/FAIL line with
// its headline statistic and wall time; the process exits with the number of
// failed criteria. Individual criteria can be selected by number on the
// command line (no arguments runs all ten).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cfmlab/csv.hpp"
#include "cfmlab/experiments.hpp"

namespace fs = std::filesystem;
using namespace cfmlab;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Mat random_matrix(int d, double scale, RngHandle& rng) {
  Mat m(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) m(r, c) = scale * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// 1. Adjoint gradient vs central finite differences, 100 instances.

Outcome criterion_gradient_fd() {
  const int dims[] = {2, 3, 5};
  const int ns[] = {1, 8, 64};
  const int layer_counts[] = {1, 2, 4};
  const std::string families[] = {"attention", "mlp", "mixed"};
  const IntegratorConfig integ{Scheme::RK4, 8};

  double worst = 0.0, worst_refined = 0.0;
  int shrink_failures = 0;
  for (int idx = 0; idx < 100; ++idx) {
    const int d = dims[idx % 3];
    const int n = ns[(idx / 3) % 3];
    const int L = layer_counts[(idx / 9) % 3];
    const std::string& fam = families[(idx / 27) % 3];
    std::vector<std::string> schedule;
    for (int l = 0; l < L; ++l)
      schedule.push_back(fam == "mixed" ? (l % 2 == 0 ? "attention" : "mlp") : fam);

    RngHandle rng = RngHandle(2024).child(static_cast<std::uint64_t>(idx));
    const PopulationSpec ball{UniformBall{1.0}, d};
    RngHandle xr = rng.child(0);
    RngHandle mr = rng.child(1);
    RngHandle yr = rng.child(2);
    Sample sample{sample_point(ball, xr), sample_ensemble(ball, n, mr), sample_point(ball, yr)};
    RngHandle pr = rng.child(3);
    const ParameterPath theta = make_path(schedule, d, 0.2, pr);

    const FdCheckReport rep = gradient_fd_check(sample, theta, integ, 2, rng.child(4), n);
    worst = std::max(worst, rep.max_rel_error);
    worst_refined = std::max(worst_refined, rep.max_rel_error_refined);
    if (rep.max_rel_error > 1e-6 && rep.max_rel_error_refined > 0.5 * rep.max_rel_error)
      ++shrink_failures;
  }
  return {worst <= 1e-3 && shrink_failures == 0,
          "worst rel " + format_real(worst) + ", refined " + format_real(worst_refined) + ", " +
              std::to_string(shrink_failures) + " shrink failures"};
}

// ---------------------------------------------------------------------------
// 2. Closed-form flow oracle (Q = 0 attention) and RK4 order.

double closed_form_error(int substeps) {
  const int d = 3, n = 8;
  RngHandle rng(77);
  const PopulationSpec ball{UniformBall{1.0}, d};
  RngHandle xr = rng.child(0);
  const Vec x0 = sample_point(ball, xr);
  RngHandle mr = rng.child(1);
  const Ensemble mu0 = sample_ensemble(ball, n, mr);
  RngHandle pr = rng.child(2);
  AttentionParams att;
  att.Q = Mat::Zero(d, d);
  att.K = random_matrix(d, 0.5, pr);
  att.V = random_matrix(d, 0.8, pr);
  const ParameterPath theta{{att}};
  const Trajectory traj =
      integrate_forward(x0, mu0, theta, IntegratorConfig{Scheme::RK4, substeps});
  const Vec exact =
      x0 + (matrix_exponential(att.V) - Mat::Identity(d, d)) * mu0.mean();
  return (output_token(traj) - exact).norm();
}

Outcome criterion_closed_form() {
  const double e4 = closed_form_error(4);
  const double e8 = closed_form_error(8);
  const double e16 = closed_form_error(16);
  const double e64 = closed_form_error(64);
  const double o1 = std::log2(e4 / e8), o2 = std::log2(e8 / e16);
  return {e64 <= 1e-6 && o1 >= 3.0 && o2 >= 3.0,
          "err(m=64) " + format_real(e64) + ", observed orders " + format_real(o1) + ", " +
              format_real(o2)};
}

// ---------------------------------------------------------------------------
// 3. Forward sharp rate, d = 4, N_ref = 8192, 64 repeats.

Outcome criterion_forward_sharp() {
  ExperimentConfig cfg;
  cfg.id = "poc_forward_sharp";
  cfg.dimension = 4;
  cfg.population = PopulationSpec{UniformBall{1.0}, 4};
  cfg.n_list = {16, 32, 64, 128, 256, 512};
  cfg.n_ref = 8192;
  cfg.repeats = 64;
  cfg.master_seed = 42;
  cfg.init_scale = 0.5;
  cfg.integrator = IntegratorConfig{Scheme::RK4, 4};
  cfg.ogd.integrator = cfg.integrator;
  cfg.w1_grid = W1Mode::None;
  cfg.w1_initial = W1Mode::None;
  const ForwardPocResult res = exp_forward_poc(cfg);
  const bool pass =
      res.fit_x.slope >= -0.65 && res.fit_x.slope <= -0.35 && res.fit_x.r_squared >= 0.9;
  return {pass, "slope " + format_real(res.fit_x.slope) + ", r2 " +
                    format_real(res.fit_x.r_squared)};
}

// ---------------------------------------------------------------------------
// 4. Wasserstein law-of-large-numbers rate at d = 3, exact W1.

Outcome criterion_w1_lln() {
  ExperimentConfig cfg;
  cfg.id = "w1_lln";
  cfg.dimension = 3;
  cfg.population = PopulationSpec{UniformBall{1.0}, 3};
  cfg.n_list = {16, 32, 64, 128, 256};
  cfg.n_ref = 4096;
  cfg.repeats = 8;
  cfg.master_seed = 42;
  cfg.init_scale = 0.0;
  cfg.integrator = IntegratorConfig{Scheme::Euler, 1};
  cfg.ogd.integrator = cfg.integrator;
  cfg.w1_grid = W1Mode::None;
  cfg.w1_initial = W1Mode::Exact;
  const ForwardPocResult res = exp_forward_poc(cfg);
  const bool pass = res.fit_w1_initial.slope >= -0.45 && res.fit_w1_initial.slope <= -0.22;
  return {pass, "slope " + format_real(res.fit_w1_initial.slope) + ", r2 " +
                    format_real(res.fit_w1_initial.r_squared)};
}

// ---------------------------------------------------------------------------
// 5. Backward uniform-in-k deviation at large ridge, K = 500, n = 64.

ExperimentConfig backward_base() {
  ExperimentConfig cfg;
  cfg.dimension = 3;
  cfg.population = PopulationSpec{UniformBall{1.0}, 3};
  cfg.master_seed = 42;
  cfg.init_scale = 0.3;
  cfg.integrator = IntegratorConfig{Scheme::Euler, 4};
  cfg.ogd.eta = 0.05;
  cfg.ogd.integrator = cfg.integrator;
  cfg.lambda_auto = true;
  return cfg;
}

Outcome criterion_backward_uniform() {
  ExperimentConfig cfg = backward_base();
  cfg.id = "poc_backward_uniform";
  cfg.dimension = 8;
  cfg.population = PopulationSpec{UniformBall{1.0}, 8};
  cfg.n_list = {64};
  cfg.n_ref = 512;
  cfg.repeats = 16;
  cfg.lambda_auto = false;
  cfg.ogd.lambda = 2.0;
  cfg.ogd.iterations = 500;
  const BackwardPocResult res = exp_backward_poc(cfg);
  int ok = 0;
  for (const auto& tr : res.trials) ok += tr.uniformity_ratio <= 1.5 ? 1 : 0;
  return {ok >= 14, std::to_string(ok) + "/16 uniformity ratios <= 1.5, lambda " +
                        format_real(res.lambda_used)};
}

// ---------------------------------------------------------------------------
// 6. Backward sharp rate: E[sup_k deviation] vs n.

Outcome criterion_backward_sharp() {
  ExperimentConfig cfg = backward_base();
  cfg.id = "poc_backward_sharp";
  cfg.n_list = {16, 32, 64, 128, 256};
  cfg.n_ref = 2048;
  cfg.repeats = 8;
  cfg.ogd.iterations = 150;
  const BackwardPocResult res = exp_backward_poc(cfg);
  const bool pass = res.fit_dev.slope >= -0.65 && res.fit_dev.slope <= -0.35;
  return {pass, "slope " + format_real(res.fit_dev.slope) + ", r2 " +
                    format_real(res.fit_dev.r_squared) + ", lambda " +
                    format_real(res.lambda_used)};
}

// ---------------------------------------------------------------------------
// 7/8. Derivative-norm bound audit, support growth, kernel identity.

const LipschitzAuditResult& audit_result() {
  static const LipschitzAuditResult res = [] {
    ExperimentConfig cfg;
    cfg.id = "bound_audit";
    cfg.audit_samples = 10000;
    return exp_lipschitz_audit(cfg);
  }();
  return res;
}

Outcome criterion_bound_audit() {
  const LipschitzAuditResult& res = audit_result();
  ExperimentConfig scfg;
  scfg.id = "support_growth";
  scfg.support_instances = 10000;
  const SupportGrowthResult sres = exp_support_growth(scfg);
  const std::size_t violations = res.ledger.violations.size() + sres.violations.size();
  std::string detail = std::to_string(violations) + " violations over " +
                       std::to_string(res.ledger.entries.size()) +
                       " bounds, support overshoot " + format_real(sres.max_overshoot);
  return {res.ledger.ok() && sres.violations.empty(), detail};
}

Outcome criterion_kernel_identity() {
  const LipschitzAuditResult& res = audit_result();
  return {res.kernel_identity_max_err <= 1e-12,
          "max identity error " + format_real(res.kernel_identity_max_err)};
}

// ---------------------------------------------------------------------------
// 9. Exact W1 vs exhaustive permutation oracle; metric axioms.

Outcome criterion_w1_oracle() {
  const PopulationSpec ball{UniformBall{1.0}, 3};
  RngHandle rng(99);
  double max_gap = 0.0;
  for (int t = 0; t < 200; ++t) {
    RngHandle tr = rng.child(0).child(static_cast<std::uint64_t>(t));
    const int n = 2 + static_cast<int>(tr.uniform_below(5));
    const Ensemble a = sample_ensemble(ball, n, tr);
    const Ensemble b = sample_ensemble(ball, n, tr);
    max_gap = std::max(max_gap, std::abs(w1_exact(a, b).first - w1_permutation_oracle(a, b)));
  }
  int axiom_failures = 0;
  for (int t = 0; t < 200; ++t) {
    RngHandle tr = rng.child(1).child(static_cast<std::uint64_t>(t));
    const int n = 2 + static_cast<int>(tr.uniform_below(5));
    const Ensemble a = sample_ensemble(ball, n, tr);
    const Ensemble b = sample_ensemble(ball, n, tr);
    const Ensemble c = sample_ensemble(ball, n, tr);
    const double ab = w1_exact(a, b).first;
    const double bc = w1_exact(b, c).first;
    const double ac = w1_exact(a, c).first;
    if (ab < 0.0 || w1_exact(a, a).first > 1e-12) ++axiom_failures;
    if (std::abs(ab - w1_exact(b, a).first) > 1e-10) ++axiom_failures;
    if (ac > ab + bc + 1e-9) ++axiom_failures;
  }
  return {max_gap <= 1e-10 && axiom_failures == 0,
          "max oracle gap " + format_real(max_gap) + ", " + std::to_string(axiom_failures) +
              " axiom failures"};
}

// ---------------------------------------------------------------------------
// 10. CLI determinism: repeated selftest and thread-count independence.

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CFMLAB_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

/// Relative path -> file bytes for every regular file under root.
std::vector<std::pair<std::string, std::string>> dir_snapshot(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> snap;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    snap.emplace_back(fs::relative(entry.path(), root).string(), buf.str());
  }
  std::sort(snap.begin(), snap.end());
  return snap;
}

Outcome criterion_determinism() {
  const fs::path root = fs::temp_directory_path() / "cfmlab_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  for (const auto& [dir, threads] : std::vector<std::pair<std::string, std::string>>{
           {"a", "1"}, {"b", "1"}, {"c", "8"}}) {
    if (run_cli("selftest --seed 7 --quiet --threads " + threads + " --out " +
                (root / dir).string()) != 0)
      return {false, "selftest exited nonzero (" + dir + ")"};
  }
  const auto a = dir_snapshot(root / "a");
  const auto b = dir_snapshot(root / "b");
  const auto c = dir_snapshot(root / "c");
  if (a.empty()) return {false, "selftest produced no output files"};
  if (a != b) return {false, "repeated selftest outputs differ"};
  if (a != c) return {false, "thread counts 1 and 8 produce different outputs"};
  return {true, std::to_string(a.size()) + " output files byte-identical across " +
                    "reruns and thread counts"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, Outcome (*)()>> criteria = {
      {"gradient_fd", criterion_gradient_fd},
      {"closed_form_flow", criterion_closed_form},
      {"forward_sharp_rate", criterion_forward_sharp},
      {"w1_lln_rate", criterion_w1_lln},
      {"backward_uniformity", criterion_backward_uniform},
      {"backward_sharp_rate", criterion_backward_sharp},
      {"bound_audit", criterion_bound_audit},
      {"kernel_identity", criterion_kernel_identity},
      {"w1_exact_oracle", criterion_w1_oracle},
      {"determinism", criterion_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && selected.count(static_cast<int>(i) + 1) == 0) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (out.pass ? "PASS" : "FAIL") << "  " << i + 1 << " " << criteria[i].first
              << "  (" << format_real(secs) << " s)  " << out.detail << std::endl;
    failures += out.pass ? 0 : 1;
  }
  return failures;
}
