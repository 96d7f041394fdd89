#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cfmlab/adjoint.hpp"
#include "cfmlab/config.hpp"
#include "cfmlab/flow.hpp"
#include "cfmlab/metrics.hpp"
#include "cfmlab/train.hpp"
#include "cfmlab/types.hpp"

namespace cfmlab {

enum class W1Mode { Exact, Sliced, None };

/// Knobs for one Monte Carlo study. Populated from a TOML config file; every
/// field has a CLI-documented default so small studies need tiny configs.
struct ExperimentConfig {
  std::string id = "experiment";
  int dimension = 3;
  std::vector<int> n_list = {16, 32, 64, 128};  // strictly increasing
  int n_ref = 1024;
  int repeats = 8;  // >= 8 for any rate fit
  std::uint64_t master_seed = 0;
  std::filesystem::path out_dir = "out";
  int threads = 0;  // 0: physical cores

  PopulationSpec population{UniformBall{1.0}, 3};
  std::vector<std::string> schedule = {"attention"};  // attention | mlp | nearest
  double init_scale = 0.3;
  std::uint64_t path_seed = 1;
  IntegratorConfig integrator;
  OgdConfig ogd;
  bool lambda_auto = false;  // calibrate lambda = 2 * measured gradient bound

  W1Mode w1_grid = W1Mode::Sliced;     // per-grid-node measure deviation
  W1Mode w1_initial = W1Mode::Exact;   // W1(mu_0^n, mu_0^ref)
  int sliced_projections = 32;

  int stability_rungs = 6;
  double stability_base_delta = 0.2;
  int stability_n = 32;

  int audit_samples = 10000;
  double param_bound = 1.0;  // Frobenius ball for audit parameter draws
  int audit_context_n = 8;

  int support_instances = 64;
  int support_n = 8;

  int grad_check_directions = 5;
  int grad_check_instances = 2;

  /// Raw TOML entries, echoed into meta.json.
  std::map<std::string, TomlValue> echo;

  /// Builds from a parsed config (consumes every known key; unknown keys make
  /// map.finish() throw). Validates invariants.
  static ExperimentConfig from_map(ConfigMap& map);
  static ExperimentConfig from_file(const std::filesystem::path& path);
};

/// Resolved worker count (requested, or physical cores when 0).
int resolve_threads(int requested);

/// Runs body(0..count-1) on a pool; trial results must be stored by index so
/// merges are schedule-independent. Rethrows the first trial exception.
void parallel_for(int count, int threads, const std::function<void(int)>& body);

LayerParams random_layer(const std::string& family, int d, double scale, RngHandle& rng);
ParameterPath make_path(const std::vector<std::string>& schedule, int d, double scale,
                        RngHandle& rng);

/// The parameter path every experiment starts from, derived deterministically
/// from (master_seed, path.seed, schedule, init_scale).
ParameterPath config_path_init(const ExperimentConfig& cfg);

/// Scaling-and-squaring Taylor matrix exponential (closed-form flow oracle).
Mat matrix_exponential(const Mat& A);

/// Exhaustive assignment oracle for exact-W1 validation; equal sizes, n <= 8.
double w1_permutation_oracle(const Ensemble& a, const Ensemble& b);

/// Slope standard error of a log-log fit (OLS).
double fit_stderr(const RateFit& fit);

// ---------------------------------------------------------------------------
// Measured vs. theoretical constants from the regularity audits.

struct BoundsLedger {
  struct Entry {
    std::string name;
    std::string bound_formula;  // closed form of the theoretical bound
    double theoretical = 0.0;
    double max_observed = 0.0;
    long samples = 0;
    long witness = -1;  // draw index attaining max_observed
  };
  std::vector<Entry> entries;
  std::vector<std::string> violations;  // beyond 1e-8 relative slack

  bool ok() const { return violations.empty(); }
};

// ---------------------------------------------------------------------------
// Experiments. Each returns its CSV payloads plus the summary statistics the
// acceptance suite asserts on; write_outputs() persists the standard triple
// <out>/<id>/<id>.{raw.csv,summary.csv,meta.json}.

struct ExperimentOutput {
  std::string raw_csv;
  std::string summary_csv;
};

void write_outputs(const ExperimentConfig& cfg, const ExperimentOutput& out);

struct ForwardPocResult {
  ExperimentOutput files;
  RateFit fit_x;           // mean sup_s |x - x_hat| vs n
  RateFit fit_w1;          // mean sup_s W1 vs n (when tracked)
  RateFit fit_w1_initial;  // mean W1 at s = 0 vs n (when tracked)
  std::vector<std::pair<int, double>> mean_sup_x, mean_sup_w1, mean_w1_initial;
};
ForwardPocResult exp_forward_poc(const ExperimentConfig& cfg);

struct BackwardPocResult {
  ExperimentOutput files;
  RateFit fit_dev;  // mean sup_k deviation vs n
  std::vector<std::pair<int, double>> mean_sup_dev;
  struct Trial {
    int n, repeat;
    double sup_dev;
    double uniformity_ratio;  // max dev over late window / max over early
  };
  std::vector<Trial> trials;
  double lambda_used = 0.0;
};
BackwardPocResult exp_backward_poc(const ExperimentConfig& cfg);

struct StabilityResult {
  ExperimentOutput files;
  struct Row {
    std::string axis;  // x0 | mu0 | theta
    int rung;
    double input_delta, dev_x, dev_w1, dev_grad;
  };
  std::vector<Row> rows;
  std::map<std::string, double> max_ratio_x, max_ratio_w1, max_ratio_grad;  // per axis
};
StabilityResult exp_stability(const ExperimentConfig& cfg);

struct LipschitzAuditResult {
  ExperimentOutput files;
  BoundsLedger ledger;
  double kernel_identity_max_err = 0.0;
};
LipschitzAuditResult exp_lipschitz_audit(const ExperimentConfig& cfg);

struct SupportGrowthResult {
  ExperimentOutput files;
  double max_overshoot = 0.0;  // max over instances of max_norm / (e^M R0)
  double slack = 0.0;          // 1 + 10h
  std::vector<std::string> violations;
};
SupportGrowthResult exp_support_growth(const ExperimentConfig& cfg);

struct GradCheckResult {
  ExperimentOutput files;
  struct Cell {
    std::string family;
    int layers, n;
    double max_rel, max_rel_refined, observed_order;
  };
  std::vector<Cell> cells;
  double worst_rel = 0.0, worst_refined = 0.0;
};
GradCheckResult exp_grad_check(const ExperimentConfig& cfg);

}  // namespace cfmlab
