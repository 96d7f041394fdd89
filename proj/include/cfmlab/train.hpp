#pragma once

#include <functional>
#include <limits>

#include "cfmlab/adjoint.hpp"
#include "cfmlab/flow.hpp"
#include "cfmlab/types.hpp"

namespace cfmlab {

struct OgdConfig {
  double eta = 0.05;
  double lambda = 0.0;   // ridge; requires eta * lambda < 1
  int iterations = 100;  // K
  int context_n = 16;    // particles drawn when a sample's context is a population
  IntegratorConfig integrator;
};

struct TrainRecord {
  int k = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();      // population-side loss at step k
  double loss_emp = std::numeric_limits<double>::quiet_NaN();  // empirical-side loss (paired runs)
  double theta_linf = 0.0;
  double grad_linf = std::numeric_limits<double>::quiet_NaN();
  double deviation_linf = std::numeric_limits<double>::quiet_NaN();  // |theta_k - theta_hat_k|_Linf
};

struct TrainLog {
  std::vector<TrainRecord> records;  // K+1 entries, k = 0..K
  ParameterPath final_theta;
  ParameterPath final_theta_emp;  // paired runs only

  /// CSV columns: k, loss_pop, loss_emp, theta_linf, grad_linf, deviation_linf.
  std::string to_csv() const;
};

/// One OGD update theta' = (1 - eta*lambda) theta - eta grad.
ParameterPath ogd_step(const ParameterPath& theta, const LossGradient& grad, double eta,
                       double lambda);

/// Online gradient descent on a sample stream: at each k materialize the
/// context, run the forward/backward/assemble pipeline, and step.
TrainLog run_ogd(const ParameterPath& theta0, const std::function<Sample(int)>& stream,
                 const OgdConfig& cfg, RngHandle rng);

/// Two coupled trainers sharing the (x0, y0) stream: the population trainer
/// draws a fresh N_ref-particle proxy context per step, the empirical trainer
/// a fresh n-particle context, from independent streams of the same
/// population (identical streams when couple_contexts is set). Logs
/// |theta_k - theta_hat_k|_Linf each iteration.
TrainLog run_paired_ogd(const ParameterPath& theta0, const PopulationSpec& population,
                        const std::function<std::pair<Vec, Vec>(int)>& x0y0_stream, int n,
                        int n_ref, const OgdConfig& cfg, RngHandle rng,
                        bool couple_contexts = false);

}  // namespace cfmlab
