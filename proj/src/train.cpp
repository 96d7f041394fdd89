#include "cfmlab/train.hpp"

#include "cfmlab/csv.hpp"

namespace cfmlab {

std::string TrainLog::to_csv() const {
  CsvWriter csv({"k", "loss_pop", "loss_emp", "theta_linf", "grad_linf", "deviation_linf"});
  for (const auto& r : records)
    csv.add_row({CsvWriter::cell(r.k), format_real(r.loss), format_real(r.loss_emp),
                 format_real(r.theta_linf), format_real(r.grad_linf),
                 format_real(r.deviation_linf)});
  return csv.str();
}

ParameterPath ogd_step(const ParameterPath& theta, const LossGradient& grad, double eta,
                       double lambda) {
  if (eta * lambda >= 1.0) throw std::invalid_argument("ogd_step: requires eta*lambda < 1");
  return path_axpy(-eta, grad, 1.0 - eta * lambda, theta);
}

namespace {

Ensemble materialize(const Sample& sample, int context_n, RngHandle& rng) {
  if (const auto* pop = std::get_if<PopulationSpec>(&sample.context))
    return sample_ensemble(*pop, context_n, rng);
  return std::get<Ensemble>(sample.context);
}

double path_deviation_linf(const ParameterPath& a, const ParameterPath& b) {
  double dev = 0.0;
  for (int l = 0; l < a.num_layers(); ++l)
    dev = std::max(dev, block_norm(block_axpy(-1.0, b.layers[l], 1.0, a.layers[l])));
  return dev;
}

}  // namespace

TrainLog run_ogd(const ParameterPath& theta0, const std::function<Sample(int)>& stream,
                 const OgdConfig& cfg, RngHandle rng) {
  if (cfg.eta * cfg.lambda >= 1.0) throw std::invalid_argument("run_ogd: eta*lambda < 1 required");
  TrainLog log;
  ParameterPath theta = theta0;
  for (int k = 0; k < cfg.iterations; ++k) {
    const Sample sample = stream(k);
    RngHandle ctx_rng = rng.child(static_cast<std::uint64_t>(k));
    const Ensemble mu0 = materialize(sample, cfg.context_n, ctx_rng);
    double loss = 0.0;
    LossGradient grad;
    try {
      grad = pipeline_gradient(sample.x0, mu0, sample.y0, theta, cfg.integrator, &loss);
    } catch (const std::exception& e) {
      throw std::runtime_error("run_ogd: iteration " + std::to_string(k) + ": " + e.what());
    }
    TrainRecord rec;
    rec.k = k;
    rec.loss = loss;
    rec.theta_linf = path_norm(theta, PathNorm::Linf);
    rec.grad_linf = grad_norm(grad, PathNorm::Linf);
    log.records.push_back(rec);
    theta = ogd_step(theta, grad, cfg.eta, cfg.lambda);
  }
  TrainRecord last;
  last.k = cfg.iterations;
  last.theta_linf = path_norm(theta, PathNorm::Linf);
  log.records.push_back(last);
  log.final_theta = theta;
  return log;
}

TrainLog run_paired_ogd(const ParameterPath& theta0, const PopulationSpec& population,
                        const std::function<std::pair<Vec, Vec>(int)>& x0y0_stream, int n,
                        int n_ref, const OgdConfig& cfg, RngHandle rng, bool couple_contexts) {
  if (n_ref < 8 * n && !couple_contexts)
    throw std::invalid_argument("run_paired_ogd: requires N_ref >= 8n");
  if (cfg.eta * cfg.lambda >= 1.0)
    throw std::invalid_argument("run_paired_ogd: eta*lambda < 1 required");

  TrainLog log;
  ParameterPath theta_pop = theta0;
  ParameterPath theta_emp = theta0;
  for (int k = 0; k < cfg.iterations; ++k) {
    const auto [x0, y0] = x0y0_stream(k);
    RngHandle step_rng = rng.child(static_cast<std::uint64_t>(k));
    RngHandle pop_rng = step_rng.child(1);
    RngHandle emp_rng = couple_contexts ? step_rng.child(1) : step_rng.child(2);
    const Ensemble mu_pop = sample_ensemble(population, n_ref, pop_rng);
    const Ensemble mu_emp = sample_ensemble(population, n, emp_rng);

    TrainRecord rec;
    rec.k = k;
    rec.theta_linf = path_norm(theta_pop, PathNorm::Linf);
    rec.deviation_linf = path_deviation_linf(theta_pop, theta_emp);
    try {
      const LossGradient grad_pop =
          pipeline_gradient(x0, mu_pop, y0, theta_pop, cfg.integrator, &rec.loss);
      const LossGradient grad_emp =
          pipeline_gradient(x0, mu_emp, y0, theta_emp, cfg.integrator, &rec.loss_emp);
      rec.grad_linf = grad_norm(grad_pop, PathNorm::Linf);
      theta_pop = ogd_step(theta_pop, grad_pop, cfg.eta, cfg.lambda);
      theta_emp = ogd_step(theta_emp, grad_emp, cfg.eta, cfg.lambda);
    } catch (const std::exception& e) {
      throw std::runtime_error("run_paired_ogd: iteration " + std::to_string(k) + ": " + e.what());
    }
    log.records.push_back(rec);
  }
  TrainRecord last;
  last.k = cfg.iterations;
  last.theta_linf = path_norm(theta_pop, PathNorm::Linf);
  last.deviation_linf = path_deviation_linf(theta_pop, theta_emp);
  log.records.push_back(last);
  log.final_theta = theta_pop;
  log.final_theta_emp = theta_emp;
  return log;
}

}  // namespace cfmlab
