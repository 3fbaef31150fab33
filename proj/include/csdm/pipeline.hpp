#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "csdm/diffusion.hpp"
#include "csdm/recovery.hpp"
#include "csdm/sketch.hpp"
#include "csdm/vendor_json.hpp"

namespace csdm::pipeline {

enum class AmplitudeLaw { unit, uniform };  // uniform: |a| ~ U[0.5, 1.5], random sign
std::string to_string(AmplitudeLaw a);

struct SparseDatasetSpec {
  std::size_t d = 0;
  std::size_t sparsity = 0;
  std::size_t n = 0;
  AmplitudeLaw amplitude = AmplitudeLaw::uniform;
  std::uint64_t seed = 0;
};

// n vectors with exactly `sparsity` nonzeros on uniformly random supports.
std::vector<Vector> synth_sparse_dataset(const SparseDatasetSpec& spec);

// {A x : x in data}
std::vector<Vector> compress_dataset(std::span<const Vector> data, const SketchOperator& a);

// lambda = sigma_coord * sqrt(2 log d) (universal) or a fixed value.
// sigma_coord is the supplied `value`, or the estimated latent residual
// divided by sqrt(m) when `value` is unset.
struct LambdaPolicy {
  enum class Kind { universal, fixed } kind = Kind::universal;
  std::optional<double> value;
};

enum class ScoreSource { trained, analytic_gaussian, analytic_mixture };
std::string to_string(ScoreSource s);

struct PipelineConfig {
  std::size_t d = 1024;
  std::size_t m = 256;
  std::size_t sparsity = 10;
  std::size_t n_train = 2000;
  std::size_t n_generate = 100;
  AmplitudeLaw amplitude = AmplitudeLaw::uniform;
  std::uint64_t seed = 0;
  LambdaPolicy lambda;
  std::size_t fista_max_iter = 2000;
  double fista_tol = 1e-6;
  bool debias = false;
  double support_threshold_rel = 1e-6;
  // Training points recovered for the FISTA-only error floor.
  std::size_t n_floor = 100;
  ScoreSource score = ScoreSource::trained;
  diffusion::VpSchedule schedule = diffusion::VpSchedule::standard();
  diffusion::TrainConfig train;
  diffusion::SamplerConfig sampler;
  // Also time a same-architecture model in R^d for the ambient estimate.
  bool ambient_timing = false;

  void validate() const;
};

nlohmann::json config_to_json(const PipelineConfig& c);
PipelineConfig config_from_json(const nlohmann::json& j);

struct TimingReport {
  double t_diff_m = 0.0;            // seconds per latent sample
  double t_cs = 0.0;                // seconds per FISTA decode
  double t_diff_d_estimated = 0.0;  // (d / m) t_diff_m
  double speedup = 0.0;             // 1 - (m/d)(1 + t_cs / t_diff_m)
  std::optional<double> t_diff_d_measured;
  double train_s = 0.0;
  std::string hardware_note;
};

// Times must be finite with t_diff_m > 0 and t_cs >= 0.
TimingReport measure_speedup(double t_diff_m, double t_cs, std::size_t m, std::size_t d);

struct SampleError {
  double distance = 0.0;    // min l2 distance to the reference set
  std::size_t nearest = 0;  // index of that reference
  double precision = 0.0;   // |supp(x) & supp(ref)| / |supp(x)|, 0 when supp(x) is empty
  double recall = 0.0;      // |supp(x) & supp(ref)| / |supp(ref)|, 1 when supp(ref) is empty
  std::size_t support_size = 0;
};

struct ErrorSummary {
  double mean = 0.0, median = 0.0, q10 = 0.0, q25 = 0.0, q75 = 0.0, q90 = 0.0, max = 0.0;
  double precision_mean = 0.0, recall_mean = 0.0;
};

struct EndToEndError {
  std::vector<SampleError> per_sample;
  ErrorSummary summary;
};

EndToEndError end_to_end_error(std::span<const Vector> samples, std::span<const Vector> reference,
                               double threshold_rel = 1e-6);

struct SolverSummary {
  double median_iterations = 0.0;
  std::size_t max_iterations = 0;
  std::size_t stopped_tolerance = 0;
  std::size_t stopped_max_iter = 0;
};

struct PipelineReport {
  PipelineConfig config;
  TimingReport timing;
  double latent_scale = 1.0;  // latents are divided by this before diffusion
  double sigma_hat = 0.0;     // median latent residual to the compressed training set
  double lambda = 0.0;
  double initial_window_loss = 0.0;
  double final_window_loss = 0.0;
  EndToEndError generated;
  EndToEndError floor;
  SolverSummary solver;
  std::vector<double> latent_residuals;  // |A x_hat - y_tilde| per generated sample
};

nlohmann::json report_to_json(const PipelineReport& r);
PipelineReport report_from_json(const nlohmann::json& j);
// Report JSON without wall-clock fields, for run-to-run comparison.
nlohmann::json strip_timing(nlohmann::json report);

// Per-sample error table: index,distance,nearest,precision,recall,support_size,latent_residual
std::string errors_to_csv(const PipelineReport& r);

PipelineReport run_pipeline(const PipelineConfig& cfg);

// Optimal-m sweep.
enum class CostModel { theoretical, measured };
std::string to_string(CostModel c);

struct SweepPoint {
  std::size_t m = 0;
  double cost = 0.0;
  double diffusion_steps = 0.0;  // measured mode: k'
  double fista_steps = 0.0;      // measured mode: k
};

struct SweepResult {
  CostModel model = CostModel::theoretical;
  std::size_t d = 0;
  std::size_t sparsity = 0;
  std::vector<SweepPoint> points;
  std::size_t argmin = 0;  // m with the smallest cost; ties go to the smaller m
};

// max(m, d/m + sqrt(S))
double theoretical_cost(std::size_t m, std::size_t d, std::size_t sparsity);

struct MeasuredSweepOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 4;         // sparse recovery instances per m
  // Absolute accuracy asked of both stages: |x_k - x|_2 for FISTA and the
  // latent W2 distance for the sampler, run on the unscaled latent.
  double target_error = 3e-3;
  std::size_t fista_max_iter = 20000;
  std::size_t max_diffusion_steps = 1 << 20;
  diffusion::VpSchedule schedule = diffusion::VpSchedule::standard();
};

SweepResult optimal_m_sweep(std::size_t d, std::size_t sparsity, std::span<const std::size_t> m_grid,
                            CostModel model, const MeasuredSweepOptions& opts = {});

std::string sweep_to_csv(const SweepResult& r);
nlohmann::json sweep_to_json(const SweepResult& r);

}  // namespace csdm::pipeline
