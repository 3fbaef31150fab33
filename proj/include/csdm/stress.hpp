#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "csdm/diffusion.hpp"
#include "csdm/linalg.hpp"
#include "csdm/mlp.hpp"
#include "csdm/vendor_json.hpp"

namespace csdm::stress {

// Time x column table. Rows are ordered by time; values has no missing entries.
struct FactorPanel {
  std::vector<std::string> times;
  std::vector<std::string> names;
  Matrix values;

  std::size_t periods() const noexcept { return values.rows(); }
  std::size_t width() const noexcept { return values.cols(); }
  void validate() const;
};
using ReturnPanel = FactorPanel;

struct PanelLoad {
  FactorPanel panel;
  std::vector<std::size_t> imputed;  // cells filled per column
};

// CSV with a header row whose first column is `date` (ISO-8601); the rest are
// numeric. Empty, NA and NaN cells are missing: forward-filled, then any
// leading gap gets the column mean of observed values.
PanelLoad parse_panel_csv(const std::string& text);
PanelLoad load_panel_csv(const std::string& path);
std::string panel_to_csv(const FactorPanel& p);

// Rows [begin, end).
FactorPanel slice_rows(const FactorPanel& p, std::size_t begin, std::size_t end);

// Per-column z-score.
struct Standardizer {
  Vector mean;
  Vector scale;  // sample std, 1 for constant columns
  Vector apply(std::span<const double> x) const;
  Vector invert(std::span<const double> z) const;
};
Standardizer fit_standardizer(const Matrix& rows);
Matrix standardize_rows(const Standardizer& s, const Matrix& rows);

struct PcaModel {
  Vector mean;
  Matrix components;  // k x d, orthonormal rows
  Vector explained;   // fraction of total variance per component, non-increasing
  double total_variance = 0.0;
  std::size_t k() const noexcept { return components.rows(); }
  std::size_t dim() const noexcept { return components.cols(); }
};

// Top-k eigenvectors of the sample covariance of `rows`. Each component's
// largest-magnitude loading is positive. Components whose eigenvalue is below
// 1e-12 of the total variance are dropped with a warning.
PcaModel pca_fit(const Matrix& rows, std::size_t k);
Vector pca_encode(const PcaModel& model, std::span<const double> x);
Vector pca_decode(const PcaModel& model, std::span<const double> z);
double cumulative_explained(const PcaModel& model);

// Stressed factors take `levels`; all others keep their current value.
struct Scenario {
  std::vector<std::size_t> indices;
  Vector levels;
};
Vector ssa_stress(std::span<const double> x_t, const Scenario& scenario);

enum class PredictorKind { linear_regression, trained_network };
std::string to_string(PredictorKind k);
PredictorKind predictor_kind_from_string(const std::string& s);

// Optional input map applied before the model: z-score, then PCA encoding.
struct InputTransform {
  std::optional<Standardizer> standardizer;
  std::optional<PcaModel> pca;
  Vector apply(std::span<const double> x) const;
  std::size_t input_dim(std::size_t fallback) const;
  std::size_t output_dim(std::size_t fallback) const;
};

struct Predictor {
  PredictorKind kind = PredictorKind::linear_regression;
  InputTransform transform;
  Matrix coef;      // linear: assets x features
  Vector intercept; // linear: assets
  nn::Mlp network;  // trained-network: features -> assets (standardized targets)
  Vector target_mean, target_scale;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
};

struct NetworkFitOptions {
  std::vector<std::size_t> hidden = {32, 32};
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

// OLS of each return column on the transformed factors plus an intercept.
Predictor fit_linear_predictor(const Matrix& factors, const Matrix& returns,
                               InputTransform transform = {});
Predictor fit_network_predictor(const Matrix& factors, const Matrix& returns,
                                InputTransform transform = {}, const NetworkFitOptions& opts = {});
Vector predict_returns(const Predictor& p, std::span<const double> x);
double r_squared(const Predictor& p, const Matrix& factors, const Matrix& returns);

enum class WeightKind { equal, gmvp_long_only, risk_parity };
std::string to_string(WeightKind k);
WeightKind weight_kind_from_string(const std::string& s);

struct PortfolioWeights {
  Vector w;
  WeightKind kind = WeightKind::equal;
  double kkt_residual = 0.0;  // gmvp: long-only QP optimality residual
  bool ridge_applied = false;
};

struct WeightOptions {
  double kkt_tol = 1e-10;
  std::size_t max_iter = 100000;
  double risk_parity_tol = 1e-10;
};

PortfolioWeights portfolio_weights(WeightKind kind, const Matrix& cov, const WeightOptions& opts = {});
// Largest violation of the long-only minimum-variance KKT conditions at w.
double gmvp_kkt_residual(const Matrix& cov, std::span<const double> w);
// w_i (cov w)_i
Vector risk_contributions(const Matrix& cov, std::span<const double> w);
double portfolio_return(const PortfolioWeights& w, std::span<const double> y);

// Sample covariance of the rows (n - 1 denominator).
Matrix sample_covariance(const Matrix& rows);

struct QuantileStats {
  double mean = 0.0, median = 0.0, std = 0.0;
  Vector levels;     // alpha values
  Vector quantiles;  // Q_alpha, linear interpolation between order statistics
  Vector var;        // -Q_alpha
};
inline const Vector kReportLevels = {0.01, 0.05, 0.10, 0.25};
QuantileStats quantile_stats(std::span<const double> returns, std::span<const double> levels = kReportLevels);

struct BacktestOptions {
  // Covariance for the weights: per-period returns in the window, or returns
  // summed over non-overlapping blocks of `horizon` periods.
  std::size_t horizon = 1;
  WeightOptions weights;
};

struct KindSeries {
  WeightKind kind;
  Vector returns;  // V_{t+1} per evaluated period
  QuantileStats stats;
};

struct StressReport {
  std::string source;  // "real" or "generated"
  std::size_t window = 0;
  std::vector<std::size_t> stressed;
  std::vector<std::string> stressed_names;
  std::size_t periods = 0;
  std::string alignment = "contemporaneous";
  std::size_t covariance_horizon = 1;
  std::vector<KindSeries> series;
};

// For each t in [window, T - 1): stress x_t with the realized x_{S, t+1},
// predict, weight from the returns in [t - window, t) and record w^T y.
StressReport rolling_backtest(const FactorPanel& factors, const ReturnPanel& returns, std::size_t window,
                              const std::vector<std::size_t>& stressed, const Predictor& p,
                              const std::vector<WeightKind>& kinds, const BacktestOptions& opts = {});

// Same procedure on generated transitions (x_t, x_{t+1}). Transition i uses
// the weights of period window + (i mod (T - 1 - window)).
StressReport generated_backtest(const std::vector<std::pair<Vector, Vector>>& transitions,
                                const ReturnPanel& returns, std::size_t window,
                                const std::vector<std::size_t>& stressed, const Predictor& p,
                                const std::vector<WeightKind>& kinds, const BacktestOptions& opts = {});

nlohmann::json stress_report_to_json(const StressReport& r);
// Rows: Mean, Median, Std Dev, 1% Quantile, 5% ..., columns: one per kind.
std::string stress_table_csv(const StressReport& r);

// Diffusion model over consecutive PC pairs [z_t, z_{t+1}] of standardized
// factors, decoded back to factor units.
struct PcGeneratorConfig {
  std::size_t components = 3;
  diffusion::VpSchedule schedule = diffusion::VpSchedule::standard();
  diffusion::TrainConfig train;
  diffusion::SamplerConfig sampler;
};

struct PcGenerator {
  Standardizer factor_scaler;
  PcaModel pca;
  Standardizer pair_scaler;
  diffusion::ScoreModel model;
  diffusion::VpSchedule schedule;
};

PcGenerator fit_pc_generator(const Matrix& factors, const PcGeneratorConfig& cfg);
std::vector<std::pair<Vector, Vector>> generate_transitions(const PcGenerator& g,
                                                            const diffusion::SamplerConfig& sampler,
                                                            std::size_t count);

// Ground truth for tests: three AR(1) drivers, factors linear in the drivers
// plus noise, asset returns linear in the drivers plus noise.
struct SyntheticMarketSpec {
  std::size_t periods = 600;
  std::size_t factors = 12;
  std::size_t assets = 6;
  double persistence = 0.5;
  double factor_noise = 0.3;
  double return_noise = 0.01;
  std::uint64_t seed = 0;
};

struct SyntheticMarket {
  FactorPanel factors;
  ReturnPanel returns;
  Matrix factor_loadings;  // factors x 3
  Matrix return_loadings;  // assets x 3
};

SyntheticMarket synth_market(const SyntheticMarketSpec& spec);

}  // namespace csdm::stress
