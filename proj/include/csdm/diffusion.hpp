#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "csdm/linalg.hpp"
#include "csdm/mlp.hpp"
#include "csdm/rng.hpp"
#include "csdm/vendor_json.hpp"

namespace csdm::diffusion {

// Forward SDE dX = -1/2 beta(t) X dt + sqrt(beta(t)) dB with beta(t) = a t + b.
struct VpSchedule {
  double a = 19.9;
  double b = 0.1;
  double horizon = 1.0;
  double t_min = 1e-3;

  // a = 19.9 / T^2, b = 0.1 / T.
  static VpSchedule standard(double horizon = 1.0, double t_min = 1e-3);
  double beta(double t) const noexcept { return a * t + b; }
  void validate() const;
};

struct AlphaSigma {
  double alpha;
  double sigma;
};

// alpha_t = exp(-(a t^2 / 4 + b t / 2)), sigma_t = sqrt(1 - alpha_t^2).
AlphaSigma vp_alpha_sigma(const VpSchedule& s, double t);

struct Perturbed {
  Vector x_t;
  Vector eps;
};
Perturbed forward_perturb(const VpSchedule& s, std::span<const double> x0, double t, RngStream& rng);

enum class ModelKind { trained_network, analytic_gaussian, analytic_spike_mixture };
std::string to_string(ModelKind k);

enum class Weighting { sigma_squared, elbo };
std::string to_string(Weighting w);
Weighting weighting_from_string(const std::string& s);

enum class LrSchedule { constant, cosine };
std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& s);

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t steps = 3000;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::cosine;
  Weighting weighting = Weighting::sigma_squared;
  std::uint64_t seed = 0;
  // Time-sampling range; unset means [schedule.t_min, schedule.horizon].
  std::optional<double> t_lo;
  std::optional<double> t_hi;
  std::vector<std::size_t> hidden = {128, 128};
  std::size_t time_features = 16;
  // Network output F enters as eps_hat = sigma_t x + alpha_t F.
  bool skip = true;

  void validate() const;
};

struct TrainingRecord {
  TrainConfig config;
  std::vector<double> loss_history;  // one entry per step
  double initial_window_loss = 0.0;  // mean over the first 10% of steps
  double final_window_loss = 0.0;    // mean over the last 10% of steps
};

// Sinusoidal embedding of t / horizon: (sin(w_j u), cos(w_j u)) for
// w_j = 100^{j/(F/2-1)}.
void time_features(double t, double horizon, std::span<double> out);

struct NetworkParams {
  nn::Mlp mlp;
  std::size_t data_dim = 0;
  std::size_t time_features = 16;
  // eps_hat = sigma_t x + alpha_t F(x, t) when set, eps_hat = F otherwise.
  bool skip = true;
  std::optional<TrainingRecord> training;
};

struct GaussianParams {
  Vector mean;
  Matrix cov;
  // Eigen-decomposition of cov, cached at construction.
  Vector cov_values;
  Matrix cov_vectors;
};

// Weighted point masses c_k blurred by an isotropic N(0, spread^2 I).
struct SpikeMixtureParams {
  std::vector<Vector> centers;
  Vector weights;
  double spread = 0.0;
};

// Noise-prediction model eps(t, x); the score is -eps / sigma_t.
class ScoreModel {
 public:
  static ScoreModel network(NetworkParams p);
  static ScoreModel gaussian(Vector mean, Matrix cov);
  static ScoreModel spike_mixture(std::vector<Vector> centers, Vector weights, double spread = 0.0);
  static ScoreModel point_mass(Vector c) { return spike_mixture({std::move(c)}, {1.0}); }

  ModelKind kind() const noexcept;
  std::size_t dim() const noexcept;

  // Rows of x are states; t[i] is the time of row i (size 1 broadcasts).
  Matrix predict_noise(const VpSchedule& s, std::span<const double> t, const Matrix& x) const;
  Matrix score(const VpSchedule& s, std::span<const double> t, const Matrix& x) const;
  Vector predict_noise(const VpSchedule& s, double t, std::span<const double> x) const;
  Vector score(const VpSchedule& s, double t, std::span<const double> x) const;

  const NetworkParams* network_params() const noexcept { return std::get_if<NetworkParams>(&v_); }
  NetworkParams* network_params() noexcept { return std::get_if<NetworkParams>(&v_); }
  const GaussianParams* gaussian_params() const noexcept { return std::get_if<GaussianParams>(&v_); }
  const SpikeMixtureParams* spike_params() const noexcept {
    return std::get_if<SpikeMixtureParams>(&v_);
  }

 private:
  std::variant<NetworkParams, GaussianParams, SpikeMixtureParams> v_;
};

// Closed-form score of the VP marginal for the analytic kinds.
Vector analytic_score(const ScoreModel& oracle, const VpSchedule& s, double t,
                      std::span<const double> x);

// Log density of the VP marginal at (t, x) for the analytic kinds.
double analytic_log_density(const ScoreModel& oracle, const VpSchedule& s, double t,
                            std::span<const double> x);

// One (t, eps) pair per batch element.
struct NoiseDraw {
  double t;
  Vector eps;
};
std::vector<NoiseDraw> draw_noise(std::size_t count, std::size_t dim, double t_lo, double t_hi,
                                  RngStream& rng);

// lambda_t / sigma_t^2: 1 for sigma_squared, beta(t) / sigma_t^2 for elbo.
double loss_weight(const VpSchedule& s, Weighting w, double t);

// Mean over the batch of w(t_i) |eps_hat(t_i, alpha x0_i + sigma eps_i) - eps_i|^2.
double dsm_loss(const VpSchedule& s, const ScoreModel& model, std::span<const Vector> batch,
                std::span<const NoiseDraw> draws, Weighting w);
double dsm_loss(const VpSchedule& s, const ScoreModel& model, std::span<const Vector> batch,
                const TrainConfig& cfg, RngStream& rng);
// Same loss for a network model, with dL/dparams written to grad.
double dsm_loss_gradient(const VpSchedule& s, const NetworkParams& net,
                         std::span<const Vector> batch, std::span<const NoiseDraw> draws,
                         Weighting w, Vector& grad);

ScoreModel train(const VpSchedule& s, std::span<const Vector> data, const TrainConfig& cfg);

enum class SamplerKind { stochastic, deterministic };
enum class GridKind { uniform, exponential };
std::string to_string(SamplerKind k);
std::string to_string(GridKind k);
SamplerKind sampler_kind_from_string(const std::string& s);
GridKind grid_kind_from_string(const std::string& s);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::stochastic;
  std::size_t steps = 1000;
  GridKind grid = GridKind::uniform;
  std::uint64_t seed = 0;

  void validate() const;
};

// steps + 1 strictly decreasing times from horizon to t_min.
Vector time_grid(const VpSchedule& s, std::size_t steps, GridKind grid);

// Euler-Maruyama on the reverse SDE, Y_0 ~ N(0, I), stopping at t_min.
// Chain i draws from RngStream(cfg.seed).split(first_chain + i), so a chain's
// output does not depend on how chains are batched.
std::vector<Vector> sample_stochastic(const ScoreModel& model, const VpSchedule& s,
                                      const SamplerConfig& cfg, std::size_t n,
                                      std::size_t first_chain = 0);
// Heun steps on the probability-flow ODE, same start and stop.
std::vector<Vector> sample_deterministic(const ScoreModel& model, const VpSchedule& s,
                                         const SamplerConfig& cfg, std::size_t n,
                                         std::size_t first_chain = 0);
// Dispatches on cfg.kind.
std::vector<Vector> sample(const ScoreModel& model, const VpSchedule& s, const SamplerConfig& cfg,
                           std::size_t n, std::size_t first_chain = 0);

// sqrt(E |s_model - s_oracle|^2) over t ~ U[t_min, T], x_t drawn from the
// forward marginal started at the probe points.
double score_matching_error(const ScoreModel& model, const ScoreModel& oracle,
                            const VpSchedule& s, std::span<const Vector> probe,
                            std::size_t draws_per_point, RngStream& rng);

nlohmann::json schedule_to_json(const VpSchedule& s);
VpSchedule schedule_from_json(const nlohmann::json& j, const std::string& path = "schedule");
nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train");
nlohmann::json sampler_config_to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const nlohmann::json& j, const std::string& path = "sampler");

// One JSON header line, then for network models the weights as little-endian
// float64.
void save_model(const std::string& path, const ScoreModel& model, const VpSchedule& s);
struct LoadedModel {
  ScoreModel model;
  VpSchedule schedule;
};
LoadedModel load_model(const std::string& path);

// One sample per row, full precision.
std::string samples_to_csv(std::span<const Vector> samples);

}  // namespace csdm::diffusion
