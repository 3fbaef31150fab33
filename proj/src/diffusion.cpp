#include "csdm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

#include "csdm/error.hpp"
#include "csdm/json_fields.hpp"

namespace csdm::diffusion {

namespace {

constexpr const char* kModelFormat = "csdm-score-model";
constexpr int kModelVersion = 1;

void check_time(const VpSchedule& s, double t, const char* who) {
  if (!(t >= 0.0 && t <= s.horizon))
    throw InvalidArgument(std::string(who) + ": t = " + std::to_string(t) + " outside [0, " +
                          std::to_string(s.horizon) + "]");
}

void check_positive_time(const VpSchedule& s, double t, const char* who) {
  check_time(s, t, who);
  if (t <= 0.0) throw InvalidArgument(std::string(who) + ": t must be > 0");
}

double time_at(std::span<const double> t, std::size_t i) { return t.size() == 1 ? t[0] : t[i]; }

void check_times(std::span<const double> t, std::size_t rows, const char* who) {
  if (t.size() != 1 && t.size() != rows)
    throw InvalidArgument(std::string(who) + ": need one time or one per row");
}

}  // namespace

VpSchedule VpSchedule::standard(double horizon, double t_min) {
  VpSchedule s;
  s.horizon = horizon;
  s.t_min = t_min;
  s.a = 19.9 / (horizon * horizon);
  s.b = 0.1 / horizon;
  s.validate();
  return s;
}

void VpSchedule::validate() const {
  if (!(a >= 0.0) || !std::isfinite(a)) throw InvalidArgument("VpSchedule: a must be >= 0");
  if (!(b > 0.0) || !std::isfinite(b)) throw InvalidArgument("VpSchedule: b must be > 0");
  if (!(horizon > 0.0) || !std::isfinite(horizon))
    throw InvalidArgument("VpSchedule: horizon must be > 0");
  if (!(t_min > 0.0 && t_min < horizon))
    throw InvalidArgument("VpSchedule: t_min must lie in (0, horizon)");
}

AlphaSigma vp_alpha_sigma(const VpSchedule& s, double t) {
  check_time(s, t, "vp_alpha_sigma");
  const double e = s.a * t * t / 4.0 + s.b * t / 2.0;
  return {std::exp(-e), std::sqrt(-std::expm1(-2.0 * e))};
}

Perturbed forward_perturb(const VpSchedule& s, std::span<const double> x0, double t,
                          RngStream& rng) {
  const auto [alpha, sigma] = vp_alpha_sigma(s, t);
  Perturbed p{Vector(x0.size()), Vector(x0.size())};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    p.eps[i] = rng.normal();
    p.x_t[i] = alpha * x0[i] + sigma * p.eps[i];
  }
  return p;
}

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::trained_network: return "trained-network";
    case ModelKind::analytic_gaussian: return "analytic-gaussian";
    case ModelKind::analytic_spike_mixture: return "analytic-spike-mixture";
  }
  return "?";
}

std::string to_string(Weighting w) { return w == Weighting::elbo ? "elbo" : "sigma-squared"; }

Weighting weighting_from_string(const std::string& s) {
  if (s == "sigma-squared") return Weighting::sigma_squared;
  if (s == "elbo") return Weighting::elbo;
  throw InvalidArgument("unknown weighting '" + s + "' (sigma-squared | elbo)");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw InvalidArgument("unknown learning-rate schedule '" + s + "' (constant | cosine)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw InvalidArgument("TrainConfig: batch_size must be positive");
  if (steps == 0) throw InvalidArgument("TrainConfig: steps must be positive");
  if (!(learning_rate > 0.0)) throw InvalidArgument("TrainConfig: learning_rate must be > 0");
  if (time_features == 0 || time_features % 2 != 0)
    throw InvalidArgument("TrainConfig: time_features must be a positive even count");
  for (auto h : hidden)
    if (h == 0) throw InvalidArgument("TrainConfig: hidden widths must be positive");
  if (t_lo && t_hi && !(*t_lo < *t_hi)) throw InvalidArgument("TrainConfig: need t_lo < t_hi");
}

void time_features(double t, double horizon, std::span<double> out) {
  const std::size_t half = out.size() / 2;
  const double u = t / horizon;
  for (std::size_t j = 0; j < half; ++j) {
    const double w = half > 1 ? std::pow(100.0, static_cast<double>(j) / (half - 1)) : 1.0;
    out[2 * j] = std::sin(w * u);
    out[2 * j + 1] = std::cos(w * u);
  }
}

// ---------------------------------------------------------------- ScoreModel

ScoreModel ScoreModel::network(NetworkParams p) {
  if (p.time_features == 0 || p.time_features % 2 != 0)
    throw InvalidArgument("ScoreModel::network: time_features must be a positive even count");
  if (p.mlp.widths().empty() || p.mlp.input_dim() != p.data_dim + p.time_features ||
      p.mlp.output_dim() != p.data_dim)
    throw InvalidArgument("ScoreModel::network: widths do not match data_dim + time_features");
  ScoreModel m;
  m.v_ = std::move(p);
  return m;
}

ScoreModel ScoreModel::gaussian(Vector mean, Matrix cov) {
  const std::size_t d = mean.size();
  if (d == 0) throw InvalidArgument("ScoreModel::gaussian: empty mean");
  if (cov.rows() != d || cov.cols() != d)
    throw InvalidArgument("ScoreModel::gaussian: covariance shape mismatch");
  if (!all_finite(mean) || !cov.all_finite())
    throw InvalidArgument("ScoreModel::gaussian: non-finite parameters");
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(cov(i, j) - cov(j, i)) > 1e-12 * (std::abs(cov(i, j)) + std::abs(cov(j, i))))
        throw InvalidArgument("ScoreModel::gaussian: covariance not symmetric");
  auto eig = symmetric_eigen(cov);
  const double top = std::max(eig.values.back(), 0.0);
  if (!(eig.values.front() > 1e-12 * top) || top == 0.0)
    throw InvalidArgument("ScoreModel::gaussian: singular covariance");
  ScoreModel m;
  m.v_ = GaussianParams{std::move(mean), std::move(cov), std::move(eig.values),
                        std::move(eig.vectors)};
  return m;
}

ScoreModel ScoreModel::spike_mixture(std::vector<Vector> centers, Vector weights, double spread) {
  if (centers.empty()) throw InvalidArgument("ScoreModel::spike_mixture: no centers");
  if (weights.size() != centers.size())
    throw InvalidArgument("ScoreModel::spike_mixture: one weight per center required");
  const std::size_t d = centers.front().size();
  if (d == 0) throw InvalidArgument("ScoreModel::spike_mixture: empty centers");
  double total = 0.0;
  for (std::size_t k = 0; k < centers.size(); ++k) {
    if (centers[k].size() != d || !all_finite(centers[k]))
      throw InvalidArgument("ScoreModel::spike_mixture: inconsistent or non-finite center");
    if (!(weights[k] > 0.0) || !std::isfinite(weights[k]))
      throw InvalidArgument("ScoreModel::spike_mixture: weights must be positive");
    total += weights[k];
  }
  if (!(spread >= 0.0) || !std::isfinite(spread))
    throw InvalidArgument("ScoreModel::spike_mixture: spread must be >= 0");
  for (double& w : weights) w /= total;
  ScoreModel m;
  m.v_ = SpikeMixtureParams{std::move(centers), std::move(weights), spread};
  return m;
}

ModelKind ScoreModel::kind() const noexcept {
  switch (v_.index()) {
    case 0: return ModelKind::trained_network;
    case 1: return ModelKind::analytic_gaussian;
    default: return ModelKind::analytic_spike_mixture;
  }
}

std::size_t ScoreModel::dim() const noexcept {
  if (auto* n = std::get_if<NetworkParams>(&v_)) return n->data_dim;
  if (auto* g = std::get_if<GaussianParams>(&v_)) return g->mean.size();
  return std::get<SpikeMixtureParams>(v_).centers.front().size();
}

namespace {

Matrix network_input(const NetworkParams& net, const VpSchedule& s, std::span<const double> t,
                     const Matrix& x) {
  const std::size_t d = net.data_dim, f = net.time_features;
  Matrix in(x.rows(), d + f);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = in.row(r);
    std::copy(x.row(r).begin(), x.row(r).end(), row.begin());
    time_features(time_at(t, r), s.horizon, row.subspan(d, f));
  }
  return in;
}

// eps_hat = sigma_t x + alpha_t F(x, t)
void apply_skip(const VpSchedule& s, std::span<const double> t, const Matrix& x, Matrix& out) {
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const auto [alpha, sigma] = vp_alpha_sigma(s, time_at(t, r));
    auto o = out.row(r);
    const auto xr = x.row(r);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigma * xr[i] + alpha * o[i];
  }
}

void gaussian_score_row(const GaussianParams& g, double alpha, double sigma,
                        std::span<const double> x, std::span<double> out, Vector& v,
                        Vector& c) {
  const std::size_t d = g.mean.size();
  v.resize(d);
  c.resize(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = x[i] - alpha * g.mean[i];
  matvec_t(g.cov_vectors, v, c);
  for (std::size_t j = 0; j < d; ++j) c[j] /= alpha * alpha * g.cov_values[j] + sigma * sigma;
  matvec(g.cov_vectors, c, out);
  for (double& o : out) o = -o;
}

void spike_score_row(const SpikeMixtureParams& p, double alpha, double sigma,
                     std::span<const double> x, std::span<double> out) {
  const double var = alpha * alpha * p.spread * p.spread + sigma * sigma;
  const std::size_t k = p.centers.size(), d = x.size();
  Vector logit(k);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    double q = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double r = x[i] - alpha * p.centers[c][i];
      q += r * r;
    }
    logit[c] = std::log(p.weights[c]) - q / (2.0 * var);
    top = std::max(top, logit[c]);
  }
  double z = 0.0;
  for (double& l : logit) z += (l = std::exp(l - top));
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    const double r = logit[c] / z;
    if (r == 0.0) continue;
    for (std::size_t i = 0; i < d; ++i) out[i] -= r * (x[i] - alpha * p.centers[c][i]) / var;
  }
}

}  // namespace

Matrix ScoreModel::predict_noise(const VpSchedule& s, std::span<const double> t,
                                 const Matrix& x) const {
  check_times(t, x.rows(), "predict_noise");
  if (x.cols() != dim()) throw InvalidArgument("predict_noise: state dimension mismatch");
  if (auto* net = std::get_if<NetworkParams>(&v_)) {
    for (double ti : t) check_positive_time(s, ti, "predict_noise");
    Matrix out = net->mlp.forward(network_input(*net, s, t, x));
    if (net->skip) apply_skip(s, t, x, out);
    return out;
  }
  Matrix out = score(s, t, x);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const double sigma = vp_alpha_sigma(s, time_at(t, r)).sigma;
    for (double& v : out.row(r)) v = -sigma * v;
  }
  return out;
}

Matrix ScoreModel::score(const VpSchedule& s, std::span<const double> t, const Matrix& x) const {
  check_times(t, x.rows(), "score");
  if (x.cols() != dim()) throw InvalidArgument("score: state dimension mismatch");
  for (double ti : t) check_positive_time(s, ti, "score");
  if (std::holds_alternative<NetworkParams>(v_)) {
    Matrix eps = predict_noise(s, t, x);
    for (std::size_t r = 0; r < eps.rows(); ++r) {
      const double sigma = vp_alpha_sigma(s, time_at(t, r)).sigma;
      for (double& v : eps.row(r)) v = -v / sigma;
    }
    return eps;
  }
  Matrix out(x.rows(), x.cols());
  Vector v, c;
  AlphaSigma as = vp_alpha_sigma(s, t[0]);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (t.size() > 1 && r > 0) as = vp_alpha_sigma(s, t[r]);
    const auto [alpha, sigma] = as;
    if (auto* g = std::get_if<GaussianParams>(&v_))
      gaussian_score_row(*g, alpha, sigma, x.row(r), out.row(r), v, c);
    else
      spike_score_row(std::get<SpikeMixtureParams>(v_), alpha, sigma, x.row(r), out.row(r));
  }
  return out;
}

Vector ScoreModel::predict_noise(const VpSchedule& s, double t, std::span<const double> x) const {
  const Matrix m = predict_noise(s, std::span<const double>(&t, 1),
                                 Matrix(1, x.size(), Vector(x.begin(), x.end())));
  return m.entries();
}

Vector ScoreModel::score(const VpSchedule& s, double t, std::span<const double> x) const {
  const Matrix m =
      score(s, std::span<const double>(&t, 1), Matrix(1, x.size(), Vector(x.begin(), x.end())));
  return m.entries();
}

Vector analytic_score(const ScoreModel& oracle, const VpSchedule& s, double t,
                      std::span<const double> x) {
  if (oracle.kind() == ModelKind::trained_network)
    throw InvalidArgument("analytic_score: model is not analytic");
  return oracle.score(s, t, x);
}

double analytic_log_density(const ScoreModel& oracle, const VpSchedule& s, double t,
                            std::span<const double> x) {
  check_positive_time(s, t, "analytic_log_density");
  if (x.size() != oracle.dim()) throw InvalidArgument("analytic_log_density: dimension mismatch");
  const auto [alpha, sigma] = vp_alpha_sigma(s, t);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  const std::size_t d = x.size();
  if (const auto* g = oracle.gaussian_params()) {
    Vector v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = x[i] - alpha * g->mean[i];
    const Vector c = matvec_t(g->cov_vectors, v);
    double out = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double var = alpha * alpha * g->cov_values[j] + sigma * sigma;
      out -= 0.5 * (c[j] * c[j] / var + std::log(var) + log2pi);
    }
    return out;
  }
  if (const auto* p = oracle.spike_params()) {
    const double var = alpha * alpha * p->spread * p->spread + sigma * sigma;
    Vector logit(p->centers.size());
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < logit.size(); ++c) {
      double q = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double r = x[i] - alpha * p->centers[c][i];
        q += r * r;
      }
      logit[c] = std::log(p->weights[c]) - q / (2.0 * var);
      top = std::max(top, logit[c]);
    }
    double z = 0.0;
    for (double l : logit) z += std::exp(l - top);
    return top + std::log(z) - 0.5 * static_cast<double>(d) * (std::log(var) + log2pi);
  }
  throw InvalidArgument("analytic_log_density: model is not analytic");
}

// ---------------------------------------------------------------- loss

std::vector<NoiseDraw> draw_noise(std::size_t count, std::size_t dim, double t_lo, double t_hi,
                                  RngStream& rng) {
  if (!(t_lo < t_hi)) throw InvalidArgument("draw_noise: need t_lo < t_hi");
  std::vector<NoiseDraw> out(count);
  for (auto& d : out) {
    d.t = rng.uniform(t_lo, t_hi);
    d.eps.resize(dim);
    for (double& e : d.eps) e = rng.normal();
  }
  return out;
}

double loss_weight(const VpSchedule& s, Weighting w, double t) {
  if (w == Weighting::sigma_squared) return 1.0;
  const double sigma = vp_alpha_sigma(s, t).sigma;
  return s.beta(t) / (sigma * sigma);
}

namespace {

struct PreparedBatch {
  Vector t;
  Matrix x_t;
  Matrix eps;
};

PreparedBatch prepare(const VpSchedule& s, std::size_t dim, std::span<const Vector> batch,
                      std::span<const NoiseDraw> draws) {
  if (batch.empty()) throw InvalidArgument("dsm_loss: empty batch");
  if (draws.size() != batch.size()) throw InvalidArgument("dsm_loss: one draw per sample required");
  PreparedBatch p{Vector(batch.size()), Matrix(batch.size(), dim), Matrix(batch.size(), dim)};
  for (std::size_t r = 0; r < batch.size(); ++r) {
    if (batch[r].size() != dim || draws[r].eps.size() != dim)
      throw InvalidArgument("dsm_loss: sample dimension mismatch");
    check_positive_time(s, draws[r].t, "dsm_loss");
    const auto [alpha, sigma] = vp_alpha_sigma(s, draws[r].t);
    p.t[r] = draws[r].t;
    for (std::size_t i = 0; i < dim; ++i) {
      p.eps(r, i) = draws[r].eps[i];
      p.x_t(r, i) = alpha * batch[r][i] + sigma * draws[r].eps[i];
    }
  }
  return p;
}

double weighted_residual(const VpSchedule& s, Weighting w, const PreparedBatch& p,
                         const Matrix& pred, Matrix* grad_out) {
  const std::size_t n = pred.rows();
  if (grad_out) *grad_out = Matrix(n, pred.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double wt = loss_weight(s, w, p.t[r]);
    double q = 0.0;
    for (std::size_t i = 0; i < pred.cols(); ++i) {
      const double e = pred(r, i) - p.eps(r, i);
      q += e * e;
      if (grad_out) (*grad_out)(r, i) = 2.0 * wt * e / static_cast<double>(n);
    }
    total += wt * q;
  }
  return total / static_cast<double>(n);
}

}  // namespace

double dsm_loss(const VpSchedule& s, const ScoreModel& model, std::span<const Vector> batch,
                std::span<const NoiseDraw> draws, Weighting w) {
  const PreparedBatch p = prepare(s, model.dim(), batch, draws);
  return weighted_residual(s, w, p, model.predict_noise(s, p.t, p.x_t), nullptr);
}

double dsm_loss(const VpSchedule& s, const ScoreModel& model, std::span<const Vector> batch,
                const TrainConfig& cfg, RngStream& rng) {
  const auto draws = draw_noise(batch.size(), model.dim(), cfg.t_lo.value_or(s.t_min),
                                cfg.t_hi.value_or(s.horizon), rng);
  return dsm_loss(s, model, batch, draws, cfg.weighting);
}

double dsm_loss_gradient(const VpSchedule& s, const NetworkParams& net,
                         std::span<const Vector> batch, std::span<const NoiseDraw> draws,
                         Weighting w, Vector& grad) {
  const PreparedBatch p = prepare(s, net.data_dim, batch, draws);
  nn::Mlp::Tape tape;
  Matrix pred = net.mlp.forward(network_input(net, s, p.t, p.x_t), tape);
  if (net.skip) apply_skip(s, p.t, p.x_t, pred);
  Matrix g_out;
  const double loss = weighted_residual(s, w, p, pred, &g_out);
  if (net.skip)
    for (std::size_t r = 0; r < g_out.rows(); ++r) {
      const double alpha = vp_alpha_sigma(s, p.t[r]).alpha;
      for (double& g : g_out.row(r)) g *= alpha;
    }
  grad.assign(net.mlp.parameter_count(), 0.0);
  net.mlp.backward(tape, g_out, grad);
  return loss;
}

ScoreModel train(const VpSchedule& s, std::span<const Vector> data, const TrainConfig& cfg) {
  s.validate();
  cfg.validate();
  if (data.empty()) throw InvalidArgument("train: empty dataset");
  const std::size_t d = data.front().size();
  if (d == 0) throw InvalidArgument("train: zero-dimensional data");
  for (const auto& x : data)
    if (x.size() != d || !all_finite(x))
      throw InvalidArgument("train: inconsistent or non-finite sample");
  const double t_lo = cfg.t_lo.value_or(s.t_min), t_hi = cfg.t_hi.value_or(s.horizon);
  if (!(t_lo > 0.0 && t_lo < t_hi && t_hi <= s.horizon))
    throw InvalidArgument("train: time range must satisfy 0 < t_lo < t_hi <= horizon");

  std::vector<std::size_t> widths{d + cfg.time_features};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(d);
  const RngStream root(cfg.seed);
  NetworkParams net{nn::Mlp(widths, root.split(0).next_u64()), d, cfg.time_features, cfg.skip, {}};
  RngStream rng = root.split(1);
  nn::Adam adam(net.mlp.parameter_count());

  TrainingRecord rec{cfg, {}, 0.0, 0.0};
  rec.loss_history.reserve(cfg.steps);
  std::vector<Vector> batch(cfg.batch_size);
  Vector grad;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (auto& b : batch) b = data[rng.below(data.size())];
    const auto draws = draw_noise(cfg.batch_size, d, t_lo, t_hi, rng);
    const double loss = dsm_loss_gradient(s, net, batch, draws, cfg.weighting, grad);
    if (!std::isfinite(loss) || !all_finite(grad))
      throw NumericalError("train: loss diverged at step " + std::to_string(step), step,
                           rec.loss_history.empty() ? 0.0 : rec.loss_history.back());
    double lr = cfg.learning_rate;
    if (cfg.lr_schedule == LrSchedule::cosine)
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                  static_cast<double>(cfg.steps)));
    adam.step(net.mlp.parameters(), grad, lr);
    rec.loss_history.push_back(loss);
  }
  const std::size_t window = std::max<std::size_t>(1, cfg.steps / 10);
  for (std::size_t i = 0; i < window; ++i) {
    rec.initial_window_loss += rec.loss_history[i];
    rec.final_window_loss += rec.loss_history[cfg.steps - window + i];
  }
  rec.initial_window_loss /= static_cast<double>(window);
  rec.final_window_loss /= static_cast<double>(window);
  net.training = std::move(rec);
  return ScoreModel::network(std::move(net));
}

// ---------------------------------------------------------------- samplers

std::string to_string(SamplerKind k) {
  return k == SamplerKind::deterministic ? "deterministic" : "stochastic";
}
std::string to_string(GridKind k) { return k == GridKind::exponential ? "exponential" : "uniform"; }

SamplerKind sampler_kind_from_string(const std::string& s) {
  if (s == "stochastic") return SamplerKind::stochastic;
  if (s == "deterministic") return SamplerKind::deterministic;
  throw InvalidArgument("unknown sampler kind '" + s + "' (stochastic | deterministic)");
}

GridKind grid_kind_from_string(const std::string& s) {
  if (s == "uniform") return GridKind::uniform;
  if (s == "exponential") return GridKind::exponential;
  throw InvalidArgument("unknown grid '" + s + "' (uniform | exponential)");
}

void SamplerConfig::validate() const {
  if (steps == 0) throw InvalidArgument("SamplerConfig: steps must be >= 1");
}

Vector time_grid(const VpSchedule& s, std::size_t steps, GridKind grid) {
  s.validate();
  if (steps == 0) throw InvalidArgument("time_grid: steps must be >= 1");
  Vector t(steps + 1);
  const double n = static_cast<double>(steps);
  for (std::size_t i = 0; i <= steps; ++i) {
    const double u = static_cast<double>(i) / n;
    t[i] = grid == GridKind::uniform
               ? s.horizon + (s.t_min - s.horizon) * u
               : s.horizon * std::pow(s.t_min / s.horizon, u);
  }
  t.front() = s.horizon;
  t.back() = s.t_min;
  return t;
}

namespace {

Matrix initial_states(std::size_t n, std::size_t d, std::vector<RngStream>& streams) {
  Matrix x(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (double& v : x.row(r)) v = streams[r].normal();
  return x;
}

std::vector<Vector> to_rows(const Matrix& x) {
  std::vector<Vector> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) out[r].assign(x.row(r).begin(), x.row(r).end());
  return out;
}

void check_finite_step(const Matrix& x, std::size_t step, const char* who) {
  if (!x.all_finite())
    throw NumericalError(std::string(who) + ": non-finite state at step " + std::to_string(step),
                         step);
}

// Reverse-time drift of the probability-flow ODE: 1/2 beta (x + score).
Matrix ode_drift(const ScoreModel& model, const VpSchedule& s, double t, const Matrix& x) {
  Matrix k = model.score(s, std::span<const double>(&t, 1), x);
  const double hb = 0.5 * s.beta(t);
  auto& ke = k.entries();
  const auto& xe = x.entries();
  for (std::size_t i = 0; i < ke.size(); ++i) ke[i] = hb * (xe[i] + ke[i]);
  return k;
}

}  // namespace

std::vector<Vector> sample_stochastic(const ScoreModel& model, const VpSchedule& s,
                                      const SamplerConfig& cfg, std::size_t n,
                                      std::size_t first_chain) {
  cfg.validate();
  const Vector grid = time_grid(s, cfg.steps, cfg.grid);
  const std::size_t d = model.dim();
  const RngStream root(cfg.seed);
  std::vector<RngStream> streams;
  streams.reserve(n);
  for (std::size_t r = 0; r < n; ++r) streams.push_back(root.split(first_chain + r));
  Matrix x = initial_states(n, d, streams);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double t = grid[k], h = grid[k] - grid[k + 1];
    const double beta = s.beta(t), noise = std::sqrt(beta * h);
    const Matrix sc = model.score(s, std::span<const double>(&t, 1), x);
    for (std::size_t r = 0; r < n; ++r) {
      auto xr = x.row(r);
      const auto sr = sc.row(r);
      for (std::size_t i = 0; i < d; ++i)
        xr[i] += h * (0.5 * beta * xr[i] + beta * sr[i]) + noise * streams[r].normal();
    }
    check_finite_step(x, k + 1, "sample_stochastic");
  }
  return to_rows(x);
}

std::vector<Vector> sample_deterministic(const ScoreModel& model, const VpSchedule& s,
                                      const SamplerConfig& cfg, std::size_t n,
                                      std::size_t first_chain) {
  cfg.validate();
  const Vector grid = time_grid(s, cfg.steps, cfg.grid);
  const std::size_t d = model.dim();
  const RngStream root(cfg.seed);
  std::vector<RngStream> streams;
  streams.reserve(n);
  for (std::size_t r = 0; r < n; ++r) streams.push_back(root.split(first_chain + r));
  Matrix x = initial_states(n, d, streams);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double t0 = grid[k], t1 = grid[k + 1], h = t0 - t1;
    const Matrix k1 = ode_drift(model, s, t0, x);
    Matrix pred = x;
    axpy(h, k1.entries(), pred.entries());
    const Matrix k2 = ode_drift(model, s, t1, pred);
    auto& xe = x.entries();
    for (std::size_t i = 0; i < xe.size(); ++i)
      xe[i] += 0.5 * h * (k1.entries()[i] + k2.entries()[i]);
    check_finite_step(x, k + 1, "sample_deterministic");
  }
  return to_rows(x);
}

std::vector<Vector> sample(const ScoreModel& model, const VpSchedule& s, const SamplerConfig& cfg,
                           std::size_t n, std::size_t first_chain) {
  return cfg.kind == SamplerKind::stochastic ? sample_stochastic(model, s, cfg, n, first_chain)
                                             : sample_deterministic(model, s, cfg, n, first_chain);
}

double score_matching_error(const ScoreModel& model, const ScoreModel& oracle,
                            const VpSchedule& s, std::span<const Vector> probe,
                            std::size_t draws_per_point, RngStream& rng) {
  if (probe.empty() || draws_per_point == 0)
    throw InvalidArgument("score_matching_error: empty probe");
  if (model.dim() != oracle.dim()) throw InvalidArgument("score_matching_error: dimension mismatch");
  const std::size_t d = model.dim(), n = probe.size() * draws_per_point;
  Vector t(n);
  Matrix x(n, d);
  std::size_t r = 0;
  for (const auto& p : probe) {
    if (p.size() != d) throw InvalidArgument("score_matching_error: probe dimension mismatch");
    for (std::size_t k = 0; k < draws_per_point; ++k, ++r) {
      t[r] = rng.uniform(s.t_min, s.horizon);
      const auto pert = forward_perturb(s, p, t[r], rng);
      std::copy(pert.x_t.begin(), pert.x_t.end(), x.row(r).begin());
    }
  }
  const Matrix a = model.score(s, t, x), b = oracle.score(s, t, x);
  double total = 0.0;
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    const double e = a.entries()[i] - b.entries()[i];
    total += e * e;
  }
  return std::sqrt(total / static_cast<double>(n));
}

// ---------------------------------------------------------------- JSON

nlohmann::json schedule_to_json(const VpSchedule& s) {
  return {{"a", s.a}, {"b", s.b}, {"horizon", s.horizon}, {"t_min", s.t_min}};
}

VpSchedule schedule_from_json(const nlohmann::json& j, const std::string& path) {
  JsonFields f(j, path);
  VpSchedule s;
  s.horizon = f.get<double>("horizon", 1.0);
  s.t_min = f.get<double>("t_min", 1e-3 * s.horizon);
  s.a = f.get<double>("a", 19.9 / (s.horizon * s.horizon));
  s.b = f.get<double>("b", 0.1 / s.horizon);
  f.finish();
  try {
    s.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
  return s;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j = {{"batch_size", c.batch_size},
                      {"steps", c.steps},
                      {"learning_rate", c.learning_rate},
                      {"lr_schedule", to_string(c.lr_schedule)},
                      {"weighting", to_string(c.weighting)},
                      {"seed", c.seed},
                      {"hidden", c.hidden},
                      {"time_features", c.time_features},
                      {"skip", c.skip}};
  if (c.t_lo) j["t_lo"] = *c.t_lo;
  if (c.t_hi) j["t_hi"] = *c.t_hi;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path) {
  JsonFields f(j, path);
  TrainConfig c;
  c.batch_size = f.get<std::size_t>("batch_size", c.batch_size);
  c.steps = f.get<std::size_t>("steps", c.steps);
  c.learning_rate = f.get<double>("learning_rate", c.learning_rate);
  c.seed = f.get<std::uint64_t>("seed", c.seed);
  c.hidden = f.get<std::vector<std::size_t>>("hidden", c.hidden);
  c.time_features = f.get<std::size_t>("time_features", c.time_features);
  c.skip = f.get<bool>("skip", c.skip);
  try {
    c.lr_schedule = lr_schedule_from_string(f.get<std::string>("lr_schedule", "cosine"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(f.path_of("lr_schedule"), e.what());
  }
  try {
    c.weighting = weighting_from_string(f.get<std::string>("weighting", "sigma-squared"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(f.path_of("weighting"), e.what());
  }
  if (f.has("t_lo")) c.t_lo = f.get<double>("t_lo", 0.0);
  if (f.has("t_hi")) c.t_hi = f.get<double>("t_hi", 0.0);
  f.finish();
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
  return c;
}

nlohmann::json sampler_config_to_json(const SamplerConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"steps", c.steps},
          {"grid", to_string(c.grid)},
          {"seed", c.seed}};
}

SamplerConfig sampler_config_from_json(const nlohmann::json& j, const std::string& path) {
  JsonFields f(j, path);
  SamplerConfig c;
  try {
    c.kind = sampler_kind_from_string(f.get<std::string>("kind", "stochastic"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(f.path_of("kind"), e.what());
  }
  try {
    c.grid = grid_kind_from_string(f.get<std::string>("grid", "uniform"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(f.path_of("grid"), e.what());
  }
  c.steps = f.get<std::size_t>("steps", c.steps);
  c.seed = f.get<std::uint64_t>("seed", c.seed);
  f.finish();
  if (c.steps == 0) throw ConfigError(f.path_of("steps"), "must be >= 1");
  return c;
}

// ---------------------------------------------------------------- persistence

namespace {

std::vector<double> matrix_rows_json(const Matrix& m) { return m.entries(); }

void put_le(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, sizeof u);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
  os.write(bytes, 8);
}

double get_le(const unsigned char* p) {
  std::uint64_t u = 0;
  for (int i = 7; i >= 0; --i) u = (u << 8) | p[i];
  double v;
  std::memcpy(&v, &u, sizeof v);
  return v;
}

}  // namespace

void save_model(const std::string& path, const ScoreModel& model, const VpSchedule& s) {
  nlohmann::json h = {{"format", kModelFormat},
                      {"version", kModelVersion},
                      {"kind", to_string(model.kind())},
                      {"schedule", schedule_to_json(s)},
                      {"dim", model.dim()}};
  if (const auto* net = model.network_params()) {
    h["widths"] = net->mlp.widths();
    h["time_features"] = net->time_features;
    h["activation"] = "silu";
    h["skip"] = net->skip;
    h["parameter_count"] = net->mlp.parameter_count();
    h["blob_bytes"] = 8 * net->mlp.parameter_count();
    if (net->training) {
      h["training"] = {{"config", train_config_to_json(net->training->config)},
                       {"initial_window_loss", net->training->initial_window_loss},
                       {"final_window_loss", net->training->final_window_loss}};
    }
  } else if (const auto* g = model.gaussian_params()) {
    h["mean"] = g->mean;
    h["cov"] = matrix_rows_json(g->cov);
  } else if (const auto* p = model.spike_params()) {
    h["centers"] = p->centers;
    h["weights"] = p->weights;
    h["spread"] = p->spread;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_model: cannot open " + path);
  os << h.dump() << '\n';
  if (const auto* net = model.network_params())
    for (double v : net->mlp.parameters()) put_le(os, v);
  if (!os) throw IoError("save_model: write failed for " + path);
}

LoadedModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_model: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("load_model: empty file " + path);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path, std::string("bad model header: ") + e.what());
  }
  JsonFields f(h, "");
  if (f.required<std::string>("format") != kModelFormat)
    throw ConfigError("format", "not a score-model file");
  if (f.required<int>("version") != kModelVersion) throw ConfigError("version", "unsupported");
  const std::string kind = f.required<std::string>("kind");
  const VpSchedule sched = schedule_from_json(*f.child("schedule"), "schedule");
  const auto dim = f.required<std::size_t>("dim");
  if (kind == to_string(ModelKind::trained_network)) {
    const auto widths = f.required<std::vector<std::size_t>>("widths");
    const auto tf = f.required<std::size_t>("time_features");
    if (f.required<std::string>("activation") != "silu")
      throw ConfigError("activation", "unsupported activation");
    const bool skip = f.required<bool>("skip");
    const auto count = f.required<std::size_t>("parameter_count");
    const auto bytes = f.required<std::size_t>("blob_bytes");
    if (bytes != 8 * count) throw ConfigError("blob_bytes", "inconsistent with parameter_count");
    std::optional<TrainingRecord> rec;
    if (const auto* tj = f.child("training")) {
      JsonFields tf_(*tj, "training");
      TrainingRecord r;
      r.config = train_config_from_json(*tf_.child("config"), "training.config");
      r.initial_window_loss = tf_.required<double>("initial_window_loss");
      r.final_window_loss = tf_.required<double>("final_window_loss");
      tf_.finish();
      rec = std::move(r);
    }
    f.finish();
    std::vector<unsigned char> blob(bytes);
    is.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(is.gcount()) != bytes)
      throw IoError("load_model: weight blob truncated in " + path + " (expected " +
                    std::to_string(bytes) + " bytes, got " + std::to_string(is.gcount()) + ")");
    if (is.peek() != std::char_traits<char>::eof())
      throw IoError("load_model: trailing bytes after weight blob in " + path);
    Vector params(count);
    for (std::size_t i = 0; i < count; ++i) params[i] = get_le(blob.data() + 8 * i);
    NetworkParams net;
    try {
      net = NetworkParams{nn::Mlp(widths, std::move(params)), dim, tf, skip, std::move(rec)};
      return {ScoreModel::network(std::move(net)), sched};
    } catch (const InvalidArgument& e) {
      throw ConfigError(path, e.what());
    }
  }
  try {
    if (kind == to_string(ModelKind::analytic_gaussian)) {
      Vector mean = f.required<Vector>("mean");
      Vector cov = f.required<Vector>("cov");
      f.finish();
      if (mean.size() != dim) throw ConfigError("mean", "length differs from dim");
      return {ScoreModel::gaussian(std::move(mean), Matrix(dim, dim, std::move(cov))), sched};
    }
    if (kind == to_string(ModelKind::analytic_spike_mixture)) {
      auto centers = f.required<std::vector<Vector>>("centers");
      auto weights = f.required<Vector>("weights");
      const double spread = f.required<double>("spread");
      f.finish();
      return {ScoreModel::spike_mixture(std::move(centers), std::move(weights), spread), sched};
    }
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
  throw ConfigError("kind", "unknown model kind '" + kind + "'");
}

std::string samples_to_csv(std::span<const Vector> samples) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& v : samples) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) os << ',';
      os << v[i];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace csdm::diffusion
