#include "csdm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <thread>

#include "csdm/error.hpp"
#include "csdm/json_fields.hpp"
#include "csdm/log.hpp"
#include "csdm/parallel.hpp"
#include "csdm/stats.hpp"

namespace csdm::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Median after dropping up to three warm-up measurements.
double steady_median(const std::vector<double>& t) {
  if (t.empty()) return 0.0;
  const std::size_t skip = t.size() > 3 ? 3 : 0;
  return stats::median(std::span<const double>(t).subspan(skip));
}

double dist2(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = a[i] - b[i];
    s += e * e;
  }
  return s;
}

}  // namespace

std::string to_string(AmplitudeLaw a) { return a == AmplitudeLaw::unit ? "unit" : "uniform"; }

std::string to_string(ScoreSource s) {
  switch (s) {
    case ScoreSource::trained: return "trained";
    case ScoreSource::analytic_gaussian: return "analytic-gaussian";
    case ScoreSource::analytic_mixture: return "analytic-mixture";
  }
  return "?";
}

std::string to_string(CostModel c) { return c == CostModel::measured ? "measured" : "theoretical"; }

std::vector<Vector> synth_sparse_dataset(const SparseDatasetSpec& spec) {
  if (spec.sparsity > spec.d) throw InvalidArgument("synth_sparse_dataset: sparsity exceeds d");
  RngStream rng(spec.seed);
  std::vector<Vector> out(spec.n, Vector(spec.d, 0.0));
  std::vector<std::size_t> idx(spec.d);
  for (auto& x : out) {
    // Partial Fisher-Yates: the first `sparsity` slots are a uniform subset.
    for (std::size_t i = 0; i < spec.d; ++i) idx[i] = i;
    for (std::size_t k = 0; k < spec.sparsity; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng.below(spec.d - k));
      std::swap(idx[k], idx[j]);
      double amp = 1.0;
      if (spec.amplitude == AmplitudeLaw::uniform) amp = rng.uniform(0.5, 1.5);
      x[idx[k]] = rng.uniform() < 0.5 ? -amp : amp;
    }
  }
  return out;
}

std::vector<Vector> compress_dataset(std::span<const Vector> data, const SketchOperator& a) {
  std::vector<Vector> out;
  out.reserve(data.size());
  for (const auto& x : data) {
    if (x.size() != a.d())
      throw InvalidArgument("compress_dataset: vector of length " + std::to_string(x.size()) +
                            " for a sketch with d = " + std::to_string(a.d()));
    out.push_back(matvec(a.matrix, x));
  }
  return out;
}

// ---------------------------------------------------------------- config

void PipelineConfig::validate() const {
  if (d < 2 || m == 0 || m >= d) throw InvalidArgument("pipeline: need 1 <= m < d");
  if (sparsity > m) throw InvalidArgument("pipeline: sparsity must not exceed m");
  if (n_train == 0 || n_generate == 0) throw InvalidArgument("pipeline: counts must be positive");
  if (fista_max_iter == 0 || !(fista_tol > 0.0))
    throw InvalidArgument("pipeline: fista needs max_iter > 0 and tol > 0");
  if (lambda.value && !(*lambda.value > 0.0))
    throw InvalidArgument("pipeline: lambda value must be > 0");
  if (lambda.kind == LambdaPolicy::Kind::fixed && !lambda.value)
    throw InvalidArgument("pipeline: fixed lambda policy needs a value");
  if (!(support_threshold_rel >= 0.0 && support_threshold_rel < 1.0))
    throw InvalidArgument("pipeline: support_threshold_rel must lie in [0, 1)");
  schedule.validate();
  train.validate();
  sampler.validate();
}

nlohmann::json config_to_json(const PipelineConfig& c) {
  nlohmann::json lam = {{"policy", c.lambda.kind == LambdaPolicy::Kind::fixed ? "fixed" : "universal"}};
  if (c.lambda.value) lam["value"] = *c.lambda.value;
  return {{"d", c.d},
          {"m", c.m},
          {"sparsity", c.sparsity},
          {"n_train", c.n_train},
          {"n_generate", c.n_generate},
          {"amplitude", to_string(c.amplitude)},
          {"seed", c.seed},
          {"lambda", lam},
          {"fista", {{"max_iter", c.fista_max_iter}, {"tol", c.fista_tol}}},
          {"debias", c.debias},
          {"support_threshold_rel", c.support_threshold_rel},
          {"n_floor", c.n_floor},
          {"score", to_string(c.score)},
          {"schedule", diffusion::schedule_to_json(c.schedule)},
          {"train", diffusion::train_config_to_json(c.train)},
          {"sampler", diffusion::sampler_config_to_json(c.sampler)},
          {"ambient_timing", c.ambient_timing}};
}

PipelineConfig config_from_json(const nlohmann::json& j) {
  JsonFields f(j, "");
  PipelineConfig c;
  c.d = f.get<std::size_t>("d", c.d);
  c.m = f.get<std::size_t>("m", c.m);
  c.sparsity = f.get<std::size_t>("sparsity", c.sparsity);
  c.n_train = f.get<std::size_t>("n_train", c.n_train);
  c.n_generate = f.get<std::size_t>("n_generate", c.n_generate);
  c.seed = f.get<std::uint64_t>("seed", c.seed);
  c.debias = f.get<bool>("debias", c.debias);
  c.support_threshold_rel = f.get<double>("support_threshold_rel", c.support_threshold_rel);
  c.n_floor = f.get<std::size_t>("n_floor", c.n_floor);
  c.ambient_timing = f.get<bool>("ambient_timing", c.ambient_timing);
  const std::string amp = f.get<std::string>("amplitude", to_string(c.amplitude));
  if (amp == "unit")
    c.amplitude = AmplitudeLaw::unit;
  else if (amp == "uniform")
    c.amplitude = AmplitudeLaw::uniform;
  else
    throw ConfigError("amplitude", "expected 'unit' or 'uniform'");
  const std::string score = f.get<std::string>("score", to_string(c.score));
  if (score == "trained")
    c.score = ScoreSource::trained;
  else if (score == "analytic-gaussian")
    c.score = ScoreSource::analytic_gaussian;
  else if (score == "analytic-mixture")
    c.score = ScoreSource::analytic_mixture;
  else
    throw ConfigError("score", "expected 'trained', 'analytic-gaussian' or 'analytic-mixture'");
  if (const auto* lj = f.child("lambda")) {
    JsonFields lf(*lj, "lambda");
    const std::string policy = lf.get<std::string>("policy", "universal");
    if (policy == "universal")
      c.lambda.kind = LambdaPolicy::Kind::universal;
    else if (policy == "fixed")
      c.lambda.kind = LambdaPolicy::Kind::fixed;
    else
      throw ConfigError("lambda.policy", "expected 'universal' or 'fixed'");
    if (lf.has("value")) c.lambda.value = lf.get<double>("value", 0.0);
    lf.finish();
  }
  if (const auto* fj = f.child("fista")) {
    JsonFields ff(*fj, "fista");
    c.fista_max_iter = ff.get<std::size_t>("max_iter", c.fista_max_iter);
    c.fista_tol = ff.get<double>("tol", c.fista_tol);
    ff.finish();
  }
  if (const auto* sj = f.child("schedule")) c.schedule = diffusion::schedule_from_json(*sj, "schedule");
  if (const auto* tj = f.child("train")) c.train = diffusion::train_config_from_json(*tj, "train");
  if (const auto* sj = f.child("sampler"))
    c.sampler = diffusion::sampler_config_from_json(*sj, "sampler");
  f.finish();
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    std::string path;
    const std::string what = e.what();
    if (what.find("m < d") != std::string::npos) path = "m";
    else if (what.find("sparsity") != std::string::npos) path = "sparsity";
    else if (what.find("counts") != std::string::npos) path = "n_train";
    else if (what.find("fista") != std::string::npos) path = "fista";
    else if (what.find("lambda") != std::string::npos) path = "lambda";
    else if (what.find("support_threshold") != std::string::npos) path = "support_threshold_rel";
    throw ConfigError(path, what);
  }
  return c;
}

// ---------------------------------------------------------------- timing

TimingReport measure_speedup(double t_diff_m, double t_cs, std::size_t m, std::size_t d) {
  if (!(t_diff_m > 0.0) || !std::isfinite(t_diff_m))
    throw InvalidArgument("measure_speedup: diffusion time must be positive");
  if (!(t_cs >= 0.0) || !std::isfinite(t_cs))
    throw InvalidArgument("measure_speedup: recovery time must be non-negative");
  if (m == 0 || d == 0) throw InvalidArgument("measure_speedup: dimensions must be positive");
  TimingReport r;
  r.t_diff_m = t_diff_m;
  r.t_cs = t_cs;
  const double ratio = static_cast<double>(m) / static_cast<double>(d);
  r.t_diff_d_estimated = t_diff_m / ratio;
  r.speedup = 1.0 - ratio * (1.0 + t_cs / t_diff_m);
  return r;
}

// ---------------------------------------------------------------- errors

EndToEndError end_to_end_error(std::span<const Vector> samples, std::span<const Vector> reference,
                               double threshold_rel) {
  if (samples.empty() || reference.empty())
    throw InvalidArgument("end_to_end_error: empty sample or reference set");
  const std::size_t d = reference.front().size();
  for (const auto& r : reference)
    if (r.size() != d) throw InvalidArgument("end_to_end_error: reference dimension mismatch");
  EndToEndError out;
  out.per_sample.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const auto& x = samples[i];
    if (x.size() != d) throw InvalidArgument("end_to_end_error: sample dimension mismatch");
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < reference.size(); ++j) {
      const double e = dist2(x, reference[j]);
      if (e < best) best = e, arg = j;
    }
    SampleError se;
    se.distance = std::sqrt(best);
    se.nearest = arg;
    const auto sx = recovery::support_of(x, threshold_rel);
    const auto sr = recovery::support_of(reference[arg], threshold_rel);
    std::vector<std::size_t> common;
    std::set_intersection(sx.begin(), sx.end(), sr.begin(), sr.end(), std::back_inserter(common));
    se.support_size = sx.size();
    se.precision = sx.empty() ? 0.0 : static_cast<double>(common.size()) / sx.size();
    se.recall = sr.empty() ? 1.0 : static_cast<double>(common.size()) / sr.size();
    out.per_sample[i] = se;
  });
  Vector dist, prec, rec;
  for (const auto& s : out.per_sample) {
    dist.push_back(s.distance);
    prec.push_back(s.precision);
    rec.push_back(s.recall);
  }
  std::sort(dist.begin(), dist.end());
  auto& sm = out.summary;
  sm.mean = stats::mean(dist);
  sm.median = stats::quantile_sorted(dist, 0.5);
  sm.q10 = stats::quantile_sorted(dist, 0.10);
  sm.q25 = stats::quantile_sorted(dist, 0.25);
  sm.q75 = stats::quantile_sorted(dist, 0.75);
  sm.q90 = stats::quantile_sorted(dist, 0.90);
  sm.max = dist.back();
  sm.precision_mean = stats::mean(prec);
  sm.recall_mean = stats::mean(rec);
  return out;
}

// ---------------------------------------------------------------- report json

namespace {

nlohmann::json summary_json(const ErrorSummary& s) {
  return {{"mean", s.mean},     {"median", s.median},
          {"q10", s.q10},       {"q25", s.q25},
          {"q75", s.q75},       {"q90", s.q90},
          {"max", s.max},       {"precision_mean", s.precision_mean},
          {"recall_mean", s.recall_mean}};
}

ErrorSummary summary_from(const nlohmann::json& j) {
  ErrorSummary s;
  s.mean = j.at("mean").get<double>();
  s.median = j.at("median").get<double>();
  s.q10 = j.at("q10").get<double>();
  s.q25 = j.at("q25").get<double>();
  s.q75 = j.at("q75").get<double>();
  s.q90 = j.at("q90").get<double>();
  s.max = j.at("max").get<double>();
  s.precision_mean = j.at("precision_mean").get<double>();
  s.recall_mean = j.at("recall_mean").get<double>();
  return s;
}

nlohmann::json e2e_json(const EndToEndError& e) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : e.per_sample)
    rows.push_back({{"distance", s.distance},
                    {"nearest", s.nearest},
                    {"precision", s.precision},
                    {"recall", s.recall},
                    {"support_size", s.support_size}});
  return {{"summary", summary_json(e.summary)}, {"per_sample", rows}};
}

EndToEndError e2e_from(const nlohmann::json& j) {
  EndToEndError e;
  e.summary = summary_from(j.at("summary"));
  for (const auto& r : j.at("per_sample")) {
    SampleError s;
    s.distance = r.at("distance").get<double>();
    s.nearest = r.at("nearest").get<std::size_t>();
    s.precision = r.at("precision").get<double>();
    s.recall = r.at("recall").get<double>();
    s.support_size = r.at("support_size").get<std::size_t>();
    e.per_sample.push_back(s);
  }
  return e;
}

}  // namespace

nlohmann::json report_to_json(const PipelineReport& r) {
  nlohmann::json timing = {{"t_diff_m", r.timing.t_diff_m},
                           {"t_cs", r.timing.t_cs},
                           {"t_diff_d_estimated", r.timing.t_diff_d_estimated},
                           {"speedup", r.timing.speedup},
                           {"train_s", r.timing.train_s},
                           {"hardware_note", r.timing.hardware_note}};
  if (r.timing.t_diff_d_measured) timing["t_diff_d_measured"] = *r.timing.t_diff_d_measured;
  return {{"config", config_to_json(r.config)},
          {"timing", timing},
          {"latent_scale", r.latent_scale},
          {"sigma_hat", r.sigma_hat},
          {"lambda", r.lambda},
          {"training", {{"initial_window_loss", r.initial_window_loss},
                        {"final_window_loss", r.final_window_loss}}},
          {"generated", e2e_json(r.generated)},
          {"floor", e2e_json(r.floor)},
          {"solver", {{"median_iterations", r.solver.median_iterations},
                      {"max_iterations", r.solver.max_iterations},
                      {"stopped_tolerance", r.solver.stopped_tolerance},
                      {"stopped_max_iter", r.solver.stopped_max_iter}}},
          {"latent_residuals", r.latent_residuals}};
}

PipelineReport report_from_json(const nlohmann::json& j) {
  PipelineReport r;
  try {
    r.config = config_from_json(j.at("config"));
    const auto& t = j.at("timing");
    r.timing.t_diff_m = t.at("t_diff_m").get<double>();
    r.timing.t_cs = t.at("t_cs").get<double>();
    r.timing.t_diff_d_estimated = t.at("t_diff_d_estimated").get<double>();
    r.timing.speedup = t.at("speedup").get<double>();
    r.timing.train_s = t.at("train_s").get<double>();
    r.timing.hardware_note = t.at("hardware_note").get<std::string>();
    if (t.contains("t_diff_d_measured"))
      r.timing.t_diff_d_measured = t.at("t_diff_d_measured").get<double>();
    r.latent_scale = j.at("latent_scale").get<double>();
    r.sigma_hat = j.at("sigma_hat").get<double>();
    r.lambda = j.at("lambda").get<double>();
    r.initial_window_loss = j.at("training").at("initial_window_loss").get<double>();
    r.final_window_loss = j.at("training").at("final_window_loss").get<double>();
    r.generated = e2e_from(j.at("generated"));
    r.floor = e2e_from(j.at("floor"));
    const auto& s = j.at("solver");
    r.solver.median_iterations = s.at("median_iterations").get<double>();
    r.solver.max_iterations = s.at("max_iterations").get<std::size_t>();
    r.solver.stopped_tolerance = s.at("stopped_tolerance").get<std::size_t>();
    r.solver.stopped_max_iter = s.at("stopped_max_iter").get<std::size_t>();
    r.latent_residuals = j.at("latent_residuals").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("report", e.what());
  }
  return r;
}

nlohmann::json strip_timing(nlohmann::json report) {
  report.erase("timing");
  return report;
}

std::string errors_to_csv(const PipelineReport& r) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "index,distance,nearest,precision,recall,support_size,latent_residual\n";
  for (std::size_t i = 0; i < r.generated.per_sample.size(); ++i) {
    const auto& s = r.generated.per_sample[i];
    os << i << ',' << s.distance << ',' << s.nearest << ',' << s.precision << ',' << s.recall
       << ',' << s.support_size << ','
       << (i < r.latent_residuals.size() ? r.latent_residuals[i] : 0.0) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------- pipeline

namespace {

diffusion::ScoreModel latent_model(const PipelineConfig& cfg, const std::vector<Vector>& latents,
                                   PipelineReport& report) {
  const std::size_t m = cfg.m;
  switch (cfg.score) {
    case ScoreSource::trained: {
      const auto t0 = Clock::now();
      auto model = diffusion::train(cfg.schedule, latents, cfg.train);
      report.timing.train_s = seconds_since(t0);
      report.initial_window_loss = model.network_params()->training->initial_window_loss;
      report.final_window_loss = model.network_params()->training->final_window_loss;
      return model;
    }
    case ScoreSource::analytic_gaussian: {
      Vector mean(m, 0.0);
      for (const auto& y : latents) axpy(1.0, y, mean);
      for (double& v : mean) v /= static_cast<double>(latents.size());
      Matrix cov(m, m, 0.0);
      for (const auto& y : latents)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < m; ++j) cov(i, j) += (y[i] - mean[i]) * (y[j] - mean[j]);
      const double denom = std::max<double>(1.0, static_cast<double>(latents.size()) - 1.0);
      double trace = 0.0;
      for (std::size_t i = 0; i < m; ++i) trace += cov(i, i) / denom;
      for (double& v : cov.entries()) v /= denom;
      // Small ridge keeps the fitted covariance invertible when n_train <= m.
      for (std::size_t i = 0; i < m; ++i) cov(i, i) += 1e-9 * trace / static_cast<double>(m);
      return diffusion::ScoreModel::gaussian(std::move(mean), std::move(cov));
    }
    case ScoreSource::analytic_mixture:
      return diffusion::ScoreModel::spike_mixture(latents, Vector(latents.size(), 1.0), 0.0);
  }
  throw InvalidArgument("unknown score source");
}

recovery::SolverOptions solver_options(const PipelineConfig& cfg) {
  recovery::SolverOptions o;
  o.max_iter = cfg.fista_max_iter;
  o.tol = cfg.fista_tol;
  o.record_trace = false;
  o.support_threshold_rel = cfg.support_threshold_rel;
  return o;
}

}  // namespace

PipelineReport run_pipeline(const PipelineConfig& input) {
  input.validate();
  PipelineConfig cfg = input;
  const RngStream root(cfg.seed);
  cfg.train.seed = root.split(2).next_u64();
  cfg.sampler.seed = root.split(3).next_u64();

  PipelineReport report;
  report.config = cfg;
  report.timing.hardware_note =
      "CPU, single-threaded timing; " + std::to_string(std::thread::hardware_concurrency()) +
      " hardware threads available";

  // Step 1: sketch the data.
  const auto sketch = gaussian_sketch(cfg.m, cfg.d, root.split(0).next_u64());
  const auto data = synth_sparse_dataset(
      {cfg.d, cfg.sparsity, cfg.n_train, cfg.amplitude, root.split(1).next_u64()});
  const auto latents = compress_dataset(data, sketch);

  double ms = 0.0;
  for (const auto& y : latents) ms += dot(y, y);
  report.latent_scale = std::sqrt(ms / static_cast<double>(latents.size() * cfg.m));
  if (!(report.latent_scale > 0.0)) report.latent_scale = 1.0;
  std::vector<Vector> scaled_latents;
  scaled_latents.reserve(latents.size());
  for (const auto& y : latents) scaled_latents.push_back(scaled(y, 1.0 / report.latent_scale));

  // Step 2: latent diffusion.
  const auto model = latent_model(cfg, scaled_latents, report);
  std::vector<Vector> generated(cfg.n_generate);
  std::vector<double> t_diff(cfg.n_generate);
  for (std::size_t i = 0; i < cfg.n_generate; ++i) {
    const auto t0 = Clock::now();
    auto y = diffusion::sample(model, cfg.schedule, cfg.sampler, 1, i);
    t_diff[i] = seconds_since(t0);
    generated[i] = scaled(y.front(), report.latent_scale);
  }

  // Noise level for lambda: median distance from a generated latent to the
  // compressed training set.
  std::vector<double> nearest(cfg.n_generate);
  parallel_for(cfg.n_generate, [&](std::size_t i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& y : latents) best = std::min(best, dist2(generated[i], y));
    nearest[i] = std::sqrt(best);
  });
  report.sigma_hat = stats::median(nearest);
  if (cfg.lambda.kind == LambdaPolicy::Kind::fixed) {
    report.lambda = *cfg.lambda.value;
  } else {
    const double sigma_coord =
        cfg.lambda.value ? *cfg.lambda.value
                         : report.sigma_hat / std::sqrt(static_cast<double>(cfg.m));
    report.lambda = recovery::universal_lambda(sigma_coord, cfg.d);
  }
  if (!(report.lambda > 0.0)) {
    // Generated latents coincide with training latents; fall back to a
    // lambda small relative to the data scale.
    report.lambda = 1e-6 * report.latent_scale;
    log::warn("pipeline: estimated noise level is zero, lambda set to " +
              std::to_string(report.lambda));
  }

  // Step 3: FISTA decode, timed one sample at a time.
  const auto opts = solver_options(cfg);
  std::vector<Vector> recovered(cfg.n_generate);
  std::vector<double> t_cs(cfg.n_generate);
  std::vector<std::size_t> iters(cfg.n_generate);
  report.latent_residuals.resize(cfg.n_generate);
  for (std::size_t i = 0; i < cfg.n_generate; ++i) {
    const auto t0 = Clock::now();
    const recovery::LassoProblem p(sketch, generated[i], report.lambda);
    auto r = recovery::fista_solve(p, recovery::default_start(p), opts);
    Vector x = cfg.debias ? recovery::debias(r.x_hat, p, cfg.support_threshold_rel) : r.x_hat;
    t_cs[i] = seconds_since(t0);
    iters[i] = r.trace.iterations;
    if (r.trace.stop == recovery::StopReason::tolerance)
      ++report.solver.stopped_tolerance;
    else
      ++report.solver.stopped_max_iter;
    report.latent_residuals[i] = norm2(sub(matvec(sketch.matrix, x), generated[i]));
    recovered[i] = std::move(x);
  }
  {
    Vector it(iters.begin(), iters.end());
    report.solver.median_iterations = stats::median(it);
    report.solver.max_iterations = *std::max_element(iters.begin(), iters.end());
  }
  report.generated = end_to_end_error(recovered, data, cfg.support_threshold_rel);

  // FISTA-only floor: exact compressed training points, same lambda.
  const std::size_t n_floor = std::min(cfg.n_floor, latents.size());
  if (n_floor > 0) {
    std::vector<Vector> floor_x(n_floor);
    parallel_for(n_floor, [&](std::size_t i) {
      const recovery::LassoProblem p(sketch, latents[i], report.lambda);
      const Vector x = recovery::fista_solve(p, recovery::default_start(p), opts).x_hat;
      floor_x[i] = cfg.debias ? recovery::debias(x, p, cfg.support_threshold_rel) : x;
    });
    report.floor = end_to_end_error(floor_x, data, cfg.support_threshold_rel);
  }

  const double tm = steady_median(t_diff), tc = steady_median(t_cs);
  const auto timing = measure_speedup(tm > 0.0 ? tm : 1e-12, tc, cfg.m, cfg.d);
  report.timing.t_diff_m = timing.t_diff_m;
  report.timing.t_cs = timing.t_cs;
  report.timing.t_diff_d_estimated = timing.t_diff_d_estimated;
  report.timing.speedup = timing.speedup;

  if (cfg.ambient_timing) {
    // Same architecture in R^d, untrained: only its per-sample cost matters.
    std::vector<std::size_t> widths{cfg.d + cfg.train.time_features};
    widths.insert(widths.end(), cfg.train.hidden.begin(), cfg.train.hidden.end());
    widths.push_back(cfg.d);
    const auto ambient = diffusion::ScoreModel::network(
        {nn::Mlp(widths, root.split(4).next_u64()), cfg.d, cfg.train.time_features,
         cfg.train.skip, {}});
    std::vector<double> ta;
    for (std::size_t i = 0; i < std::min<std::size_t>(cfg.n_generate, 8); ++i) {
      const auto t0 = Clock::now();
      diffusion::sample(ambient, cfg.schedule, cfg.sampler, 1, i);
      ta.push_back(seconds_since(t0));
    }
    report.timing.t_diff_d_measured = steady_median(ta);
  }
  return report;
}

// ---------------------------------------------------------------- sweep

double theoretical_cost(std::size_t m, std::size_t d, std::size_t sparsity) {
  if (m == 0) throw InvalidArgument("theoretical_cost: m must be positive");
  const double md = static_cast<double>(m);
  return std::max(md, static_cast<double>(d) / md + std::sqrt(static_cast<double>(sparsity)));
}

namespace {

// Smallest k' whose Euler-Maruyama output, propagated exactly for the
// Gaussian latent with covariance eigenvalues `lambdas`, is within `tol` in W2
// of the noised law at t_min (the early-stopping bias is not a step cost).
std::size_t diffusion_steps_to_tolerance(const Vector& lambdas, const diffusion::VpSchedule& s,
                                         double tol, std::size_t max_steps) {
  const auto [a_end, s_end] = diffusion::vp_alpha_sigma(s, s.t_min);
  auto w2 = [&](std::size_t k) {
    const Vector grid = diffusion::time_grid(s, k, diffusion::GridKind::uniform);
    double total = 0.0;
    for (double lam : lambdas) {
      double v = 1.0;
      for (std::size_t i = 0; i < k; ++i) {
        const double t = grid[i], h = grid[i] - grid[i + 1], beta = s.beta(t);
        const auto [alpha, sigma] = diffusion::vp_alpha_sigma(s, t);
        const double a = 1.0 + h * beta * (0.5 - 1.0 / (alpha * alpha * lam + sigma * sigma));
        v = a * a * v + beta * h;
      }
      const double e = std::sqrt(v) - std::sqrt(a_end * a_end * lam + s_end * s_end);
      total += e * e;
    }
    return std::sqrt(total);
  };
  std::size_t hi = 1;
  while (w2(hi) > tol) {
    if (hi >= max_steps) return max_steps;
    hi *= 2;
  }
  std::size_t lo = hi / 2;  // w2(lo) > tol or lo == 0
  if (lo == 0) return hi;
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    (w2(mid) <= tol ? hi : lo) = mid;
  }
  return hi;
}

}  // namespace

SweepResult optimal_m_sweep(std::size_t d, std::size_t sparsity, std::span<const std::size_t> m_grid,
                            CostModel model, const MeasuredSweepOptions& opts) {
  if (m_grid.empty()) throw InvalidArgument("optimal_m_sweep: empty grid");
  for (std::size_t m : m_grid)
    if (m <= sparsity || m >= d)
      throw InvalidArgument("optimal_m_sweep: grid value " + std::to_string(m) +
                            " outside (S, d)");
  SweepResult r;
  r.model = model;
  r.d = d;
  r.sparsity = sparsity;
  r.points.resize(m_grid.size());
  if (model == CostModel::theoretical) {
    for (std::size_t i = 0; i < m_grid.size(); ++i)
      r.points[i] = {m_grid[i], theoretical_cost(m_grid[i], d, sparsity), 0.0, 0.0};
  } else {
    const RngStream root(opts.seed);
    parallel_for(m_grid.size(), [&](std::size_t gi) {
      const std::size_t m = m_grid[gi];
      const RngStream mr = root.split(m);
      // k: FISTA iterations until the noiseless recovery error drops below target.
      std::vector<double> ks;
      const auto sketch = gaussian_sketch(m, d, mr.split(0).next_u64());
      const auto xs = synth_sparse_dataset(
          {d, sparsity, opts.instances, AmplitudeLaw::uniform, mr.split(1).next_u64()});
      for (const auto& x : xs) {
        const Vector y = matvec(sketch.matrix, x);
        const double lam = 1e-4 * norm_inf(matvec_t(sketch.matrix, y));
        const recovery::LassoProblem p(sketch, y, lam);
        // Plain FISTA, counting iterations until the target error is reached.
        Vector xk = recovery::default_start(p);
        std::size_t k = 0;
        Vector yk = xk;
        double t = 1.0;
        for (; k < opts.fista_max_iter; ++k) {
          if (norm2(sub(xk, x)) <= opts.target_error) break;
          const Vector x_next = recovery::prox_step(p, yk, sketch.lipschitz);
          const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
          yk = x_next;
          axpy((t - 1.0) / t_next, sub(x_next, xk), yk);
          xk = x_next;
          t = t_next;
        }
        ks.push_back(static_cast<double>(k));
      }
      const double k_med = stats::median(ks);
      // k': sampler steps for the Gaussian law with the covariance of A x,
      // c A A^T with c the per-coordinate second moment of the sparse data.
      Vector lambdas = symmetric_eigen(gram_rows(sketch.matrix)).values;
      const double c = static_cast<double>(sparsity) * (13.0 / 12.0) / static_cast<double>(d);
      for (double& v : lambdas) v *= c;
      const double kp = static_cast<double>(diffusion_steps_to_tolerance(
          lambdas, opts.schedule, opts.target_error, opts.max_diffusion_steps));
      r.points[gi] = {m, kp + k_med, kp, k_med};
    });
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < r.points.size(); ++i)
    if (r.points[i].cost < r.points[best].cost ||
        (r.points[i].cost == r.points[best].cost && r.points[i].m < r.points[best].m))
      best = i;
  r.argmin = r.points[best].m;
  return r;
}

std::string sweep_to_csv(const SweepResult& r) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "m,cost,diffusion_steps,fista_steps\n";
  for (const auto& p : r.points)
    os << p.m << ',' << p.cost << ',' << p.diffusion_steps << ',' << p.fista_steps << '\n';
  return os.str();
}

nlohmann::json sweep_to_json(const SweepResult& r) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : r.points)
    pts.push_back({{"m", p.m},
                   {"cost", p.cost},
                   {"diffusion_steps", p.diffusion_steps},
                   {"fista_steps", p.fista_steps}});
  return {{"cost_model", to_string(r.model)},
          {"d", r.d},
          {"sparsity", r.sparsity},
          {"argmin", r.argmin},
          {"points", pts}};
}

}  // namespace csdm::pipeline
