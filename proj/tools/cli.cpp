#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "csdm/diffusion.hpp"
#include "csdm/error.hpp"
#include "csdm/io.hpp"
#include "csdm/json_fields.hpp"
#include "csdm/log.hpp"
#include "csdm/parallel.hpp"
#include "csdm/pipeline.hpp"
#include "csdm/recovery.hpp"
#include "csdm/sketch.hpp"
#include "csdm/stress.hpp"

namespace csdm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outputs {
  json report;
  std::vector<std::pair<std::string, std::string>> files;  // written by emit_report
  std::vector<std::string> written;                         // written directly by the command
};

struct Command {
  std::string name;
  std::string help;
  std::function<json(const json&)> normalize;
  std::function<Outputs(const json&, const std::string& out_dir)> run;
  std::function<void(json&, std::uint64_t)> set_seed;
};

void set_top_seed(json& j, std::uint64_t s) { j["seed"] = s; }

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t index) {
  return RngStream(seed).split(index).next_u64();
}

pipeline::AmplitudeLaw amplitude_from(const std::string& s, const std::string& path) {
  if (s == "unit") return pipeline::AmplitudeLaw::unit;
  if (s == "uniform") return pipeline::AmplitudeLaw::uniform;
  throw ConfigError(path, "expected 'unit' or 'uniform'");
}

bool is_index(const json& v) { return v.is_number_integer() && v.get<long long>() >= 0; }

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, what);
}

// Runs a library parser and attaches `path` to argument errors it raises.
template <class F>
auto at_path(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
}

std::string csv_row(std::span<const double> v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  os << "\n";
  return os.str();
}

// ---------------------------------------------------------------- sketch

json sketch_normalize(const json& j) {
  JsonFields f(j, "");
  json e;
  e["m"] = f.get<std::size_t>("m", 256);
  e["d"] = f.get<std::size_t>("d", 1024);
  e["seed"] = f.get<std::uint64_t>("seed", 0);
  e["rip_sparsity"] = f.get<std::size_t>("rip_sparsity", 0);
  e["write_matrix"] = f.get<bool>("write_matrix", false);
  f.finish();
  const std::size_t m = e["m"], d = e["d"];
  require(d >= 2, "d", "must be at least 2");
  require(m >= 1 && m < d, "m", "must satisfy 1 <= m < d");
  require(e["rip_sparsity"].get<std::size_t>() <= m, "rip_sparsity", "must not exceed m");
  return e;
}

Outputs sketch_run(const json& e, const std::string&) {
  const auto op = gaussian_sketch(e["m"], e["d"], e["seed"]);
  Outputs o;
  o.report = {{"command", "sketch"}, {"sketch", sketch_to_json(op)}, {"s_max", op.s_max}, {"lipschitz", op.lipschitz}};
  if (const std::size_t s = e["rip_sparsity"]; s > 0)
    o.report["rip"] = {{"sparsity", s}, {"delta", restricted_isometry_constant(op.matrix, s)}};
  if (e["write_matrix"].get<bool>()) o.files.emplace_back("matrix.csv", matrix_to_csv(op.matrix));
  return o;
}

// ---------------------------------------------------------------- recover

json recover_normalize(const json& j) {
  JsonFields f(j, "");
  json e;
  e["m"] = f.get<std::size_t>("m", 80);
  e["d"] = f.get<std::size_t>("d", 200);
  e["seed"] = f.get<std::uint64_t>("seed", 0);
  e["y_csv"] = f.get<std::string>("y_csv", "");
  e["instances"] = f.get<std::size_t>("instances", 10);
  e["sparsity"] = f.get<std::size_t>("sparsity", 8);
  e["amplitude"] = f.get<std::string>("amplitude", "uniform");
  e["noise"] = f.get<double>("noise", 0.0);
  e["debias"] = f.get<bool>("debias", false);
  e["support_threshold_rel"] = f.get<double>("support_threshold_rel", 1e-6);
  json lam = {{"policy", "relative"}, {"value", 1e-3}};
  if (const auto* lj = f.child("lambda")) {
    JsonFields lf(*lj, "lambda");
    lam["policy"] = lf.get<std::string>("policy", "relative");
    if (lf.has("value")) lam["value"] = lf.get<double>("value", 0.0);
    else if (lam["policy"] != "relative") lam.erase("value");
    lf.finish();
  }
  e["lambda"] = lam;
  json fista = {{"max_iter", 2000}, {"tol", 1e-8}};
  if (const auto* fj = f.child("fista")) {
    JsonFields ff(*fj, "fista");
    fista["max_iter"] = ff.get<std::size_t>("max_iter", 2000);
    fista["tol"] = ff.get<double>("tol", 1e-8);
    ff.finish();
  }
  e["fista"] = fista;
  f.finish();

  const std::size_t m = e["m"], d = e["d"];
  require(d >= 2, "d", "must be at least 2");
  require(m >= 1 && m < d, "m", "must satisfy 1 <= m < d");
  require(e["sparsity"].get<std::size_t>() <= m, "sparsity", "must not exceed m");
  require(e["instances"].get<std::size_t>() >= 1, "instances", "must be positive");
  amplitude_from(e["amplitude"], "amplitude");
  require(e["noise"].get<double>() >= 0.0, "noise", "must be non-negative");
  const std::string policy = lam["policy"];
  require(policy == "relative" || policy == "universal" || policy == "fixed", "lambda.policy",
          "expected 'relative', 'universal' or 'fixed'");
  if (lam.contains("value")) require(lam["value"].get<double>() > 0.0, "lambda.value", "must be > 0");
  if (policy == "fixed") require(lam.contains("value"), "lambda.value", "required by the fixed policy");
  if (policy == "universal")
    require(lam.contains("value") || e["noise"].get<double>() > 0.0, "lambda.value",
            "universal policy needs a noise level: set lambda.value or noise");
  require(fista["max_iter"].get<std::size_t>() >= 1, "fista.max_iter", "must be positive");
  require(fista["tol"].get<double>() > 0.0, "fista.tol", "must be > 0");
  const double thr = e["support_threshold_rel"];
  require(thr >= 0.0 && thr < 1.0, "support_threshold_rel", "must lie in [0, 1)");
  return e;
}

Outputs recover_run(const json& e, const std::string&) {
  const std::size_t m = e["m"], d = e["d"];
  const std::uint64_t seed = e["seed"];
  const auto op = gaussian_sketch(m, d, derived_seed(seed, 0));
  std::vector<Vector> truth, ys;
  if (const std::string path = e["y_csv"]; !path.empty()) {
    ys = io::load_numeric_rows(path);
    for (std::size_t i = 0; i < ys.size(); ++i)
      if (ys[i].size() != m)
        throw IoError(path + ": row " + std::to_string(i + 1) + " has " + std::to_string(ys[i].size()) +
                      " values, sketch has m = " + std::to_string(m));
  } else {
    truth = pipeline::synth_sparse_dataset({d, e["sparsity"], e["instances"],
                                            amplitude_from(e["amplitude"], "amplitude"), derived_seed(seed, 1)});
    ys = pipeline::compress_dataset(truth, op);
    RngStream noise_rng(derived_seed(seed, 2));
    const double noise = e["noise"];
    for (auto& y : ys)
      for (double& v : y) v += noise * noise_rng.normal();
  }

  const json& lam = e["lambda"];
  const std::string policy = lam["policy"];
  recovery::SolverOptions opts;
  opts.max_iter = e["fista"]["max_iter"];
  opts.tol = e["fista"]["tol"];
  opts.debias = e["debias"];
  opts.support_threshold_rel = e["support_threshold_rel"];

  std::vector<recovery::RecoveryResult> results(ys.size());
  std::vector<double> lambdas(ys.size());
  parallel_for(ys.size(), [&](std::size_t i) {
    double lambda = 0.0;
    if (policy == "fixed") {
      lambda = lam["value"];
    } else if (policy == "universal") {
      lambda = recovery::universal_lambda(lam.contains("value") ? lam["value"].get<double>() : e["noise"].get<double>(), d);
    } else {
      lambda = lam["value"].get<double>() * norm_inf(matvec_t(op.matrix, ys[i]));
      if (!(lambda > 0.0)) lambda = lam["value"];
    }
    const recovery::LassoProblem p(op, ys[i], lambda);
    auto o = opts;
    o.record_trace = i == 0;
    results[i] = recovery::fista_solve(p, recovery::default_start(p), o);
    lambdas[i] = lambda;
  });

  Outputs o;
  json per = json::array();
  std::string xcsv;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const auto& r = results[i];
    const Vector& x = r.debiased ? *r.debiased : r.x_hat;
    const recovery::LassoProblem p(op, ys[i], lambdas[i]);
    json row = {{"index", i},
                {"lambda", lambdas[i]},
                {"iterations", r.trace.iterations},
                {"stop", recovery::to_string(r.trace.stop)},
                {"objective", recovery::lasso_objective(p, r.x_hat)},
                {"support_size", r.support.size()}};
    if (!truth.empty()) row["error"] = norm2(sub(x, truth[i]));
    per.push_back(row);
    xcsv += csv_row(x);
  }
  o.report = {{"command", "recover"}, {"sketch", sketch_to_json(op)}, {"instances", per}};
  o.files.emplace_back("x_hat.csv", xcsv);
  if (!results.empty()) o.files.emplace_back("trace.csv", recovery::trace_to_csv(results[0].trace));
  return o;
}

// ---------------------------------------------------------------- train

json train_normalize(const json& j) {
  JsonFields f(j, "");
  json e;
  e["seed"] = f.get<std::uint64_t>("seed", 0);
  e["data_csv"] = f.get<std::string>("data_csv", "");
  json syn = {{"d", 64}, {"sparsity", 3}, {"n", 500}, {"amplitude", "uniform"}};
  if (const auto* sj = f.child("synthetic")) {
    require(e["data_csv"].get<std::string>().empty(), "synthetic", "give either data_csv or synthetic, not both");
    JsonFields sf(*sj, "synthetic");
    syn["d"] = sf.get<std::size_t>("d", 64);
    syn["sparsity"] = sf.get<std::size_t>("sparsity", 3);
    syn["n"] = sf.get<std::size_t>("n", 500);
    syn["amplitude"] = sf.get<std::string>("amplitude", "uniform");
    sf.finish();
  }
  if (e["data_csv"].get<std::string>().empty()) {
    e["synthetic"] = syn;
    require(syn["d"].get<std::size_t>() >= 1, "synthetic.d", "must be positive");
    require(syn["sparsity"].get<std::size_t>() <= syn["d"].get<std::size_t>(), "synthetic.sparsity",
            "must not exceed d");
    require(syn["n"].get<std::size_t>() >= 1, "synthetic.n", "must be positive");
    amplitude_from(syn["amplitude"], "synthetic.amplitude");
  }
  e["m"] = f.get<std::size_t>("m", 0);
  diffusion::VpSchedule sched = diffusion::VpSchedule::standard();
  if (const auto* sj = f.child("schedule")) sched = diffusion::schedule_from_json(*sj, "schedule");
  at_path("schedule", [&] { sched.validate(); return 0; });
  diffusion::TrainConfig tc;
  if (const auto* tj = f.child("train")) tc = diffusion::train_config_from_json(*tj, "train");
  tc.seed = derived_seed(e["seed"], 2);
  at_path("train", [&] { tc.validate(); return 0; });
  e["schedule"] = diffusion::schedule_to_json(sched);
  e["train"] = diffusion::train_config_to_json(tc);
  f.finish();
  if (e.contains("synthetic"))
    require(e["m"].get<std::size_t>() < e["synthetic"]["d"].get<std::size_t>(), "m",
            "must be 0 (no compression) or less than d");
  return e;
}

Outputs train_run(const json& e, const std::string& out_dir) {
  const std::uint64_t seed = e["seed"];
  std::vector<Vector> data;
  if (const std::string path = e["data_csv"]; !path.empty()) {
    data = io::load_numeric_rows(path);
    if (data.empty()) throw IoError(path + ": no data rows");
  } else {
    const json& s = e["synthetic"];
    data = pipeline::synth_sparse_dataset(
        {s["d"], s["sparsity"], s["n"], amplitude_from(s["amplitude"], "synthetic.amplitude"), derived_seed(seed, 1)});
  }
  const std::size_t m = e["m"];
  if (m > 0) {
    if (m >= data.front().size()) throw ConfigError("m", "must be less than the data dimension");
    data = pipeline::compress_dataset(data, gaussian_sketch(m, data.front().size(), derived_seed(seed, 0)));
  }
  const auto sched = diffusion::schedule_from_json(e["schedule"]);
  const auto tc = diffusion::train_config_from_json(e["train"]);
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = diffusion::train(sched, data, tc);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::string model_path = (fs::path(out_dir) / "model.bin").string();
  diffusion::save_model(model_path, model, sched);

  Outputs o;
  const auto& rec = *model.network_params()->training;
  o.report = {{"command", "train"},
              {"dim", data.front().size()},
              {"n", data.size()},
              {"model", "model.bin"},
              {"training",
               {{"initial_window_loss", rec.initial_window_loss}, {"final_window_loss", rec.final_window_loss}}},
              {"timing", {{"train_s", secs}}}};
  std::string loss = "step,loss\n";
  for (std::size_t i = 0; i < rec.loss_history.size(); ++i) {
    std::ostringstream os;
    os << std::setprecision(17) << i << "," << rec.loss_history[i] << "\n";
    loss += os.str();
  }
  o.files.emplace_back("loss.csv", loss);
  o.written.push_back(model_path);
  return o;
}

// ---------------------------------------------------------------- sample

json sample_normalize(const json& j) {
  JsonFields f(j, "");
  json e;
  e["model"] = f.required<std::string>("model");
  e["n"] = f.get<std::size_t>("n", 100);
  diffusion::SamplerConfig sc;
  if (const auto* sj = f.child("sampler")) sc = diffusion::sampler_config_from_json(*sj, "sampler");
  at_path("sampler", [&] { sc.validate(); return 0; });
  e["sampler"] = diffusion::sampler_config_to_json(sc);
  f.finish();
  require(e["n"].get<std::size_t>() >= 1, "n", "must be positive");
  return e;
}

Outputs sample_run(const json& e, const std::string&) {
  const auto loaded = diffusion::load_model(e["model"]);
  const auto sc = diffusion::sampler_config_from_json(e["sampler"]);
  const std::size_t n = e["n"];
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Vector> samples(n);
  parallel_for(n, [&](std::size_t i) {
    samples[i] = std::move(diffusion::sample(loaded.model, loaded.schedule, sc, 1, i)[0]);
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Vector mean(loaded.model.dim(), 0.0);
  for (const auto& s : samples) axpy(1.0 / n, s, mean);
  Outputs o;
  o.report = {{"command", "sample"},
              {"model_kind", diffusion::to_string(loaded.model.kind())},
              {"dim", loaded.model.dim()},
              {"n", n},
              {"sample_mean", mean},
              {"timing", {{"total_s", secs}, {"per_sample_s", secs / n}}}};
  o.files.emplace_back("samples.csv", diffusion::samples_to_csv(samples));
  return o;
}

// ---------------------------------------------------------------- pipeline

json pipeline_normalize(const json& j) { return pipeline::config_to_json(pipeline::config_from_json(j)); }

Outputs pipeline_run(const json& e, const std::string&) {
  const auto report = pipeline::run_pipeline(pipeline::config_from_json(e));
  Outputs o;
  o.report = pipeline::report_to_json(report);
  o.report["command"] = "pipeline";
  o.files.emplace_back("errors.csv", pipeline::errors_to_csv(report));
  return o;
}

// ---------------------------------------------------------------- sweep-m

json sweep_normalize(const json& j) {
  JsonFields f(j, "");
  json e;
  e["d"] = f.get<std::size_t>("d", 1024);
  e["sparsity"] = f.get<std::size_t>("sparsity", 10);
  e["model"] = f.get<std::string>("model", "theoretical");
  e["seed"] = f.get<std::uint64_t>("seed", 0);
  const std::size_t d = e["d"], sparsity = e["sparsity"];
  require(sparsity >= 1, "sparsity", "must be positive");
  require(d > sparsity + 1, "d", "must exceed sparsity + 1");
  const std::string model = e["model"];
  require(model == "theoretical" || model == "measured", "model", "expected 'theoretical' or 'measured'");
  std::vector<std::size_t> grid;
  if (f.has("grid")) {
    const auto* gj = f.child("grid");
    require(gj->is_array() && !gj->empty(), "grid", "expected a non-empty array of integers");
    for (std::size_t i = 0; i < gj->size(); ++i) {
      const auto& v = (*gj)[i];
      const std::string p = "grid[" + std::to_string(i) + "]";
      require(is_index(v), p, "expected a positive integer");
      const std::size_t m = v.get<std::size_t>();
      require(m > sparsity && m < d, p, "must satisfy sparsity < m < d");
      require(grid.empty() || m > grid.back(), p, "grid must be strictly increasing");
      grid.push_back(m);
    }
  } else if (model == "theoretical") {
    for (std::size_t m = sparsity + 1; m < d; ++m) grid.push_back(m);
  } else {
    for (std::size_t m = 32; m < d; m *= 2)
      if (m > sparsity) grid.push_back(m);
    require(!grid.empty(), "grid", "default measured grid is empty for this d; give one");
  }
  e["grid"] = grid;
  pipeline::MeasuredSweepOptions mo;
  e["instances"] = f.get<std::size_t>("instances", mo.instances);
  e["target_error"] = f.get<double>("target_error", mo.target_error);
  e["fista_max_iter"] = f.get<std::size_t>("fista_max_iter", mo.fista_max_iter);
  e["max_diffusion_steps"] = f.get<std::size_t>("max_diffusion_steps", mo.max_diffusion_steps);
  diffusion::VpSchedule sched = mo.schedule;
  if (const auto* sj = f.child("schedule")) sched = diffusion::schedule_from_json(*sj, "schedule");
  at_path("schedule", [&] { sched.validate(); return 0; });
  e["schedule"] = diffusion::schedule_to_json(sched);
  f.finish();
  require(e["instances"].get<std::size_t>() >= 1, "instances", "must be positive");
  require(e["target_error"].get<double>() > 0.0, "target_error", "must be > 0");
  require(e["fista_max_iter"].get<std::size_t>() >= 1, "fista_max_iter", "must be positive");
  require(e["max_diffusion_steps"].get<std::size_t>() >= 1, "max_diffusion_steps", "must be positive");
  return e;
}

Outputs sweep_run(const json& e, const std::string&) {
  pipeline::MeasuredSweepOptions mo;
  mo.seed = e["seed"];
  mo.instances = e["instances"];
  mo.target_error = e["target_error"];
  mo.fista_max_iter = e["fista_max_iter"];
  mo.max_diffusion_steps = e["max_diffusion_steps"];
  mo.schedule = diffusion::schedule_from_json(e["schedule"]);
  const auto grid = e["grid"].get<std::vector<std::size_t>>();
  const auto model = e["model"] == "measured" ? pipeline::CostModel::measured : pipeline::CostModel::theoretical;
  const auto r = pipeline::optimal_m_sweep(e["d"], e["sparsity"], grid, model, mo);
  Outputs o;
  o.report = pipeline::sweep_to_json(r);
  o.report["command"] = "sweep-m";
  o.files.emplace_back("sweep.csv", pipeline::sweep_to_csv(r));
  return o;
}

// ---------------------------------------------------------------- pca

json pca_normalize(const json& j) {
  JsonFields f(j, "");
  json e;
  e["factors_csv"] = f.required<std::string>("factors_csv");
  e["components"] = f.get<std::size_t>("components", 3);
  e["standardize"] = f.get<bool>("standardize", true);
  f.finish();
  require(e["components"].get<std::size_t>() >= 1, "components", "must be positive");
  return e;
}

Outputs pca_run(const json& e, const std::string&) {
  const auto load = stress::load_panel_csv(e["factors_csv"]);
  const auto& panel = load.panel;
  const std::size_t k = e["components"];
  if (k > panel.width())
    throw ConfigError("components", "must not exceed the " + std::to_string(panel.width()) + " factor columns");
  Matrix rows = panel.values;
  std::optional<stress::Standardizer> scaler;
  if (e["standardize"].get<bool>()) {
    scaler = stress::fit_standardizer(rows);
    rows = stress::standardize_rows(*scaler, rows);
  }
  const auto model = stress::pca_fit(rows, k);
  json comps = json::array();
  for (std::size_t r = 0; r < model.k(); ++r) {
    const auto row = model.components.row(r);
    comps.push_back(std::vector<double>(row.begin(), row.end()));
  }
  Outputs o;
  o.report = {{"command", "pca"},
              {"names", panel.names},
              {"periods", panel.periods()},
              {"imputed", load.imputed},
              {"explained", model.explained},
              {"cumulative_explained", stress::cumulative_explained(model)},
              {"total_variance", model.total_variance},
              {"mean", model.mean},
              {"components", comps}};
  std::ostringstream os;
  os << std::setprecision(17) << "date";
  for (std::size_t r = 0; r < model.k(); ++r) os << ",PC" << r + 1;
  os << "\n";
  for (std::size_t t = 0; t < panel.periods(); ++t) {
    const Vector z = stress::pca_encode(model, rows.row(t));
    os << panel.times[t];
    for (double v : z) os << "," << v;
    os << "\n";
  }
  o.files.emplace_back("scores.csv", os.str());
  return o;
}

// ---------------------------------------------------------------- ssa

json ssa_normalize(const json& j) {
  JsonFields f(j, "");
  json e;
  e["seed"] = f.get<std::uint64_t>("seed", 0);
  e["factors_csv"] = f.get<std::string>("factors_csv", "");
  e["returns_csv"] = f.get<std::string>("returns_csv", "");
  const bool from_files = !e["factors_csv"].get<std::string>().empty();
  require(from_files == !e["returns_csv"].get<std::string>().empty(), "returns_csv",
          "factors_csv and returns_csv go together");
  if (!from_files) {
    stress::SyntheticMarketSpec spec;
    json syn = {{"periods", spec.periods},       {"factors", spec.factors},
                {"assets", spec.assets},         {"persistence", spec.persistence},
                {"factor_noise", spec.factor_noise}, {"return_noise", spec.return_noise}};
    if (const auto* sj = f.child("synthetic")) {
      JsonFields sf(*sj, "synthetic");
      syn["periods"] = sf.get<std::size_t>("periods", spec.periods);
      syn["factors"] = sf.get<std::size_t>("factors", spec.factors);
      syn["assets"] = sf.get<std::size_t>("assets", spec.assets);
      syn["persistence"] = sf.get<double>("persistence", spec.persistence);
      syn["factor_noise"] = sf.get<double>("factor_noise", spec.factor_noise);
      syn["return_noise"] = sf.get<double>("return_noise", spec.return_noise);
      sf.finish();
    }
    require(std::abs(syn["persistence"].get<double>()) < 1.0, "synthetic.persistence", "must lie in (-1, 1)");
    require(syn["factors"].get<std::size_t>() >= 1 && syn["assets"].get<std::size_t>() >= 1, "synthetic",
            "factors and assets must be positive");
    e["synthetic"] = syn;
  } else {
    require(!f.has("synthetic"), "synthetic", "not used when reading panels from files");
  }
  e["window"] = f.get<std::size_t>("window", 60);
  e["horizon"] = f.get<std::size_t>("horizon", 1);
  require(e["window"].get<std::size_t>() >= 2, "window", "must be at least 2");
  require(e["horizon"].get<std::size_t>() >= 1, "horizon", "must be positive");

  json stressed = json::array({0, 3});
  if (const auto* sj = f.child("stressed")) {
    require(sj->is_array(), "stressed", "expected an array of factor indices or names");
    for (std::size_t i = 0; i < sj->size(); ++i)
      require(is_index((*sj)[i]) || (*sj)[i].is_string(), "stressed[" + std::to_string(i) + "]",
              "expected a factor index or name");
    stressed = *sj;
  }
  e["stressed"] = stressed;

  std::vector<std::string> weights = {"equal", "gmvp-long-only", "risk-parity"};
  if (const auto* wj = f.child("weights")) {
    require(wj->is_array() && !wj->empty(), "weights", "expected a non-empty array");
    weights.clear();
    for (std::size_t i = 0; i < wj->size(); ++i) {
      const std::string p = "weights[" + std::to_string(i) + "]";
      require((*wj)[i].is_string(), p, "expected a string");
      at_path(p, [&] { return stress::weight_kind_from_string((*wj)[i]); });
      weights.push_back((*wj)[i]);
    }
  }
  e["weights"] = weights;

  json pred = {{"kind", "linear-regression"}, {"input", "macro"}, {"components", 3}};
  stress::NetworkFitOptions nopt;
  json net = {{"hidden", nopt.hidden},
              {"steps", nopt.steps},
              {"batch_size", nopt.batch_size},
              {"learning_rate", nopt.learning_rate}};
  if (const auto* pj = f.child("predictor")) {
    JsonFields pf(*pj, "predictor");
    pred["kind"] = pf.get<std::string>("kind", "linear-regression");
    pred["input"] = pf.get<std::string>("input", "macro");
    pred["components"] = pf.get<std::size_t>("components", 3);
    if (const auto* nj = pf.child("network")) {
      JsonFields nf(*nj, "predictor.network");
      net["hidden"] = nf.get<std::vector<std::size_t>>("hidden", nopt.hidden);
      net["steps"] = nf.get<std::size_t>("steps", nopt.steps);
      net["batch_size"] = nf.get<std::size_t>("batch_size", nopt.batch_size);
      net["learning_rate"] = nf.get<double>("learning_rate", nopt.learning_rate);
      nf.finish();
    }
    pf.finish();
  }
  pred["network"] = net;
  at_path("predictor.kind", [&] { return stress::predictor_kind_from_string(pred["kind"]); });
  require(pred["input"] == "macro" || pred["input"] == "pc", "predictor.input", "expected 'macro' or 'pc'");
  require(pred["components"].get<std::size_t>() >= 1, "predictor.components", "must be positive");
  require(net["steps"].get<std::size_t>() >= 1 && net["batch_size"].get<std::size_t>() >= 1,
          "predictor.network", "steps and batch_size must be positive");
  require(net["learning_rate"].get<double>() > 0.0, "predictor.network.learning_rate", "must be > 0");
  e["predictor"] = pred;

  stress::PcGeneratorConfig gcfg;
  json gen = {{"enabled", false}, {"transitions", 2000}, {"components", gcfg.components}};
  if (const auto* gj = f.child("generated")) {
    JsonFields gf(*gj, "generated");
    gen["enabled"] = gf.get<bool>("enabled", false);
    gen["transitions"] = gf.get<std::size_t>("transitions", 2000);
    gen["components"] = gf.get<std::size_t>("components", gcfg.components);
    if (const auto* sj = gf.child("schedule")) gcfg.schedule = diffusion::schedule_from_json(*sj, "generated.schedule");
    if (const auto* tj = gf.child("train")) gcfg.train = diffusion::train_config_from_json(*tj, "generated.train");
    if (const auto* sj = gf.child("sampler"))
      gcfg.sampler = diffusion::sampler_config_from_json(*sj, "generated.sampler");
    gf.finish();
  }
  gcfg.train.seed = derived_seed(e["seed"], 1);
  gcfg.sampler.seed = derived_seed(e["seed"], 2);
  at_path("generated", [&] {
    gcfg.schedule.validate();
    gcfg.train.validate();
    gcfg.sampler.validate();
    return 0;
  });
  require(gen["transitions"].get<std::size_t>() >= 1, "generated.transitions", "must be positive");
  require(gen["components"].get<std::size_t>() >= 1, "generated.components", "must be positive");
  gen["schedule"] = diffusion::schedule_to_json(gcfg.schedule);
  gen["train"] = diffusion::train_config_to_json(gcfg.train);
  gen["sampler"] = diffusion::sampler_config_to_json(gcfg.sampler);
  e["generated"] = gen;
  f.finish();
  return e;
}

std::vector<std::size_t> resolve_stressed(const json& stressed, const stress::FactorPanel& panel) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < stressed.size(); ++i) {
    const auto& v = stressed[i];
    const std::string p = "stressed[" + std::to_string(i) + "]";
    std::size_t idx = 0;
    if (v.is_string()) {
      const auto it = std::find(panel.names.begin(), panel.names.end(), v.get<std::string>());
      if (it == panel.names.end()) throw ConfigError(p, "no factor named '" + v.get<std::string>() + "'");
      idx = static_cast<std::size_t>(it - panel.names.begin());
    } else {
      idx = v.get<std::size_t>();
      if (idx >= panel.width())
        throw ConfigError(p, "index out of range for " + std::to_string(panel.width()) + " factors");
    }
    out.push_back(idx);
  }
  return out;
}

json stat_gaps(const stress::StressReport& real, const stress::StressReport& gen) {
  json gaps = json::object();
  for (std::size_t k = 0; k < real.series.size(); ++k) {
    const auto& a = real.series[k].stats;
    const auto& b = gen.series[k].stats;
    json g = {{"mean", std::abs(a.mean - b.mean)}};
    for (std::size_t q = 0; q < a.levels.size(); ++q) {
      std::ostringstream key;
      key << "q" << std::setw(2) << std::setfill('0') << std::lround(a.levels[q] * 100.0);
      g[key.str()] = std::abs(a.quantiles[q] - b.quantiles[q]);
    }
    gaps[stress::to_string(real.series[k].kind)] = g;
  }
  return gaps;
}

Outputs ssa_run(const json& e, const std::string&) {
  stress::FactorPanel factors;
  stress::ReturnPanel returns;
  json source;
  if (const std::string fp = e["factors_csv"]; !fp.empty()) {
    auto fl = stress::load_panel_csv(fp);
    auto rl = stress::load_panel_csv(e["returns_csv"]);
    factors = std::move(fl.panel);
    returns = std::move(rl.panel);
    source = {{"factors_imputed", fl.imputed}, {"returns_imputed", rl.imputed}};
  } else {
    const json& s = e["synthetic"];
    const auto mk = stress::synth_market({s["periods"], s["factors"], s["assets"], s["persistence"],
                                          s["factor_noise"], s["return_noise"], derived_seed(e["seed"], 0)});
    factors = mk.factors;
    returns = mk.returns;
    source = {{"synthetic", true}};
  }
  const auto stressed = resolve_stressed(e["stressed"], factors);
  std::vector<stress::WeightKind> kinds;
  for (const auto& w : e["weights"]) kinds.push_back(stress::weight_kind_from_string(w));

  const json& pj = e["predictor"];
  stress::InputTransform transform;
  json pca_info;
  if (pj["input"] == "pc") {
    const std::size_t k = pj["components"];
    if (k > factors.width()) throw ConfigError("predictor.components", "exceeds the number of factors");
    const auto scaler = stress::fit_standardizer(factors.values);
    const auto pca = stress::pca_fit(stress::standardize_rows(scaler, factors.values), k);
    pca_info = {{"explained", pca.explained}, {"cumulative_explained", stress::cumulative_explained(pca)}};
    transform = {scaler, pca};
  }
  stress::Predictor predictor;
  if (stress::predictor_kind_from_string(pj["kind"]) == stress::PredictorKind::linear_regression) {
    predictor = stress::fit_linear_predictor(factors.values, returns.values, transform);
  } else {
    stress::NetworkFitOptions no;
    no.hidden = pj["network"]["hidden"].get<std::vector<std::size_t>>();
    no.steps = pj["network"]["steps"];
    no.batch_size = pj["network"]["batch_size"];
    no.learning_rate = pj["network"]["learning_rate"];
    no.seed = derived_seed(e["seed"], 3);
    predictor = stress::fit_network_predictor(factors.values, returns.values, transform, no);
  }

  stress::BacktestOptions bo;
  bo.horizon = e["horizon"];
  const std::size_t window = e["window"];
  const auto real = stress::rolling_backtest(factors, returns, window, stressed, predictor, kinds, bo);

  Outputs o;
  o.report = {{"command", "ssa"},
              {"source", source},
              {"predictor",
               {{"kind", pj["kind"]},
                {"input", pj["input"]},
                {"r_squared", stress::r_squared(predictor, factors.values, returns.values)}}},
              {"real", stress::stress_report_to_json(real)}};
  if (!pca_info.is_null()) o.report["predictor"]["pca"] = pca_info;
  o.files.emplace_back("table_real.csv", stress::stress_table_csv(real));

  const json& gj = e["generated"];
  if (gj["enabled"].get<bool>()) {
    stress::PcGeneratorConfig gc;
    gc.components = gj["components"];
    if (gc.components > factors.width()) throw ConfigError("generated.components", "exceeds the number of factors");
    gc.schedule = diffusion::schedule_from_json(gj["schedule"]);
    gc.train = diffusion::train_config_from_json(gj["train"]);
    gc.sampler = diffusion::sampler_config_from_json(gj["sampler"]);
    const auto t0 = std::chrono::steady_clock::now();
    const auto generator = stress::fit_pc_generator(factors.values, gc);
    const auto transitions = stress::generate_transitions(generator, gc.sampler, gj["transitions"]);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto gen = stress::generated_backtest(transitions, returns, window, stressed, predictor, kinds, bo);
    o.report["generated"] = stress::stress_report_to_json(gen);
    o.report["generated"]["pca_cumulative_explained"] = stress::cumulative_explained(generator.pca);
    o.report["gaps"] = stat_gaps(real, gen);
    o.report["timing"] = {{"generator_s", secs}};
    o.files.emplace_back("table_generated.csv", stress::stress_table_csv(gen));
  }
  return o;
}

// ---------------------------------------------------------------- bench

json bench_normalize(const json& j) {
  JsonFields f(j, "");
  json e;
  e["mode"] = f.required<std::string>("mode");
  const std::string mode = e["mode"];
  if (mode == "arithmetic") {
    e["t_diff_m"] = f.required<double>("t_diff_m");
    e["t_cs"] = f.required<double>("t_cs");
    e["m"] = f.required<std::size_t>("m");
    e["d"] = f.required<std::size_t>("d");
    require(std::isfinite(e["t_diff_m"].get<double>()) && e["t_diff_m"].get<double>() > 0.0, "t_diff_m",
            "must be > 0");
    require(std::isfinite(e["t_cs"].get<double>()) && e["t_cs"].get<double>() >= 0.0, "t_cs", "must be >= 0");
    require(e["m"].get<std::size_t>() >= 1, "m", "must be positive");
    require(e["d"].get<std::size_t>() >= 1, "d", "must be positive");
  } else if (mode == "pipeline") {
    json pj = json::object();
    if (const auto* c = f.child("pipeline")) pj = *c;
    try {
      auto cfg = pipeline::config_from_json(pj);
      cfg.ambient_timing = true;
      e["pipeline"] = pipeline::config_to_json(cfg);
    } catch (const ConfigError& err) {
      throw ConfigError(err.path().empty() ? "pipeline" : "pipeline." + err.path(), err.what());
    }
  } else {
    throw ConfigError("mode", "expected 'arithmetic' or 'pipeline'");
  }
  f.finish();
  return e;
}

Outputs bench_run(const json& e, const std::string&) {
  pipeline::TimingReport t;
  std::size_t m = 0, d = 0;
  Outputs o;
  if (e["mode"] == "arithmetic") {
    m = e["m"];
    d = e["d"];
    t = pipeline::measure_speedup(e["t_diff_m"], e["t_cs"], m, d);
    o.report = {{"command", "bench"}, {"mode", "arithmetic"}};
  } else {
    const auto cfg = pipeline::config_from_json(e["pipeline"]);
    const auto r = pipeline::run_pipeline(cfg);
    t = r.timing;
    m = cfg.m;
    d = cfg.d;
    o.report = {{"command", "bench"}, {"mode", "pipeline"}, {"median_error", r.generated.summary.median}};
  }
  json timing = {{"t_diff_m", t.t_diff_m},
                 {"t_cs", t.t_cs},
                 {"t_diff_d_estimated", t.t_diff_d_estimated},
                 {"speedup", t.speedup},
                 {"hardware_note", t.hardware_note}};
  if (t.t_diff_d_measured) timing["t_diff_d_measured"] = *t.t_diff_d_measured;
  o.report["timing"] = timing;
  std::ostringstream os;
  os << std::setprecision(17) << "m,d,t_diff_m,t_cs,t_diff_d_estimated,t_diff_d_measured,speedup\n"
     << m << "," << d << "," << t.t_diff_m << "," << t.t_cs << "," << t.t_diff_d_estimated << ",";
  if (t.t_diff_d_measured) os << *t.t_diff_d_measured;
  os << "," << t.speedup << "\n";
  o.files.emplace_back("timing.csv", os.str());
  return o;
}

// ---------------------------------------------------------------- make-data

json make_data_normalize(const json& j) {
  JsonFields f(j, "");
  json e;
  e["kind"] = f.required<std::string>("kind");
  e["seed"] = f.get<std::uint64_t>("seed", 0);
  const std::string kind = e["kind"];
  if (kind == "sparse") {
    e["d"] = f.get<std::size_t>("d", 1024);
    e["sparsity"] = f.get<std::size_t>("sparsity", 10);
    e["n"] = f.get<std::size_t>("n", 2000);
    e["amplitude"] = f.get<std::string>("amplitude", "uniform");
    require(e["d"].get<std::size_t>() >= 1, "d", "must be positive");
    require(e["sparsity"].get<std::size_t>() <= e["d"].get<std::size_t>(), "sparsity", "must not exceed d");
    amplitude_from(e["amplitude"], "amplitude");
  } else if (kind == "market") {
    stress::SyntheticMarketSpec s;
    e["periods"] = f.get<std::size_t>("periods", s.periods);
    e["factors"] = f.get<std::size_t>("factors", s.factors);
    e["assets"] = f.get<std::size_t>("assets", s.assets);
    e["persistence"] = f.get<double>("persistence", s.persistence);
    e["factor_noise"] = f.get<double>("factor_noise", s.factor_noise);
    e["return_noise"] = f.get<double>("return_noise", s.return_noise);
    require(std::abs(e["persistence"].get<double>()) < 1.0, "persistence", "must lie in (-1, 1)");
    require(e["factors"].get<std::size_t>() >= 1, "factors", "must be positive");
    require(e["assets"].get<std::size_t>() >= 1, "assets", "must be positive");
  } else if (kind == "strokes" || kind == "idx") {
    if (kind == "strokes") {
      e["n"] = f.get<std::size_t>("n", 100);
      e["width"] = f.get<std::size_t>("width", 28);
      e["height"] = f.get<std::size_t>("height", 28);
      require(e["width"].get<std::size_t>() >= 4 && e["height"].get<std::size_t>() >= 4, "width",
              "images must be at least 4x4");
    } else {
      e["path"] = f.required<std::string>("path");
      e["limit"] = f.get<std::size_t>("limit", 0);
    }
    e["upscale_width"] = f.get<std::size_t>("upscale_width", 0);
    e["upscale_height"] = f.get<std::size_t>("upscale_height", 0);
    require((e["upscale_width"].get<std::size_t>() == 0) == (e["upscale_height"].get<std::size_t>() == 0),
            "upscale_height", "set both upscale sizes or neither");
  } else {
    throw ConfigError("kind", "expected 'sparse', 'market', 'strokes' or 'idx'");
  }
  f.finish();
  return e;
}

Outputs make_data_run(const json& e, const std::string& out_dir) {
  const std::string kind = e["kind"];
  const std::uint64_t seed = e["seed"];
  Outputs o;
  o.report = {{"command", "make-data"}, {"kind", kind}};
  if (kind == "sparse") {
    const auto data = pipeline::synth_sparse_dataset(
        {e["d"], e["sparsity"], e["n"], amplitude_from(e["amplitude"], "amplitude"), seed});
    o.files.emplace_back("data.csv", diffusion::samples_to_csv(data));
    o.report["n"] = data.size();
  } else if (kind == "market") {
    const auto mk = stress::synth_market(
        {e["periods"], e["factors"], e["assets"], e["persistence"], e["factor_noise"], e["return_noise"], seed});
    o.files.emplace_back("factors.csv", stress::panel_to_csv(mk.factors));
    o.files.emplace_back("returns.csv", stress::panel_to_csv(mk.returns));
    o.report["periods"] = mk.factors.periods();
  } else {
    io::ImageDataset ds;
    if (kind == "strokes") {
      ds = io::synth_stroke_images(e["n"], e["width"], e["height"], seed);
      const std::string p = (fs::path(out_dir) / "images.idx").string();
      io::write_idx_images(p, ds);
      o.written.push_back(p);
    } else {
      ds = io::load_idx_images(e["path"]);
      if (const std::size_t lim = e["limit"]; lim > 0 && lim < ds.images.size()) ds.images.resize(lim);
    }
    o.report["count"] = ds.images.size();
    o.report["width"] = ds.width;
    o.report["height"] = ds.height;
    o.report["near_zero_fraction"] = io::near_zero_fraction(ds);
    if (const std::size_t w = e["upscale_width"]; w > 0) {
      ds = at_path("upscale_width", [&] { return io::upscale_nearest(ds, w, e["upscale_height"]); });
      o.report["upscaled"] = {{"width", ds.width},
                              {"height", ds.height},
                              {"near_zero_fraction", io::near_zero_fraction(ds)}};
      const std::string p = (fs::path(out_dir) / "upscaled.idx").string();
      io::write_idx_images(p, ds);
      o.written.push_back(p);
    }
    o.files.emplace_back("images.csv", diffusion::samples_to_csv(ds.images));
  }
  return o;
}

const std::vector<Command>& commands() {
  static const std::vector<Command> table = {
      {"sketch", "Draw a Gaussian measurement matrix", sketch_normalize, sketch_run, set_top_seed},
      {"recover", "Lasso recovery with FISTA", recover_normalize, recover_run, set_top_seed},
      {"train", "Train a score network on data or latents", train_normalize, train_run, set_top_seed},
      {"sample", "Draw samples from a saved model", sample_normalize, sample_run,
       [](json& j, std::uint64_t s) { j["sampler"]["seed"] = s; }},
      {"pipeline", "Compress, train, sample and decode", pipeline_normalize, pipeline_run, set_top_seed},
      {"sweep-m", "Cost of the latent dimension over a grid", sweep_normalize, sweep_run, set_top_seed},
      {"pca", "Principal components of a factor panel", pca_normalize, pca_run, nullptr},
      {"ssa", "Stressed-scenario backtest of portfolio weights", ssa_normalize, ssa_run, set_top_seed},
      {"bench", "Wall-clock speedup of latent generation", bench_normalize, bench_run,
       [](json& j, std::uint64_t s) {
         if (j.value("mode", "") == "pipeline") j["pipeline"]["seed"] = s;
       }},
      {"make-data", "Write synthetic datasets or convert IDX images", make_data_normalize, make_data_run,
       set_top_seed},
  };
  return table;
}

const Command& find_command(const std::string& name) {
  for (const auto& c : commands())
    if (c.name == name) return c;
  throw InvalidArgument("unknown subcommand '" + name + "'");
}

int report_error(std::ostream& err, const std::string& kind, const std::string& what, int code) {
  err << "csdm: " << kind << ": " << what << "\n";
  return code;
}

}  // namespace

const std::vector<std::string>& subcommand_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& c : commands()) n.push_back(c.name);
    return n;
  }();
  return names;
}

json effective_config(const std::string& subcommand, const json& config) {
  return find_command(subcommand).normalize(config);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Compressed sensing with latent diffusion models", "csdm"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir = "csdm-out";
  std::optional<std::uint64_t> seed;
  bool quiet = false, verbose = false;
  app.add_option("--config", config_path, "JSON config file; omitted fields take defaults");
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();
  app.add_flag("--quiet", quiet, "Suppress warnings");
  app.add_flag("--verbose", verbose, "Progress messages");
  for (const auto& c : commands()) app.add_subcommand(c.name, c.help);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : config_error;
  }
  log::set_level(quiet ? log::Level::quiet : verbose ? log::Level::info : log::Level::warn);
  const Command& cmd = find_command(app.get_subcommands().front()->get_name());

  try {
    json config = json::object();
    if (!config_path.empty()) {
      const std::string text = io::read_text_file(config_path);
      try {
        config = json::parse(text);
      } catch (const json::parse_error& e) {
        throw ConfigError("", config_path + ": invalid JSON: " + e.what());
      }
    }
    if (seed) {
      if (!cmd.set_seed) throw ConfigError("seed", "'" + cmd.name + "' takes no seed");
      if (!config.is_object()) throw ConfigError("", "config must be a JSON object");
      cmd.set_seed(config, *seed);
    }
    const json effective = cmd.normalize(config);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError(out_dir + ": cannot create directory: " + ec.message());
    const std::string eff_path = (fs::path(out_dir) / "effective-config.json").string();
    io::write_text_file(eff_path, effective.dump(1) + "\n");
    log::info("running " + cmd.name + " with " + std::to_string(worker_count()) + " worker(s)");

    Outputs o = cmd.run(effective, out_dir);
    o.report["config"] = effective;
    auto written = io::emit_report(out_dir, o.report, o.files);
    written.insert(written.begin(), eff_path);
    written.insert(written.end(), o.written.begin(), o.written.end());
    for (const auto& p : written) out << p << "\n";
    return ok;
  } catch (const ConfigError& e) {
    return report_error(err, "config error", e.what(), config_error);
  } catch (const InvalidArgument& e) {
    return report_error(err, "invalid argument", e.what(), config_error);
  } catch (const NumericalError& e) {
    return report_error(err, "numerical failure", e.what(), numerical_error);
  } catch (const IoError& e) {
    return report_error(err, "i/o error", e.what(), io_error);
  } catch (const json::exception& e) {
    return report_error(err, "config error", e.what(), config_error);
  } catch (const std::exception& e) {
    return report_error(err, "error", e.what(), failure);
  }
}

}  // namespace csdm::cli
