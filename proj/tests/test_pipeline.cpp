#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "csdm/error.hpp"
#include "csdm/pipeline.hpp"
#include "csdm/stats.hpp"

using namespace csdm;
using namespace csdm::pipeline;

namespace {

std::size_t nnz(const Vector& x) {
  return static_cast<std::size_t>(std::count_if(x.begin(), x.end(), [](double v) { return v != 0.0; }));
}

PipelineConfig small_config() {
  PipelineConfig c;
  c.d = 64;
  c.m = 32;
  c.sparsity = 3;
  c.n_train = 50;
  c.n_generate = 30;
  c.n_floor = 10;
  c.sampler.steps = 200;
  c.score = ScoreSource::analytic_mixture;
  return c;
}

// Slope of log(y) against log(x) by ordinary least squares.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  Eigen::MatrixXd a(x.size(), 2);
  Eigen::VectorXd b(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    a(i, 0) = std::log(x[i]);
    a(i, 1) = 1.0;
    b(i) = std::log(y[i]);
  }
  return a.colPivHouseholderQr().solve(b)(0);
}

}  // namespace

// ---------------------------------------------------------------- dataset

TEST(SynthDataset, ZeroSparsityGivesZeroVectors) {
  const auto xs = synth_sparse_dataset({16, 0, 20, AmplitudeLaw::uniform, 3});
  ASSERT_EQ(xs.size(), 20u);
  for (const auto& x : xs) EXPECT_EQ(nnz(x), 0u);
}

TEST(SynthDataset, UnitAmplitudesHaveNormSqrtS) {
  const auto xs = synth_sparse_dataset({8, 2, 500, AmplitudeLaw::unit, 1});
  for (const auto& x : xs) {
    EXPECT_EQ(nnz(x), 2u);
    EXPECT_DOUBLE_EQ(norm2(x), std::sqrt(2.0));
  }
}

TEST(SynthDataset, UniformAmplitudesInRangeWithBothSigns) {
  const auto xs = synth_sparse_dataset({50, 5, 400, AmplitudeLaw::uniform, 2});
  std::size_t negative = 0, total = 0;
  for (const auto& x : xs) {
    EXPECT_EQ(nnz(x), 5u);
    for (double v : x) {
      if (v == 0.0) continue;
      EXPECT_GE(std::abs(v), 0.5);
      EXPECT_LE(std::abs(v), 1.5);
      negative += v < 0.0;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(negative) / total, 0.5, 0.05);
}

TEST(SynthDataset, SupportsAreUniformChiSquare) {
  // All 28 two-element supports of {0..7}; 27 degrees of freedom, 1% critical value 46.963.
  const std::size_t n = 10000;
  const auto xs = synth_sparse_dataset({8, 2, n, AmplitudeLaw::unit, 11});
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> counts;
  for (const auto& x : xs) {
    std::vector<std::size_t> s;
    for (std::size_t i = 0; i < 8; ++i)
      if (x[i] != 0.0) s.push_back(i);
    ASSERT_EQ(s.size(), 2u);
    ++counts[{s[0], s[1]}];
  }
  EXPECT_EQ(counts.size(), 28u);
  const double expected = static_cast<double>(n) / 28.0;
  double chi2 = 0.0;
  for (const auto& [k, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 46.963);
}

TEST(SynthDataset, SeededAndRejectsOversizedSupport) {
  const SparseDatasetSpec spec{30, 4, 10, AmplitudeLaw::uniform, 9};
  EXPECT_EQ(synth_sparse_dataset(spec), synth_sparse_dataset(spec));
  auto other = spec;
  other.seed = 10;
  EXPECT_NE(synth_sparse_dataset(spec), synth_sparse_dataset(other));
  EXPECT_THROW(synth_sparse_dataset({4, 5, 1, AmplitudeLaw::unit, 0}), InvalidArgument);
}

// ---------------------------------------------------------------- compress

TEST(Compress, ZeroMapsToZero) {
  const auto a = gaussian_sketch(5, 12, 1);
  const auto ys = compress_dataset(std::vector<Vector>{Vector(12, 0.0)}, a);
  EXPECT_EQ(ys.front(), Vector(5, 0.0));
}

TEST(Compress, NormsRespectRestrictedIsometryBounds) {
  const auto a = gaussian_sketch(8, 12, 4);
  const double delta = restricted_isometry_constant(a.matrix, 2);
  EXPECT_GT(delta, 0.0);
  const auto xs = synth_sparse_dataset({12, 2, 300, AmplitudeLaw::uniform, 5});
  const auto ys = compress_dataset(xs, a);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double ratio = norm2(ys[i]) / norm2(xs[i]);
    EXPECT_GE(ratio, std::sqrt(std::max(0.0, 1.0 - delta)) - 1e-12);
    EXPECT_LE(ratio, std::sqrt(1.0 + delta) + 1e-12);
  }
}

TEST(Compress, RepeatableAndChecksDimensions) {
  const auto xs = synth_sparse_dataset({40, 3, 5, AmplitudeLaw::uniform, 6});
  const auto y1 = compress_dataset(xs, gaussian_sketch(10, 40, 77));
  const auto y2 = compress_dataset(xs, gaussian_sketch(10, 40, 77));
  EXPECT_EQ(y1, y2);
  EXPECT_THROW(compress_dataset(xs, gaussian_sketch(10, 41, 77)), InvalidArgument);
}

// ---------------------------------------------------------------- timing

TEST(MeasureSpeedup, ReproducesReportedRow) {
  const auto t = measure_speedup(0.5441, 0.0741, 784, 1600);
  EXPECT_NEAR(t.speedup, 0.443, 0.001);
  EXPECT_NEAR(t.t_diff_d_estimated, 1.1104, 0.001);
}

TEST(MeasureSpeedup, Substitutions) {
  EXPECT_DOUBLE_EQ(measure_speedup(0.3, 0.0, 50, 100).speedup, 0.5);
  const auto t = measure_speedup(0.4, 0.1, 100, 100);
  EXPECT_DOUBLE_EQ(t.speedup, -0.1 / 0.4);
  EXPECT_LE(t.speedup, 0.0);
}

TEST(MeasureSpeedup, IdentityHoldsOverOwnFields) {
  RngStream rng(8);
  for (int i = 0; i < 200; ++i) {
    const auto m = 1 + rng.below(500);
    const auto d = m + rng.below(2000);
    const auto t = measure_speedup(rng.uniform(1e-4, 2.0), rng.uniform(0.0, 1.0), m, d);
    const double again = 1.0 - (static_cast<double>(m) / d) * (1.0 + t.t_cs / t.t_diff_m);
    EXPECT_NEAR(t.speedup, again, 1e-9);
  }
}

TEST(MeasureSpeedup, RejectsBadTimes) {
  EXPECT_THROW(measure_speedup(0.0, 0.1, 10, 20), InvalidArgument);
  EXPECT_THROW(measure_speedup(-1.0, 0.1, 10, 20), InvalidArgument);
  EXPECT_THROW(measure_speedup(1.0, -0.1, 10, 20), InvalidArgument);
  EXPECT_THROW(measure_speedup(std::nan(""), 0.1, 10, 20), InvalidArgument);
  EXPECT_THROW(measure_speedup(1.0, 0.1, 0, 20), InvalidArgument);
}

// ---------------------------------------------------------------- sweep

TEST(Sweep, TheoreticalArgminIsSqrtD) {
  std::vector<std::size_t> grid(9998);
  std::iota(grid.begin(), grid.end(), 2);
  const auto r = optimal_m_sweep(10000, 1, grid, CostModel::theoretical);
  EXPECT_EQ(r.argmin, 100u);
  EXPECT_NEAR(static_cast<double>(r.argmin), 100.0, 5.0);
  const auto best = std::min_element(r.points.begin(), r.points.end(),
                                     [](const auto& a, const auto& b) { return a.cost < b.cost; });
  EXPECT_DOUBLE_EQ(best->cost, 101.0);
}

TEST(Sweep, SubstitutionAtSqrtD) {
  EXPECT_DOUBLE_EQ(theoretical_cost(100, 10000, 1), std::max(100.0, 100.0 + 1.0));
  EXPECT_DOUBLE_EQ(theoretical_cost(10, 100, 4), 12.0);
  EXPECT_THROW(theoretical_cost(0, 100, 1), InvalidArgument);
}

TEST(Sweep, TiesGoToSmallerM) {
  // d = 12, S = 0: costs max(m, 12/m) are 6, 4, 4, 6 for m = 2, 3, 4, 6.
  const std::vector<std::size_t> grid{6, 4, 3, 2};
  const auto r = optimal_m_sweep(12, 0, grid, CostModel::theoretical);
  EXPECT_EQ(r.argmin, 3u);
}

TEST(Sweep, RejectsEmptyOrOutOfRangeGrid) {
  EXPECT_THROW(optimal_m_sweep(100, 2, std::vector<std::size_t>{}, CostModel::theoretical),
               InvalidArgument);
  EXPECT_THROW(optimal_m_sweep(100, 2, std::vector<std::size_t>{2, 10}, CostModel::theoretical),
               InvalidArgument);
  EXPECT_THROW(optimal_m_sweep(100, 2, std::vector<std::size_t>{10, 100}, CostModel::theoretical),
               InvalidArgument);
}

TEST(Sweep, MeasuredModeCountsBothStages) {
  MeasuredSweepOptions o;
  o.instances = 2;
  const std::vector<std::size_t> grid{16, 32, 64};
  const auto r = optimal_m_sweep(128, 2, grid, CostModel::measured, o);
  ASSERT_EQ(r.points.size(), 3u);
  for (const auto& p : r.points) {
    EXPECT_DOUBLE_EQ(p.cost, p.diffusion_steps + p.fista_steps);
    EXPECT_GT(p.diffusion_steps, 0.0);
  }
  // The latent sampler needs more steps as the latent dimension grows.
  EXPECT_LT(r.points[0].diffusion_steps, r.points[2].diffusion_steps);
  EXPECT_EQ(r.argmin, std::min_element(r.points.begin(), r.points.end(), [](auto& a, auto& b) {
                        return a.cost < b.cost;
                      })->m);
  const auto again = optimal_m_sweep(128, 2, grid, CostModel::measured, o);
  EXPECT_EQ(sweep_to_csv(r), sweep_to_csv(again));
}

TEST(Sweep, EmptyCurveCsvIsHeaderOnly) {
  EXPECT_EQ(sweep_to_csv(SweepResult{}), "m,cost,diffusion_steps,fista_steps\n");
}

// ---------------------------------------------------------------- errors

TEST(EndToEndError, IdenticalSetsGiveZero) {
  const auto xs = synth_sparse_dataset({20, 3, 15, AmplitudeLaw::uniform, 1});
  const auto e = end_to_end_error(xs, xs);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_EQ(e.per_sample[i].distance, 0.0);
    EXPECT_EQ(e.per_sample[i].precision, 1.0);
    EXPECT_EQ(e.per_sample[i].recall, 1.0);
  }
  EXPECT_EQ(e.summary.max, 0.0);
}

TEST(EndToEndError, SingleReferenceIsDirectDistance) {
  const Vector ref{1.0, 0.0, -2.0};
  const std::vector<Vector> xs{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}};
  const auto e = end_to_end_error(xs, std::vector<Vector>{ref});
  EXPECT_DOUBLE_EQ(e.per_sample[0].distance, std::sqrt(5.0));
  EXPECT_DOUBLE_EQ(e.per_sample[1].distance, std::sqrt(10.0));
  // Empty support has precision 0; support {0,1,2} against {0,2} has 2/3.
  EXPECT_EQ(e.per_sample[0].precision, 0.0);
  EXPECT_EQ(e.per_sample[0].recall, 0.0);
  EXPECT_DOUBLE_EQ(e.per_sample[1].precision, 2.0 / 3.0);
  EXPECT_EQ(e.per_sample[1].recall, 1.0);
}

TEST(EndToEndError, MatchesBruteForceOracle) {
  RngStream rng(21);
  std::vector<Vector> samples(40, Vector(25)), refs(70, Vector(25));
  for (auto& v : samples)
    for (double& x : v) x = rng.normal();
  for (auto& v : refs)
    for (double& x : v) x = rng.normal();
  const auto e = end_to_end_error(samples, refs);
  std::vector<double> dists;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Eigen::Map<const Eigen::VectorXd> s(samples[i].data(), 25);
    double best = 1e300;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < refs.size(); ++j) {
      const double dist = (s - Eigen::Map<const Eigen::VectorXd>(refs[j].data(), 25)).norm();
      if (dist < best) best = dist, arg = j;
    }
    EXPECT_NEAR(e.per_sample[i].distance, best, 1e-12);
    EXPECT_EQ(e.per_sample[i].nearest, arg);
    dists.push_back(best);
  }
  std::sort(dists.begin(), dists.end());
  EXPECT_NEAR(e.summary.median, 0.5 * (dists[19] + dists[20]), 1e-12);
  EXPECT_NEAR(e.summary.max, dists.back(), 1e-12);
  EXPECT_NEAR(e.summary.mean, std::accumulate(dists.begin(), dists.end(), 0.0) / 40.0, 1e-12);
}

TEST(EndToEndError, RejectsEmptySets) {
  EXPECT_THROW(end_to_end_error(std::vector<Vector>{}, std::vector<Vector>{{1.0}}),
               InvalidArgument);
  EXPECT_THROW(end_to_end_error(std::vector<Vector>{{1.0}}, std::vector<Vector>{}),
               InvalidArgument);
}

// ---------------------------------------------------------------- config

TEST(PipelineConfigJson, RoundTripsAndRejectsUnknownKeys) {
  auto c = small_config();
  c.lambda = {LambdaPolicy::Kind::fixed, 0.25};
  c.debias = true;
  const auto j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);

  auto bad = j;
  bad["sampler"]["stepz"] = 3;
  try {
    config_from_json(bad);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("sampler.stepz"), std::string::npos) << e.what();
  }
  bad = j;
  bad["m"] = 64;  // m must stay below d
  EXPECT_THROW(config_from_json(bad), ConfigError);
  bad = j;
  bad["lambda"] = {{"policy", "fixed"}};
  EXPECT_THROW(config_from_json(bad), ConfigError);
}

TEST(PipelineConfigJson, ValidateEnforcesInvariants) {
  auto c = small_config();
  c.sparsity = 40;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = small_config();
  c.n_generate = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_THROW(run_pipeline(c), InvalidArgument);
}

// ---------------------------------------------------------------- pipeline

TEST(Pipeline, PointMassDataIsRecovered) {
  // n_train = 1 makes the data law a single S-sparse point.
  PipelineConfig c;
  c.d = 48;
  c.m = 16;
  c.sparsity = 2;
  c.n_train = 1;
  c.n_generate = 20;
  c.n_floor = 1;
  c.debias = true;
  c.train.steps = 15000;
  c.train.learning_rate = 3e-3;
  c.sampler.steps = 500;
  const auto r = run_pipeline(c);
  for (const auto& s : r.generated.per_sample) {
    EXPECT_EQ(s.nearest, 0u);
    EXPECT_LE(s.distance, 0.05);
  }
  EXPECT_LT(r.final_window_loss, r.initial_window_loss);
}

TEST(Pipeline, GaussianLatentResidualWithinKktBound) {
  PipelineConfig c = small_config();
  c.score = ScoreSource::analytic_gaussian;
  c.fista_max_iter = 5000;
  c.fista_tol = 1e-9;
  const auto r = run_pipeline(c);
  ASSERT_EQ(r.latent_residuals.size(), c.n_generate);
  for (double res : r.latent_residuals)
    EXPECT_LE(res, 2.0 * r.lambda * std::sqrt(static_cast<double>(c.sparsity)));
}

TEST(Pipeline, ReportRoundTripsExactly) {
  PipelineConfig c = small_config();
  c.ambient_timing = true;
  const auto r = run_pipeline(c);
  const auto j = report_to_json(r);
  const auto back = report_to_json(report_from_json(nlohmann::json::parse(j.dump())));
  EXPECT_EQ(back.dump(), j.dump());
  ASSERT_TRUE(r.timing.t_diff_d_measured.has_value());
  EXPECT_NEAR(r.timing.speedup,
              1.0 - (double(c.m) / c.d) * (1.0 + r.timing.t_cs / r.timing.t_diff_m), 1e-9);
  EXPECT_FALSE(strip_timing(j).contains("timing"));
  const std::string csv = errors_to_csv(r);
  EXPECT_EQ(csv.rfind("index,distance,nearest,precision,recall,support_size,latent_residual\n", 0),
            0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(c.n_generate + 1));
}

TEST(Pipeline, IdenticalConfigsGiveIdenticalReports) {
  PipelineConfig c = small_config();
  c.score = ScoreSource::trained;
  c.train.steps = 200;
  c.train.hidden = {16, 16};
  c.sampler.steps = 50;
  const auto a = strip_timing(report_to_json(run_pipeline(c)));
  const auto b = strip_timing(report_to_json(run_pipeline(c)));
  EXPECT_EQ(a.dump(), b.dump());
  c.seed = 1;
  EXPECT_NE(strip_timing(report_to_json(run_pipeline(c))).dump(), a.dump());
}

// Disabled: on this instance the median rises from 0.063158 (k = 100) to
// 0.063270 (k = 200). FISTA iterates are not monotone in distance to the
// exemplar once they reach the Lasso minimizer's neighbourhood.
TEST(Pipeline, DISABLED_MoreFistaIterationsNeverRaiseMedianError) {
  PipelineConfig c = small_config();
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t k : {1, 2, 3, 5, 8, 13, 20, 50, 100, 200, 500}) {
    c.fista_max_iter = k;
    const double med = run_pipeline(c).generated.summary.median;
    EXPECT_LE(med, previous) << "k = " << k;
    previous = med;
  }
}

// Disabled: the measured slope is about -0.83, first order rather than the
// square-root rate of the upper bound. See the step-scaling acceptance line.
TEST(Pipeline, DISABLED_ErrorDecaysLikeInverseSqrtSteps) {
  PipelineConfig c = small_config();
  c.n_generate = 50;
  std::vector<double> ks, errs;
  for (std::size_t k : {8, 16, 32, 64, 128, 256, 512, 1024}) {
    c.sampler.steps = k;
    ks.push_back(static_cast<double>(k));
    errs.push_back(run_pipeline(c).generated.summary.median);
  }
  EXPECT_NEAR(loglog_slope(ks, errs), -0.5, 0.25);
}
