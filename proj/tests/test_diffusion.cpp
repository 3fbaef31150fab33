#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "csdm/diffusion.hpp"
#include "csdm/error.hpp"
#include "csdm/stats.hpp"

using namespace csdm;
using namespace csdm::diffusion;

namespace {

const VpSchedule kSched = VpSchedule::standard();

NetworkParams tiny_network(std::size_t dim, std::size_t features, bool skip, std::uint64_t seed) {
  return NetworkParams{nn::Mlp({dim + features, 8, 8, dim}, seed), dim, features, skip, {}};
}

NetworkParams zero_network(std::size_t dim) {
  NetworkParams p = tiny_network(dim, 16, false, 1);
  std::fill(p.mlp.parameters().begin(), p.mlp.parameters().end(), 0.0);
  return p;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("csdm_test_" + name)).string();
}

std::vector<Vector> standard_normal_data(std::size_t n, std::size_t d, std::uint64_t seed) {
  RngStream r(seed);
  std::vector<Vector> out(n, Vector(d));
  for (auto& v : out)
    for (double& x : v) x = r.normal();
  return out;
}

}  // namespace

TEST(Schedule, AlphaSigmaBasics) {
  const auto [a0, s0] = vp_alpha_sigma(kSched, 0.0);
  EXPECT_EQ(a0, 1.0);
  EXPECT_EQ(s0, 0.0);
  RngStream r(3);
  for (int i = 0; i < 100; ++i) {
    const auto [a, s] = vp_alpha_sigma(kSched, r.uniform(0.0, 1.0));
    EXPECT_NEAR(a * a + s * s, 1.0, 1e-10);
  }
  EXPECT_THROW(vp_alpha_sigma(kSched, -0.1), InvalidArgument);
  EXPECT_THROW(vp_alpha_sigma(kSched, 1.5), InvalidArgument);
  double prev = 1.0;
  for (int i = 1; i <= 100; ++i) {
    const double a = vp_alpha_sigma(kSched, i / 100.0).alpha;
    EXPECT_LT(a, prev);
    prev = a;
  }
  EXPECT_LE(vp_alpha_sigma(kSched, 1.0).alpha, 1e-2);
}

TEST(Schedule, LinearDriftClosedFormAgainstMomentOde) {
  VpSchedule s;
  s.a = 0.0;
  s.b = 1.0;
  s.horizon = 3.0;
  const auto [alpha, sigma] = vp_alpha_sigma(s, 2.0);
  EXPECT_NEAR(alpha, 0.367879, 1e-6);
  EXPECT_NEAR(sigma, 0.929873, 1e-6);
  // RK4 on dm/dt = -beta m / 2, dv/dt = -beta v + beta from (1, 0).
  for (double a : {0.0, 19.9}) {
    VpSchedule q = s;
    q.a = a;
    q.b = a > 0 ? 0.1 : 1.0;
    double m = 1.0, v = 0.0;
    const int n = 20000;
    const double h = 2.0 / n;
    auto dm = [&](double t, double x) { return -0.5 * q.beta(t) * x; };
    auto dv = [&](double t, double x) { return -q.beta(t) * x + q.beta(t); };
    for (int i = 0; i < n; ++i) {
      const double t = i * h;
      const double m1 = dm(t, m), m2 = dm(t + h / 2, m + h / 2 * m1),
                   m3 = dm(t + h / 2, m + h / 2 * m2), m4 = dm(t + h, m + h * m3);
      const double v1 = dv(t, v), v2 = dv(t + h / 2, v + h / 2 * v1),
                   v3 = dv(t + h / 2, v + h / 2 * v2), v4 = dv(t + h, v + h * v3);
      m += h / 6 * (m1 + 2 * m2 + 2 * m3 + m4);
      v += h / 6 * (v1 + 2 * v2 + 2 * v3 + v4);
    }
    const auto [al, sg] = vp_alpha_sigma(q, 2.0);
    EXPECT_NEAR(al, m, 1e-10);
    EXPECT_NEAR(sg * sg, v, 1e-10);
  }
}

TEST(Schedule, MomentsMatchEulerMaruyamaSimulation) {
  VpSchedule s;
  s.a = 0.0;
  s.b = 1.0;
  s.horizon = 3.0;
  RngStream r(17);
  const int paths = 20000, steps = 400;
  const double h = 2.0 / steps;
  double sum = 0, sum2 = 0;
  for (int p = 0; p < paths; ++p) {
    double x = 1.0;
    for (int k = 0; k < steps; ++k) x += -0.5 * s.beta(k * h) * x * h + std::sqrt(s.beta(k * h) * h) * r.normal();
    sum += x;
    sum2 += x * x;
  }
  const double m = sum / paths, var = sum2 / paths - m * m;
  const auto [alpha, sigma] = vp_alpha_sigma(s, 2.0);
  EXPECT_NEAR(m, alpha, 4 * sigma / std::sqrt(paths) + 2e-3);
  EXPECT_NEAR(var, sigma * sigma, 4 * std::sqrt(2.0 / paths) * sigma * sigma + 2e-3);
}

TEST(ForwardPerturb, IdentityAtZeroAndDeterminism) {
  const Vector x0{0.3, -1.2, 4.0};
  RngStream r(1);
  EXPECT_EQ(forward_perturb(kSched, x0, 0.0, r).x_t, x0);
  RngStream a(9), b(9);
  const auto pa = forward_perturb(kSched, x0, 0.4, a), pb = forward_perturb(kSched, x0, 0.4, b);
  EXPECT_EQ(pa.x_t, pb.x_t);
  EXPECT_EQ(pa.eps, pb.eps);
}

TEST(ForwardPerturb, MomentsWithinThreeStandardErrors) {
  const Vector x0{1.5, -0.5};
  const double t = 0.3;
  const auto [alpha, sigma] = vp_alpha_sigma(kSched, t);
  RngStream r(21);
  const int n = 100000;
  double m0 = 0, m1 = 0, c00 = 0, c11 = 0, c01 = 0;
  for (int i = 0; i < n; ++i) {
    const auto p = forward_perturb(kSched, x0, t, r);
    const double u = p.x_t[0] - alpha * x0[0], v = p.x_t[1] - alpha * x0[1];
    m0 += u, m1 += v, c00 += u * u, c11 += v * v, c01 += u * v;
  }
  const double se_mean = sigma / std::sqrt(n), s2 = sigma * sigma;
  const double se_var = s2 * std::sqrt(2.0 / n), se_cov = s2 / std::sqrt(n);
  EXPECT_NEAR(m0 / n, 0.0, 3 * se_mean);
  EXPECT_NEAR(m1 / n, 0.0, 3 * se_mean);
  EXPECT_NEAR(c00 / n, s2, 3 * se_var);
  EXPECT_NEAR(c11 / n, s2, 3 * se_var);
  EXPECT_NEAR(c01 / n, 0.0, 3 * se_cov);
}

TEST(DsmLoss, PerfectPredictorGivesZero) {
  const Vector c{0.5, -2.0, 1.0};
  const auto model = ScoreModel::point_mass(c);
  std::vector<Vector> batch(50, c);
  RngStream r(4);
  TrainConfig cfg;
  EXPECT_LE(dsm_loss(kSched, model, batch, cfg, r), 1e-18);
}

TEST(DsmLoss, ZeroPredictorGivesWeightedChiSquare) {
  const std::size_t m = 3, n = 20000;
  const auto model = ScoreModel::network(zero_network(m));
  const auto batch = standard_normal_data(n, m, 2);
  RngStream r(5);
  TrainConfig cfg;
  const double plain = dsm_loss(kSched, model, batch, cfg, r);
  EXPECT_NEAR(plain, double(m), 4 * std::sqrt(2.0 * m / n));

  // E[w(t)] for the elbo weighting by Simpson's rule on [t_min, T].
  const int k = 200000;
  const double lo = kSched.t_min, hi = kSched.horizon, h = (hi - lo) / k;
  double integral = 0;
  for (int i = 0; i <= k; ++i) {
    const double w = loss_weight(kSched, Weighting::elbo, lo + i * h);
    integral += w * (i == 0 || i == k ? 1 : (i % 2 ? 4 : 2));
  }
  const double mean_w = integral * h / 3 / (hi - lo);
  std::vector<double> wts;
  RngStream r2(6);
  const auto draws = draw_noise(n, m, lo, hi, r2);
  for (const auto& d : draws) wts.push_back(loss_weight(kSched, Weighting::elbo, d.t) * m);
  const double sd = stats::stddev(wts);
  cfg.weighting = Weighting::elbo;
  RngStream r3(6);
  const double elbo = dsm_loss(kSched, model, batch, cfg, r3);
  EXPECT_NEAR(elbo, mean_w * m, 4 * sd / std::sqrt(double(n)));
}

TEST(DsmLoss, InvariantToBatchOrder) {
  const auto model = ScoreModel::network(tiny_network(2, 4, true, 3));
  const auto batch = standard_normal_data(40, 2, 8);
  RngStream r(10);
  const auto draws = draw_noise(40, 2, kSched.t_min, kSched.horizon, r);
  std::vector<Vector> rb(batch.rbegin(), batch.rend());
  std::vector<NoiseDraw> rd(draws.rbegin(), draws.rend());
  const double a = dsm_loss(kSched, model, batch, draws, Weighting::sigma_squared);
  const double b = dsm_loss(kSched, model, rb, rd, Weighting::sigma_squared);
  EXPECT_NEAR(a, b, 1e-13 * a);
  EXPECT_THROW(dsm_loss(kSched, model, std::vector<Vector>{}, draws, Weighting::elbo), InvalidArgument);
}

TEST(DsmLoss, BackpropMatchesFiniteDifferences) {
  for (bool skip : {false, true}) {
    for (Weighting w : {Weighting::sigma_squared, Weighting::elbo}) {
      NetworkParams net = tiny_network(2, 4, skip, 11);
      const auto batch = standard_normal_data(6, 2, 12);
      RngStream r(13);
      const auto draws = draw_noise(6, 2, 0.05, 1.0, r);
      Vector grad;
      dsm_loss_gradient(kSched, net, batch, draws, w, grad);
      const double h = 1e-6;
      double worst = 0;
      for (std::size_t i = 0; i < grad.size(); ++i) {
        NetworkParams p = net, q = net;
        p.mlp.parameters()[i] += h;
        q.mlp.parameters()[i] -= h;
        const double fd = (dsm_loss(kSched, ScoreModel::network(p), batch, draws, w) -
                           dsm_loss(kSched, ScoreModel::network(q), batch, draws, w)) /
                          (2 * h);
        worst = std::max(worst, std::abs(fd - grad[i]) / std::max(std::abs(fd), 1e-3));
      }
      EXPECT_LE(worst, 1e-4) << "skip=" << skip << " weighting=" << to_string(w);
    }
  }
}

TEST(Train, StandardNormalScoreError) {
  const auto data = standard_normal_data(5000, 1, 1);
  const auto model = train(kSched, data, TrainConfig{});
  const auto oracle = ScoreModel::gaussian({0.0}, Matrix{{1.0}});
  const auto probe = standard_normal_data(2000, 1, 7);
  RngStream r(3);
  EXPECT_LE(score_matching_error(model, oracle, kSched, probe, 1, r), 0.15);
}

TEST(Train, SinglePointMatchesConditionalNoise) {
  const Vector c{0.7, -0.4};
  std::vector<Vector> data(10, c);
  const auto model = train(kSched, data, TrainConfig{});
  const auto& rec = *model.network_params()->training;
  EXPECT_LE(rec.final_window_loss, 0.5 * rec.initial_window_loss);
  double num = 0, den = 0;
  for (double t : {0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    const auto [alpha, sigma] = vp_alpha_sigma(kSched, t);
    for (double u : {-1.5, -0.5, 0.5, 1.5})
      for (double v : {-1.5, -0.5, 0.5, 1.5}) {
        const Vector x{alpha * c[0] + sigma * u, alpha * c[1] + sigma * v};
        const Vector e = model.predict_noise(kSched, t, x);
        num += (e[0] - u) * (e[0] - u) + (e[1] - v) * (e[1] - v);
        den += u * u + v * v;
      }
  }
  EXPECT_LE(std::sqrt(num / den), 0.10);
}

TEST(Train, SeededRunsAreBitReproducible) {
  const auto data = standard_normal_data(100, 2, 4);
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.hidden = {16, 16};
  const auto a = train(kSched, data, cfg), b = train(kSched, data, cfg);
  EXPECT_EQ(a.network_params()->mlp.parameters(), b.network_params()->mlp.parameters());
  EXPECT_EQ(a.network_params()->training->loss_history, b.network_params()->training->loss_history);
}

TEST(Train, DivergenceReportsStep) {
  std::vector<Vector> data(4, Vector{1e300});
  TrainConfig cfg;
  cfg.steps = 5;
  try {
    train(kSched, data, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.step(), 0u);
  }
  EXPECT_THROW(train(kSched, std::vector<Vector>{}, cfg), InvalidArgument);
  EXPECT_THROW(train(kSched, std::vector<Vector>{{1.0}, {1.0, 2.0}}, cfg), InvalidArgument);
}

TEST(AnalyticScore, ClosedForms) {
  const auto std_normal = ScoreModel::gaussian({0.0, 0.0}, Matrix::identity(2));
  for (double t : {0.01, 0.5, 1.0}) {
    const Vector x{0.7, -1.3};
    const Vector s = analytic_score(std_normal, kSched, t, x);
    EXPECT_NEAR(s[0], -0.7, 1e-14);
    EXPECT_NEAR(s[1], 1.3, 1e-14);
    const Vector c{2.0, 1.0};
    const auto [alpha, sigma] = vp_alpha_sigma(kSched, t);
    const Vector p = analytic_score(ScoreModel::point_mass(c), kSched, t, x);
    for (int i = 0; i < 2; ++i)
      EXPECT_NEAR(p[i], -(x[i] - alpha * c[i]) / (sigma * sigma), 1e-12 * std::abs(p[i]));
  }
  EXPECT_THROW(ScoreModel::gaussian({0.0, 0.0}, Matrix{{1, 1}, {1, 1}}), InvalidArgument);
  EXPECT_THROW(analytic_score(ScoreModel::network(zero_network(1)), kSched, 0.5, Vector{0.0}),
               InvalidArgument);
}

TEST(AnalyticScore, MixtureMatchesLogDensityDifferences) {
  const auto mix = ScoreModel::spike_mixture({{1.0, 0.0, -1.0}, {-0.5, 2.0, 0.0}, {0.0, 0.0, 0.5}},
                                             {0.2, 0.5, 0.3}, 0.3);
  const auto gauss = ScoreModel::gaussian({0.5, -1.0}, Matrix{{2.0, 0.3}, {0.3, 0.5}});
  RngStream r(31);
  for (const auto* m : {&mix, &gauss}) {
    for (int trial = 0; trial < 20; ++trial) {
      const double t = r.uniform(0.05, 1.0);
      Vector x(m->dim());
      for (double& v : x) v = r.normal();
      const Vector s = analytic_score(*m, kSched, t, x);
      const double h = 1e-5;
      for (std::size_t i = 0; i < x.size(); ++i) {
        Vector xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (analytic_log_density(*m, kSched, t, xp) -
                           analytic_log_density(*m, kSched, t, xm)) /
                          (2 * h);
        EXPECT_NEAR(s[i], fd, 1e-5);
      }
    }
  }
}

TEST(ScoreModel, NoiseScoreDuality) {
  const auto net = ScoreModel::network(tiny_network(3, 4, true, 5));
  const auto gauss = ScoreModel::gaussian({0.5, -1.0, 0.0}, Matrix::identity(3));
  const Vector x{0.2, 0.4, -0.9};
  for (double t : {0.002, 0.3, 1.0}) {
    const double sigma = vp_alpha_sigma(kSched, t).sigma;
    const Vector e = net.predict_noise(kSched, t, x), s = net.score(kSched, t, x);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(s[i], -e[i] / sigma);
    const Vector eg = gauss.predict_noise(kSched, t, x), sg = gauss.score(kSched, t, x);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(sg[i], -eg[i] / sigma, 4e-16 * std::abs(sg[i]));
  }
}

TEST(Samplers, GridShape) {
  for (GridKind g : {GridKind::uniform, GridKind::exponential}) {
    const Vector t = time_grid(kSched, 37, g);
    ASSERT_EQ(t.size(), 38u);
    EXPECT_EQ(t.front(), kSched.horizon);
    EXPECT_EQ(t.back(), kSched.t_min);
    for (std::size_t i = 1; i < t.size(); ++i) EXPECT_LT(t[i], t[i - 1]);
  }
  EXPECT_THROW(time_grid(kSched, 0, GridKind::uniform), InvalidArgument);
}

TEST(Samplers, StandardNormalMoments) {
  const auto model = ScoreModel::gaussian({0.0, 0.0}, Matrix::identity(2));
  for (SamplerKind kind : {SamplerKind::stochastic, SamplerKind::deterministic}) {
    SamplerConfig cfg;
    cfg.kind = kind;
    cfg.steps = kind == SamplerKind::stochastic ? 1000 : 256;
    cfg.seed = 3;
    const auto xs = sample(model, kSched, cfg, 10000);
    double m0 = 0, m1 = 0, c00 = 0, c11 = 0, c01 = 0;
    for (const auto& x : xs) m0 += x[0], m1 += x[1];
    m0 /= xs.size(), m1 /= xs.size();
    for (const auto& x : xs)
      c00 += (x[0] - m0) * (x[0] - m0), c11 += (x[1] - m1) * (x[1] - m1),
          c01 += (x[0] - m0) * (x[1] - m1);
    const double n1 = xs.size() - 1.0;
    const double tol = kind == SamplerKind::stochastic ? 0.05 : 0.02;
    EXPECT_LE(std::hypot(m0, m1), 0.05);
    EXPECT_NEAR(c00 / n1, 1.0, tol);
    EXPECT_NEAR(c11 / n1, 1.0, tol);
    EXPECT_NEAR(c01 / n1, 0.0, tol);
  }
}

TEST(Samplers, SingleStepIsFinite) {
  const auto model = ScoreModel::gaussian({1.0}, Matrix{{0.25}});
  SamplerConfig cfg;
  cfg.steps = 1;
  for (SamplerKind kind : {SamplerKind::stochastic, SamplerKind::deterministic}) {
    cfg.kind = kind;
    for (const auto& x : sample(model, kSched, cfg, 100)) EXPECT_TRUE(all_finite(x));
  }
}

TEST(Samplers, StochasticErrorDecreasesWithSteps) {
  const auto model = ScoreModel::gaussian({1.0}, Matrix{{0.25}});
  double prev = 1e300;
  for (std::size_t k : {16, 64, 256, 1024}) {
    SamplerConfig cfg;
    cfg.steps = k;
    cfg.seed = 5;
    const auto xs = sample_stochastic(model, kSched, cfg, 100000);
    Vector v;
    for (const auto& x : xs) v.push_back(x[0]);
    const double w = stats::w2_to_normal(v, 1.0, 0.5);
    EXPECT_LT(w, prev) << "k'=" << k;
    prev = w;
  }
}

TEST(Samplers, DeterministicIsSeededAndContractsOntoPoint) {
  const Vector c{1.0, -2.0};
  const auto model = ScoreModel::point_mass(c);
  SamplerConfig cfg;
  cfg.kind = SamplerKind::deterministic;
  cfg.steps = 1000;
  cfg.seed = 8;
  const auto a = sample(model, kSched, cfg, 2000), b = sample(model, kSched, cfg, 2000);
  EXPECT_EQ(a, b);
  const auto [alpha, sigma] = vp_alpha_sigma(kSched, kSched.t_min);
  double spread = 0;
  for (const auto& x : a)
    for (int i = 0; i < 2; ++i) spread += (x[i] - alpha * c[i]) * (x[i] - alpha * c[i]);
  spread = std::sqrt(spread / (2.0 * a.size()));
  EXPECT_LE(spread, 1.5 * sigma);
}

TEST(ScoreMatchingError, OracleIdentityAndZeroModel) {
  const std::size_t m = 4;
  const auto oracle = ScoreModel::gaussian(Vector(m, 0.0), Matrix::identity(m));
  const auto probe = standard_normal_data(5000, m, 19);
  RngStream r(1);
  EXPECT_EQ(score_matching_error(oracle, oracle, kSched, probe, 1, r), 0.0);
  const auto zero = ScoreModel::network(zero_network(m));
  const double e = score_matching_error(zero, oracle, kSched, probe, 1, r);
  EXPECT_NEAR(e, 2.0, 4 * std::sqrt(2.0 * m / 5000.0) / (2 * 2.0));
}

TEST(Persistence, NetworkRoundTripIsBitExact) {
  const auto data = standard_normal_data(50, 3, 4);
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.hidden = {8};
  const auto model = train(kSched, data, cfg);
  const std::string path = temp_path("model.bin");
  save_model(path, model, kSched);
  const auto back = load_model(path);
  EXPECT_EQ(back.model.network_params()->mlp.parameters(), model.network_params()->mlp.parameters());
  EXPECT_EQ(back.model.network_params()->mlp.widths(), model.network_params()->mlp.widths());
  EXPECT_EQ(back.schedule.a, kSched.a);
  EXPECT_EQ(back.model.network_params()->training->final_window_loss,
            model.network_params()->training->final_window_loss);
  // Truncate the blob.
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 8);
  EXPECT_THROW(load_model(path), IoError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_model(path), IoError);
}

TEST(Persistence, AnalyticRoundTripAndBadHeaders) {
  const std::string path = temp_path("analytic.json");
  const auto mix = ScoreModel::spike_mixture({{0.1, 0.2}, {1.0 / 3.0, -7.0}}, {1.0, 2.0}, 0.25);
  save_model(path, mix, kSched);
  const auto back = load_model(path);
  EXPECT_EQ(back.model.spike_params()->centers, mix.spike_params()->centers);
  EXPECT_EQ(back.model.spike_params()->weights, mix.spike_params()->weights);
  const auto g = ScoreModel::gaussian({0.5, 1.0 / 7.0}, Matrix{{2.0, 0.1}, {0.1, 1.0 / 3.0}});
  save_model(path, g, kSched);
  EXPECT_EQ(load_model(path).model.gaussian_params()->cov, g.gaussian_params()->cov);
  {
    std::ofstream os(path);
    os << R"({"format":"csdm-score-model","version":1,"kind":"analytic-gaussian","dim":1,)"
       << R"("schedule":{},"mean":[0],"cov":[1],"extra":1})" << '\n';
  }
  try {
    load_model(path);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "extra");
  }
  std::filesystem::remove(path);
}

TEST(Config, StrictParsingWithPaths) {
  const auto t = train_config_from_json(nlohmann::json::object());
  EXPECT_EQ(t.steps, TrainConfig{}.steps);
  EXPECT_EQ(train_config_from_json(train_config_to_json(t)).hidden, t.hidden);
  try {
    train_config_from_json({{"stepz", 3}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "train.stepz");
  }
  try {
    sampler_config_from_json({{"kind", "leapfrog"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "sampler.kind");
  }
  EXPECT_THROW(train_config_from_json({{"steps", -4}}), ConfigError);
  EXPECT_THROW(schedule_from_json({{"t_min", 2.0}}), ConfigError);
}

TEST(Samples, CsvOneRowPerSample) {
  const std::vector<Vector> s{{1.0, 0.1}, {-2.5, 1.0 / 3.0}};
  const std::string csv = samples_to_csv(s);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_NE(csv.find("0.33333333333333331"), std::string::npos);
}
