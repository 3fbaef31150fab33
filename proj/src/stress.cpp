#include "csdm/stress.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <regex>
#include <sstream>

#include "csdm/error.hpp"
#include "csdm/log.hpp"
#include "csdm/parallel.hpp"
#include "csdm/rng.hpp"
#include "csdm/stats.hpp"

namespace csdm::stress {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

bool is_missing(const std::string& cell) {
  std::string lower;
  for (unsigned char c : cell) lower.push_back(static_cast<char>(std::tolower(c)));
  return lower.empty() || lower == "na" || lower == "nan" || lower == "null";
}

void check_dim(std::size_t got, std::size_t want, const char* what) {
  if (got != want)
    throw InvalidArgument(std::string(what) + ": expected dimension " + std::to_string(want) +
                          ", got " + std::to_string(got));
}

}  // namespace

// ---------------------------------------------------------------- panels

void FactorPanel::validate() const {
  if (names.size() != values.cols())
    throw InvalidArgument("panel: " + std::to_string(names.size()) + " names for " +
                          std::to_string(values.cols()) + " columns");
  if (times.size() != values.rows()) throw InvalidArgument("panel: time stamps do not match rows");
  if (!values.all_finite()) throw InvalidArgument("panel: non-finite values");
}

PanelLoad parse_panel_csv(const std::string& text) {
  static const std::regex iso_date(R"(^\d{4}-\d{2}-\d{2}([T ][0-9:.]+(Z|[+-]\d{2}:?\d{2})?)?$)");
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    while (std::getline(is, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!trim(line).empty()) return true;
    }
    return false;
  };
  if (!next_line()) throw IoError("panel csv: empty input");
  auto header = split_csv_line(line);
  for (auto& h : header) h = trim(h);
  if (header.empty() || header.front() != "date")
    throw IoError("panel csv: first column must be 'date'");
  if (header.size() < 2) throw IoError("panel csv: no value columns");

  PanelLoad out;
  out.panel.names.assign(header.begin() + 1, header.end());
  const std::size_t w = out.panel.names.size();
  std::vector<double> cells;
  std::vector<char> missing;
  while (next_line()) {
    auto row = split_csv_line(line);
    if (row.size() != w + 1)
      throw IoError("panel csv: line " + std::to_string(line_no) + " has " +
                    std::to_string(row.size()) + " cells, expected " + std::to_string(w + 1));
    const std::string date = trim(row[0]);
    if (!std::regex_match(date, iso_date))
      throw IoError("panel csv: line " + std::to_string(line_no) + ": bad date '" + date + "'");
    if (!out.panel.times.empty() && date <= out.panel.times.back())
      throw IoError("panel csv: line " + std::to_string(line_no) + ": dates must increase");
    out.panel.times.push_back(date);
    for (std::size_t j = 0; j < w; ++j) {
      const std::string cell = trim(row[j + 1]);
      if (is_missing(cell)) {
        cells.push_back(0.0);
        missing.push_back(1);
        continue;
      }
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end != cell.c_str() + cell.size() || !std::isfinite(v))
        throw IoError("panel csv: line " + std::to_string(line_no) + ", column '" +
                      out.panel.names[j] + "': not a number '" + cell + "'");
      cells.push_back(v);
      missing.push_back(0);
    }
  }
  const std::size_t t_count = out.panel.times.size();
  if (t_count == 0) throw IoError("panel csv: no data rows");
  out.imputed.assign(w, 0);
  for (std::size_t j = 0; j < w; ++j) {
    double sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t t = 0; t < t_count; ++t)
      if (!missing[t * w + j]) sum += cells[t * w + j], ++seen;
    if (seen == 0) throw IoError("panel csv: column '" + out.panel.names[j] + "' has no values");
    const double col_mean = sum / static_cast<double>(seen);
    bool have_last = false;
    double last = 0.0;
    for (std::size_t t = 0; t < t_count; ++t) {
      const std::size_t at = t * w + j;
      if (!missing[at]) {
        last = cells[at];
        have_last = true;
        continue;
      }
      cells[at] = have_last ? last : col_mean;
      ++out.imputed[j];
    }
  }
  out.panel.values = Matrix(t_count, w, std::move(cells));
  return out;
}

PanelLoad load_panel_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_panel_csv(ss.str());
}

std::string panel_to_csv(const FactorPanel& p) {
  p.validate();
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "date";
  for (const auto& n : p.names) os << ',' << n;
  os << '\n';
  for (std::size_t t = 0; t < p.periods(); ++t) {
    os << p.times[t];
    for (std::size_t j = 0; j < p.width(); ++j) os << ',' << p.values(t, j);
    os << '\n';
  }
  return os.str();
}

FactorPanel slice_rows(const FactorPanel& p, std::size_t begin, std::size_t end) {
  if (begin > end || end > p.periods()) throw InvalidArgument("slice_rows: bad range");
  FactorPanel out;
  out.names = p.names;
  out.times.assign(p.times.begin() + begin, p.times.begin() + end);
  out.values = Matrix(end - begin, p.width());
  for (std::size_t t = begin; t < end; ++t)
    std::copy(p.values.row(t).begin(), p.values.row(t).end(), out.values.row(t - begin).begin());
  return out;
}

// ---------------------------------------------------------------- scaling, pca

Vector Standardizer::apply(std::span<const double> x) const {
  check_dim(x.size(), mean.size(), "Standardizer::apply");
  Vector z(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) z[j] = (x[j] - mean[j]) / scale[j];
  return z;
}

Vector Standardizer::invert(std::span<const double> z) const {
  check_dim(z.size(), mean.size(), "Standardizer::invert");
  Vector x(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) x[j] = mean[j] + scale[j] * z[j];
  return x;
}

Standardizer fit_standardizer(const Matrix& rows) {
  if (rows.rows() < 2) throw InvalidArgument("fit_standardizer: need at least two rows");
  Standardizer s;
  s.mean.assign(rows.cols(), 0.0);
  s.scale.assign(rows.cols(), 1.0);
  for (std::size_t j = 0; j < rows.cols(); ++j) {
    const Vector col = rows.column(j);
    s.mean[j] = stats::mean(col);
    const double sd = stats::stddev(col);
    if (sd > 0.0) s.scale[j] = sd;
  }
  return s;
}

Matrix standardize_rows(const Standardizer& s, const Matrix& rows) {
  Matrix out(rows.rows(), rows.cols());
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    const Vector z = s.apply(rows.row(i));
    std::copy(z.begin(), z.end(), out.row(i).begin());
  }
  return out;
}

Matrix sample_covariance(const Matrix& rows) {
  const std::size_t n = rows.rows(), d = rows.cols();
  if (n < 2) throw InvalidArgument("sample_covariance: need at least two rows");
  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) axpy(1.0, rows.row(i), mean);
  for (double& v : mean) v /= static_cast<double>(n);
  Matrix cov(d, d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double da = rows(i, a) - mean[a];
      for (std::size_t b = a; b < d; ++b) cov(a, b) += da * (rows(i, b) - mean[b]);
    }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) /= static_cast<double>(n - 1);
      cov(b, a) = cov(a, b);
    }
  return cov;
}

PcaModel pca_fit(const Matrix& rows, std::size_t k) {
  const std::size_t n = rows.rows(), d = rows.cols();
  if (k == 0 || k > std::min(n, d))
    throw InvalidArgument("pca_fit: k = " + std::to_string(k) + " must lie in [1, min(rows, cols)]");
  PcaModel m;
  m.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) axpy(1.0, rows.row(i), m.mean);
  for (double& v : m.mean) v /= static_cast<double>(n);
  const Matrix cov = sample_covariance(rows);
  const auto eig = symmetric_eigen(cov);
  double total = 0.0;
  for (std::size_t j = 0; j < d; ++j) total += cov(j, j);
  if (!(total > 0.0)) throw InvalidArgument("pca_fit: data has zero variance");
  m.total_variance = total;
  std::size_t kept = 0;
  std::vector<std::size_t> order;
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t col = d - 1 - r;  // eigenvalues ascend
    if (eig.values[col] <= 1e-12 * total) break;
    order.push_back(col);
    ++kept;
  }
  if (kept < k)
    log::warn("pca_fit: covariance has rank " + std::to_string(kept) + "; keeping " +
              std::to_string(kept) + " of " + std::to_string(k) + " components");
  if (kept == 0) throw InvalidArgument("pca_fit: degenerate covariance");
  m.components = Matrix(kept, d);
  m.explained.assign(kept, 0.0);
  for (std::size_t r = 0; r < kept; ++r) {
    const std::size_t col = order[r];
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(eig.vectors(j, col)) > std::abs(eig.vectors(arg, col)) + 1e-12) arg = j;
    const double sign = eig.vectors(arg, col) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) m.components(r, j) = sign * eig.vectors(j, col);
    m.explained[r] = std::clamp(eig.values[col] / total, 0.0, 1.0);
  }
  return m;
}

Vector pca_encode(const PcaModel& model, std::span<const double> x) {
  check_dim(x.size(), model.dim(), "pca_encode");
  return matvec(model.components, sub(x, model.mean));
}

Vector pca_decode(const PcaModel& model, std::span<const double> z) {
  check_dim(z.size(), model.k(), "pca_decode");
  return add(model.mean, matvec_t(model.components, z));
}

double cumulative_explained(const PcaModel& model) {
  return std::accumulate(model.explained.begin(), model.explained.end(), 0.0);
}

// ---------------------------------------------------------------- ssa

Vector ssa_stress(std::span<const double> x_t, const Scenario& scenario) {
  if (scenario.indices.size() != scenario.levels.size())
    throw InvalidArgument("ssa_stress: " + std::to_string(scenario.indices.size()) +
                          " indices but " + std::to_string(scenario.levels.size()) + " levels");
  Vector out(x_t.begin(), x_t.end());
  std::vector<char> seen(x_t.size(), 0);
  for (std::size_t i = 0; i < scenario.indices.size(); ++i) {
    const std::size_t j = scenario.indices[i];
    if (j >= x_t.size())
      throw InvalidArgument("ssa_stress: factor index " + std::to_string(j) + " out of range");
    if (seen[j]) throw InvalidArgument("ssa_stress: factor index " + std::to_string(j) + " repeated");
    seen[j] = 1;
    out[j] = scenario.levels[i];
  }
  return out;
}

// ---------------------------------------------------------------- predictors

std::string to_string(PredictorKind k) {
  return k == PredictorKind::linear_regression ? "linear-regression" : "trained-network";
}

PredictorKind predictor_kind_from_string(const std::string& s) {
  if (s == "linear-regression") return PredictorKind::linear_regression;
  if (s == "trained-network") return PredictorKind::trained_network;
  throw InvalidArgument("unknown predictor kind '" + s + "'");
}

Vector InputTransform::apply(std::span<const double> x) const {
  Vector z(x.begin(), x.end());
  if (standardizer) z = standardizer->apply(z);
  if (pca) z = pca_encode(*pca, z);
  return z;
}

std::size_t InputTransform::input_dim(std::size_t fallback) const {
  if (standardizer) return standardizer->mean.size();
  if (pca) return pca->dim();
  return fallback;
}

std::size_t InputTransform::output_dim(std::size_t fallback) const {
  return pca ? pca->k() : input_dim(fallback);
}

namespace {

Matrix transformed_rows(const InputTransform& tr, const Matrix& factors) {
  const std::size_t out_dim = tr.output_dim(factors.cols());
  Matrix z(factors.rows(), out_dim);
  for (std::size_t i = 0; i < factors.rows(); ++i) {
    const Vector v = tr.apply(factors.row(i));
    std::copy(v.begin(), v.end(), z.row(i).begin());
  }
  return z;
}

void check_fit_shapes(const Matrix& factors, const Matrix& returns) {
  if (factors.rows() != returns.rows())
    throw InvalidArgument("predictor fit: factor and return rows differ");
  if (factors.rows() < 2 || returns.cols() == 0) throw InvalidArgument("predictor fit: empty data");
}

}  // namespace

Predictor fit_linear_predictor(const Matrix& factors, const Matrix& returns, InputTransform transform) {
  check_fit_shapes(factors, returns);
  Predictor p;
  p.kind = PredictorKind::linear_regression;
  p.input_dim = factors.cols();
  p.output_dim = returns.cols();
  const Matrix z = transformed_rows(transform, factors);
  const std::size_t f = z.cols();
  Matrix design(z.rows(), f + 1);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    std::copy(z.row(i).begin(), z.row(i).end(), design.row(i).begin());
    design(i, f) = 1.0;
  }
  p.coef = Matrix(returns.cols(), f);
  p.intercept.assign(returns.cols(), 0.0);
  for (std::size_t a = 0; a < returns.cols(); ++a) {
    const auto ls = least_squares(design, returns.column(a));
    if (ls.rank_deficient) log::warn("fit_linear_predictor: rank-deficient design");
    for (std::size_t j = 0; j < f; ++j) p.coef(a, j) = ls.x[j];
    p.intercept[a] = ls.x[f];
  }
  p.transform = std::move(transform);
  return p;
}

Predictor fit_network_predictor(const Matrix& factors, const Matrix& returns, InputTransform transform,
                                const NetworkFitOptions& opts) {
  check_fit_shapes(factors, returns);
  if (opts.steps == 0 || opts.batch_size == 0 || !(opts.learning_rate > 0.0))
    throw InvalidArgument("fit_network_predictor: steps, batch size and rate must be positive");
  Predictor p;
  p.kind = PredictorKind::trained_network;
  p.input_dim = factors.cols();
  p.output_dim = returns.cols();
  const Matrix z = transformed_rows(transform, factors);
  const auto ts = fit_standardizer(returns);
  p.target_mean = ts.mean;
  p.target_scale = ts.scale;
  const Matrix targets = standardize_rows(ts, returns);

  std::vector<std::size_t> widths{z.cols()};
  widths.insert(widths.end(), opts.hidden.begin(), opts.hidden.end());
  widths.push_back(returns.cols());
  const RngStream root(opts.seed);
  nn::Mlp net(widths, root.split(0).next_u64());
  RngStream rng = root.split(1);
  nn::Adam adam(net.parameter_count());
  Matrix xb(opts.batch_size, z.cols()), yb(opts.batch_size, returns.cols());
  Vector grad;
  for (std::size_t step = 0; step < opts.steps; ++step) {
    for (std::size_t b = 0; b < opts.batch_size; ++b) {
      const auto i = static_cast<std::size_t>(rng.below(z.rows()));
      std::copy(z.row(i).begin(), z.row(i).end(), xb.row(b).begin());
      std::copy(targets.row(i).begin(), targets.row(i).end(), yb.row(b).begin());
    }
    nn::Mlp::Tape tape;
    Matrix out = net.forward(xb, tape);
    const double scale = 2.0 / static_cast<double>(out.entries().size());
    double loss = 0.0;
    for (std::size_t e = 0; e < out.entries().size(); ++e) {
      const double r = out.entries()[e] - yb.entries()[e];
      loss += r * r;
      out.entries()[e] = scale * r;
    }
    if (!std::isfinite(loss)) throw NumericalError("fit_network_predictor: loss diverged", step);
    grad.assign(net.parameter_count(), 0.0);
    net.backward(tape, out, grad);
    const double lr = opts.learning_rate * 0.5 *
                      (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(opts.steps)));
    adam.step(net.parameters(), grad, lr);
  }
  p.network = std::move(net);
  p.transform = std::move(transform);
  return p;
}

Vector predict_returns(const Predictor& p, std::span<const double> x) {
  check_dim(x.size(), p.input_dim, "predict_returns");
  const Vector z = p.transform.apply(x);
  if (p.kind == PredictorKind::linear_regression) {
    Vector y = matvec(p.coef, z);
    for (std::size_t a = 0; a < y.size(); ++a) y[a] += p.intercept[a];
    return y;
  }
  Matrix in(1, z.size(), z);
  const Matrix out = p.network.forward(in);
  Vector y(p.output_dim);
  for (std::size_t a = 0; a < y.size(); ++a) y[a] = p.target_mean[a] + p.target_scale[a] * out(0, a);
  return y;
}

double r_squared(const Predictor& p, const Matrix& factors, const Matrix& returns) {
  check_fit_shapes(factors, returns);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t a = 0; a < returns.cols(); ++a) {
    const double mu = stats::mean(returns.column(a));
    for (std::size_t i = 0; i < returns.rows(); ++i) ss_tot += (returns(i, a) - mu) * (returns(i, a) - mu);
  }
  for (std::size_t i = 0; i < returns.rows(); ++i) {
    const Vector y = predict_returns(p, factors.row(i));
    for (std::size_t a = 0; a < y.size(); ++a) ss_res += (returns(i, a) - y[a]) * (returns(i, a) - y[a]);
  }
  return 1.0 - ss_res / ss_tot;
}

// ---------------------------------------------------------------- portfolios

std::string to_string(WeightKind k) {
  switch (k) {
    case WeightKind::equal: return "equal";
    case WeightKind::gmvp_long_only: return "gmvp-long-only";
    case WeightKind::risk_parity: return "risk-parity";
  }
  return "?";
}

WeightKind weight_kind_from_string(const std::string& s) {
  if (s == "equal") return WeightKind::equal;
  if (s == "gmvp-long-only") return WeightKind::gmvp_long_only;
  if (s == "risk-parity") return WeightKind::risk_parity;
  throw InvalidArgument("unknown portfolio kind '" + s + "'");
}

namespace {

void check_covariance(const Matrix& cov) {
  if (cov.rows() == 0 || cov.rows() != cov.cols())
    throw InvalidArgument("portfolio_weights: covariance must be square and nonempty");
  if (!cov.all_finite()) throw InvalidArgument("portfolio_weights: non-finite covariance");
  double scale = 0.0;
  for (double v : cov.entries()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < cov.rows(); ++i)
    for (std::size_t j = i + 1; j < cov.cols(); ++j)
      if (std::abs(cov(i, j) - cov(j, i)) > 1e-12 * scale)
        throw InvalidArgument("portfolio_weights: covariance is not symmetric");
}

// Euclidean projection onto {w >= 0, sum w = 1}.
Vector project_simplex(Vector v) {
  Vector u = v;
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0, theta = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    cum += u[i];
    const double t = (cum - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) theta = t;
  }
  for (double& x : v) x = std::max(0.0, x - theta);
  return v;
}

// Minimum-variance weights on the support of w with the others fixed at 0,
// or nullopt when that equality-constrained solution leaves the simplex.
std::optional<Vector> polish_on_support(const Matrix& cov, const Vector& w) {
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] > 0.0) support.push_back(i);
  Matrix sub(support.size(), support.size());
  for (std::size_t a = 0; a < support.size(); ++a)
    for (std::size_t b = 0; b < support.size(); ++b) sub(a, b) = cov(support[a], support[b]);
  Vector v;
  try {
    v = cholesky_solve(cholesky(sub), Vector(support.size(), 1.0));
  } catch (const NumericalError&) {
    return std::nullopt;
  }
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  if (!(total > 0.0)) return std::nullopt;
  Vector out(w.size(), 0.0);
  for (std::size_t a = 0; a < support.size(); ++a) {
    out[support[a]] = v[a] / total;
    if (!(out[support[a]] > 0.0)) return std::nullopt;
  }
  return out;
}

PortfolioWeights gmvp_long_only(const Matrix& cov_in, const WeightOptions& opts) {
  PortfolioWeights pw;
  pw.kind = WeightKind::gmvp_long_only;
  const std::size_t n = cov_in.rows();
  Matrix cov = cov_in;
  const auto [lo, hi] = symmetric_extreme_eigenvalues(cov);
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += cov(i, i);
  if (lo < -1e-10 * std::max(trace, 1e-300))
    throw InvalidArgument("portfolio_weights: covariance is not positive semidefinite");
  if (lo <= 1e-12 * trace / static_cast<double>(n)) {
    const double ridge = 1e-8 * trace / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) cov(i, i) += ridge;
    pw.ridge_applied = true;
    log::warn("gmvp: singular covariance, ridge " + std::to_string(ridge) + " added");
  }
  const double step = 1.0 / (2.0 * (hi + (pw.ridge_applied ? 1e-8 * trace / n : 0.0)));
  Vector w(n, 1.0 / static_cast<double>(n)), y = w, w_prev = w;
  double t = 1.0;
  for (std::size_t it = 0; it < opts.max_iter; ++it) {
    const Vector g = matvec(cov, y);
    Vector trial = y;
    axpy(-2.0 * step, g, trial);
    w_prev = w;
    w = project_simplex(std::move(trial));
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = w;
    axpy((t - 1.0) / t_next, sub(w, w_prev), y);
    t = t_next;
    if (it % 25 == 24) {
      if (auto p = polish_on_support(cov, w); p && gmvp_kkt_residual(cov, *p) <= opts.kkt_tol) {
        w = *p;
        break;
      }
    }
  }
  pw.w = w;
  pw.kkt_residual = gmvp_kkt_residual(cov, w);
  if (pw.kkt_residual > opts.kkt_tol)
    log::warn("gmvp: KKT residual " + std::to_string(pw.kkt_residual) + " above tolerance");
  return pw;
}

PortfolioWeights risk_parity(const Matrix& cov, const WeightOptions& opts) {
  const std::size_t n = cov.rows();
  for (std::size_t i = 0; i < n; ++i)
    if (!(cov(i, i) > 0.0)) throw InvalidArgument("risk parity: asset with zero variance");
  const double budget = 1.0 / static_cast<double>(n);
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = 1.0 / std::sqrt(cov(i, i));
  PortfolioWeights pw;
  pw.kind = WeightKind::risk_parity;
  for (std::size_t sweep = 0; sweep < opts.max_iter; ++sweep) {
    for (std::size_t i = 0; i < n; ++i) {
      double c = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) c += cov(i, j) * y[j];
      y[i] = (-c + std::sqrt(c * c + 4.0 * cov(i, i) * budget)) / (2.0 * cov(i, i));
    }
    const Vector rc = risk_contributions(cov, y);
    const double mean_rc = std::accumulate(rc.begin(), rc.end(), 0.0) / static_cast<double>(n);
    double worst = 0.0;
    for (double r : rc) worst = std::max(worst, std::abs(r / mean_rc - 1.0));
    if (worst <= opts.risk_parity_tol) break;
    if (sweep + 1 == opts.max_iter)
      throw NumericalError("risk parity: no convergence", sweep, worst);
  }
  const double total = std::accumulate(y.begin(), y.end(), 0.0);
  pw.w = scaled(y, 1.0 / total);
  return pw;
}

}  // namespace

double gmvp_kkt_residual(const Matrix& cov, std::span<const double> w) {
  // Stationarity of w^T cov w with multiplier nu for sum w = 1 and mu >= 0
  // for w >= 0, relative to the gradient scale 2 w^T cov w.
  const Vector g = scaled(matvec(cov, w), 2.0);
  const double nu = dot(w, g);
  const double ref = std::max(std::abs(nu), 1e-300);
  double r = std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    r = std::max(r, std::max(0.0, -w[i]));
    if (w[i] > 0.0) r = std::max(r, std::abs(g[i] - nu) / ref);
    r = std::max(r, std::max(0.0, nu - g[i]) / ref);
  }
  return r;
}

Vector risk_contributions(const Matrix& cov, std::span<const double> w) {
  const Vector s = matvec(cov, w);
  Vector rc(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) rc[i] = w[i] * s[i];
  return rc;
}

PortfolioWeights portfolio_weights(WeightKind kind, const Matrix& cov, const WeightOptions& opts) {
  check_covariance(cov);
  switch (kind) {
    case WeightKind::equal: {
      PortfolioWeights pw;
      pw.kind = kind;
      pw.w.assign(cov.rows(), 1.0 / static_cast<double>(cov.rows()));
      return pw;
    }
    case WeightKind::gmvp_long_only: return gmvp_long_only(cov, opts);
    case WeightKind::risk_parity: return risk_parity(cov, opts);
  }
  throw InvalidArgument("portfolio_weights: unknown kind");
}

double portfolio_return(const PortfolioWeights& w, std::span<const double> y) {
  check_dim(y.size(), w.w.size(), "portfolio_return");
  return dot(w.w, y);
}

QuantileStats quantile_stats(std::span<const double> returns, std::span<const double> levels) {
  if (returns.empty()) throw InvalidArgument("quantile_stats: empty input");
  for (double a : levels)
    if (!(a >= 0.0 && a <= 1.0)) throw InvalidArgument("quantile_stats: level outside [0, 1]");
  Vector sorted(returns.begin(), returns.end());
  std::sort(sorted.begin(), sorted.end());
  QuantileStats q;
  q.mean = stats::mean(sorted);
  q.median = stats::quantile_sorted(sorted, 0.5);
  q.std = sorted.size() > 1 ? stats::stddev(sorted) : 0.0;
  q.levels.assign(levels.begin(), levels.end());
  for (double a : levels) {
    q.quantiles.push_back(stats::quantile_sorted(sorted, a));
    q.var.push_back(-q.quantiles.back());
  }
  return q;
}

// ---------------------------------------------------------------- backtest

namespace {

Matrix window_covariance(const ReturnPanel& returns, std::size_t end, std::size_t window,
                         std::size_t horizon) {
  const std::size_t blocks = window / horizon;
  if (blocks < 2) throw InvalidArgument("backtest: window holds fewer than two return blocks");
  Matrix rows(blocks, returns.width(), 0.0);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t h = 0; h < horizon; ++h) {
      const std::size_t t = end - (b + 1) * horizon + h;
      axpy(1.0, returns.values.row(t), rows.row(blocks - 1 - b));
    }
  return sample_covariance(rows);
}

std::vector<PortfolioWeights> weights_at(const ReturnPanel& returns, std::size_t t, std::size_t window,
                                         const std::vector<WeightKind>& kinds,
                                         const BacktestOptions& opts) {
  const Matrix cov = window_covariance(returns, t, window, opts.horizon);
  std::vector<PortfolioWeights> out;
  for (auto k : kinds) out.push_back(portfolio_weights(k, cov, opts.weights));
  return out;
}

void check_backtest(std::size_t periods, std::size_t window, const std::vector<std::size_t>& stressed,
                    std::size_t width, const std::vector<WeightKind>& kinds, const BacktestOptions& o) {
  if (o.horizon == 0) throw InvalidArgument("backtest: horizon must be positive");
  if (window < 2 || window + 1 >= periods)
    throw InvalidArgument("backtest: window " + std::to_string(window) + " too long for " +
                          std::to_string(periods) + " periods");
  if (kinds.empty()) throw InvalidArgument("backtest: no portfolio kinds");
  for (std::size_t j : stressed)
    if (j >= width) throw InvalidArgument("backtest: stressed factor " + std::to_string(j) + " out of range");
}

StressReport finish_report(StressReport r, const std::vector<WeightKind>& kinds,
                           const std::vector<std::vector<double>>& values,
                           const std::vector<std::size_t>& stressed, const FactorPanel* names,
                           std::size_t window, const BacktestOptions& opts) {
  r.window = window;
  r.stressed = stressed;
  if (names)
    for (std::size_t j : stressed) r.stressed_names.push_back(names->names[j]);
  r.periods = values.size();
  r.covariance_horizon = opts.horizon;
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    KindSeries s;
    s.kind = kinds[k];
    for (const auto& v : values) s.returns.push_back(v[k]);
    s.stats = quantile_stats(s.returns);
    r.series.push_back(std::move(s));
  }
  return r;
}

Scenario realized(const std::vector<std::size_t>& stressed, std::span<const double> x_next) {
  Scenario s;
  s.indices = stressed;
  for (std::size_t j : stressed) s.levels.push_back(x_next[j]);
  return s;
}

}  // namespace

StressReport rolling_backtest(const FactorPanel& factors, const ReturnPanel& returns, std::size_t window,
                              const std::vector<std::size_t>& stressed, const Predictor& p,
                              const std::vector<WeightKind>& kinds, const BacktestOptions& opts) {
  factors.validate();
  returns.validate();
  if (factors.periods() != returns.periods() || factors.times != returns.times)
    throw InvalidArgument("backtest: factor and return panels are not time-aligned");
  check_backtest(factors.periods(), window, stressed, factors.width(), kinds, opts);
  const std::size_t count = factors.periods() - 1 - window;
  std::vector<std::vector<double>> values(count);
  parallel_for(count, [&](std::size_t i) {
    const std::size_t t = window + i;
    const auto w = weights_at(returns, t, window, kinds, opts);
    const Vector x = ssa_stress(factors.values.row(t), realized(stressed, factors.values.row(t + 1)));
    const Vector y = predict_returns(p, x);
    for (const auto& pw : w) values[i].push_back(portfolio_return(pw, y));
  });
  StressReport r;
  r.source = "real";
  return finish_report(std::move(r), kinds, values, stressed, &factors, window, opts);
}

StressReport generated_backtest(const std::vector<std::pair<Vector, Vector>>& transitions,
                                const ReturnPanel& returns, std::size_t window,
                                const std::vector<std::size_t>& stressed, const Predictor& p,
                                const std::vector<WeightKind>& kinds, const BacktestOptions& opts) {
  returns.validate();
  if (transitions.empty()) throw InvalidArgument("generated_backtest: no transitions");
  check_backtest(returns.periods(), window, stressed, p.input_dim, kinds, opts);
  const std::size_t slots = returns.periods() - 1 - window;
  std::vector<std::vector<PortfolioWeights>> weights(slots);
  parallel_for(slots, [&](std::size_t i) { weights[i] = weights_at(returns, window + i, window, kinds, opts); });
  std::vector<std::vector<double>> values(transitions.size());
  parallel_for(transitions.size(), [&](std::size_t i) {
    const auto& [x_t, x_next] = transitions[i];
    const Vector y = predict_returns(p, ssa_stress(x_t, realized(stressed, x_next)));
    for (const auto& pw : weights[i % slots]) values[i].push_back(portfolio_return(pw, y));
  });
  StressReport r;
  r.source = "generated";
  return finish_report(std::move(r), kinds, values, stressed, nullptr, window, opts);
}

nlohmann::json stress_report_to_json(const StressReport& r) {
  nlohmann::json series = nlohmann::json::array();
  for (const auto& s : r.series) {
    nlohmann::json q = nlohmann::json::array();
    for (std::size_t i = 0; i < s.stats.levels.size(); ++i)
      q.push_back({{"level", s.stats.levels[i]}, {"quantile", s.stats.quantiles[i]}, {"var", s.stats.var[i]}});
    series.push_back({{"kind", to_string(s.kind)},
                      {"mean", s.stats.mean},
                      {"median", s.stats.median},
                      {"std", s.stats.std},
                      {"quantiles", q},
                      {"returns", s.returns}});
  }
  return {{"source", r.source},
          {"window", r.window},
          {"stressed", r.stressed},
          {"stressed_names", r.stressed_names},
          {"periods", r.periods},
          {"alignment", r.alignment},
          {"covariance_horizon", r.covariance_horizon},
          {"quantile_convention", "linear interpolation between order statistics"},
          {"series", series}};
}

std::string stress_table_csv(const StressReport& r) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "statistic";
  for (const auto& s : r.series) os << ',' << to_string(s.kind);
  os << '\n';
  auto row = [&](const std::string& name, auto get) {
    os << name;
    for (const auto& s : r.series) os << ',' << get(s.stats);
    os << '\n';
  };
  row("Mean", [](const QuantileStats& q) { return q.mean; });
  row("Median", [](const QuantileStats& q) { return q.median; });
  row("Std Dev", [](const QuantileStats& q) { return q.std; });
  if (!r.series.empty())
    for (std::size_t i = 0; i < r.series.front().stats.levels.size(); ++i) {
      std::ostringstream label;
      label << r.series.front().stats.levels[i] * 100.0 << "% Quantile";
      row(label.str(), [i](const QuantileStats& q) { return q.quantiles[i]; });
    }
  return os.str();
}

// ---------------------------------------------------------------- generator

PcGenerator fit_pc_generator(const Matrix& factors, const PcGeneratorConfig& cfg) {
  if (factors.rows() < 3) throw InvalidArgument("fit_pc_generator: need at least three periods");
  PcGenerator g;
  g.schedule = cfg.schedule;
  g.factor_scaler = fit_standardizer(factors);
  const Matrix z = standardize_rows(g.factor_scaler, factors);
  g.pca = pca_fit(z, cfg.components);
  const std::size_t k = g.pca.k();
  Matrix pairs(factors.rows() - 1, 2 * k);
  Vector prev = pca_encode(g.pca, z.row(0));
  for (std::size_t t = 0; t + 1 < factors.rows(); ++t) {
    const Vector next = pca_encode(g.pca, z.row(t + 1));
    std::copy(prev.begin(), prev.end(), pairs.row(t).begin());
    std::copy(next.begin(), next.end(), pairs.row(t).begin() + k);
    prev = next;
  }
  g.pair_scaler = fit_standardizer(pairs);
  std::vector<Vector> data;
  for (std::size_t t = 0; t < pairs.rows(); ++t) data.push_back(g.pair_scaler.apply(pairs.row(t)));
  g.model = diffusion::train(cfg.schedule, data, cfg.train);
  return g;
}

std::vector<std::pair<Vector, Vector>> generate_transitions(const PcGenerator& g,
                                                            const diffusion::SamplerConfig& sampler,
                                                            std::size_t count) {
  const auto samples = diffusion::sample(g.model, g.schedule, sampler, count);
  const std::size_t k = g.pca.k();
  std::vector<std::pair<Vector, Vector>> out;
  out.reserve(count);
  for (const auto& s : samples) {
    const Vector pair = g.pair_scaler.invert(s);
    const std::span<const double> ps(pair);
    out.emplace_back(g.factor_scaler.invert(pca_decode(g.pca, ps.subspan(0, k))),
                     g.factor_scaler.invert(pca_decode(g.pca, ps.subspan(k, k))));
  }
  return out;
}

// ---------------------------------------------------------------- synthetic

SyntheticMarket synth_market(const SyntheticMarketSpec& spec) {
  if (spec.periods < 3 || spec.factors == 0 || spec.assets == 0)
    throw InvalidArgument("synth_market: need periods >= 3 and positive widths");
  if (!(std::abs(spec.persistence) < 1.0)) throw InvalidArgument("synth_market: |persistence| must be < 1");
  constexpr std::size_t drivers = 3;
  const RngStream root(spec.seed);
  RngStream lr = root.split(0), dr = root.split(1), nr = root.split(2);
  SyntheticMarket m;
  m.factor_loadings = Matrix(spec.factors, drivers);
  for (double& v : m.factor_loadings.entries()) v = lr.normal();
  m.return_loadings = Matrix(spec.assets, drivers);
  for (double& v : m.return_loadings.entries()) v = 0.02 * lr.normal();
  Vector drift(spec.assets);
  for (double& v : drift) v = lr.uniform(0.005, 0.015);

  const double innov = std::sqrt(1.0 - spec.persistence * spec.persistence);
  Vector g(drivers);
  for (double& v : g) v = dr.normal();
  m.factors.values = Matrix(spec.periods, spec.factors);
  m.returns.values = Matrix(spec.periods, spec.assets);
  for (std::size_t t = 0; t < spec.periods; ++t) {
    if (t > 0)
      for (double& v : g) v = spec.persistence * v + innov * dr.normal();
    const Vector f = matvec(m.factor_loadings, g);
    const Vector r = matvec(m.return_loadings, g);
    for (std::size_t j = 0; j < spec.factors; ++j) m.factors.values(t, j) = f[j] + spec.factor_noise * nr.normal();
    for (std::size_t a = 0; a < spec.assets; ++a)
      m.returns.values(t, a) = drift[a] + r[a] + spec.return_noise * nr.normal();
    char date[48];
    std::snprintf(date, sizeof date, "%04zu-%02zu-01", 1950 + t / 12, 1 + t % 12);
    m.factors.times.emplace_back(date);
  }
  m.returns.times = m.factors.times;
  for (std::size_t j = 0; j < spec.factors; ++j) m.factors.names.push_back("F" + std::to_string(j + 1));
  for (std::size_t a = 0; a < spec.assets; ++a) m.returns.names.push_back("A" + std::to_string(a + 1));
  return m;
}

}  // namespace csdm::stress
