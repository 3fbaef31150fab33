#include "csdm/sketch.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "csdm/error.hpp"

namespace csdm {

SketchOperator gaussian_sketch(std::size_t m, std::size_t d, std::uint64_t seed) {
  if (m == 0) throw InvalidArgument("gaussian_sketch: m must be positive");
  if (m >= d)
    throw InvalidArgument("gaussian_sketch: need m < d (got m=" + std::to_string(m) +
                          ", d=" + std::to_string(d) + ")");
  RngStream rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  Matrix a(m, d);
  for (double& e : a.entries()) e = scale * rng.normal();
  SketchOperator op;
  op.matrix = std::move(a);
  op.seed = seed;
  op.s_max = largest_singular_value(op.matrix);
  op.lipschitz = op.s_max * op.s_max;
  return op;
}

double largest_singular_value(const Matrix& a, double tol, std::size_t max_iter) {
  if (!(tol > 0)) throw InvalidArgument("largest_singular_value: tol must be positive");
  if (a.empty()) throw InvalidArgument("largest_singular_value: empty matrix");
  if (!a.all_finite()) throw NumericalError("largest_singular_value: non-finite entries");

  // Power iteration on A^T A, run in the coordinates u = A v on the smaller
  // Gram side; the nonzero spectra coincide. Start: v0 = A^T 1 (row sum).
  Vector start = matvec_t(a, Vector(a.rows(), 1.0));
  if (norm2(start) == 0.0) start.assign(a.cols(), 1.0);
  const bool wide = a.rows() <= a.cols();
  const Matrix g = wide ? gram_rows(a) : gram_cols(a);
  Vector u = wide ? matvec(a, start) : start;
  double nu = norm2(u);
  if (nu == 0.0) {
    // Start vector in the null space; fall back to the first basis vector.
    u.assign(g.rows(), 0.0);
    u[0] = 1.0;
    nu = 1.0;
  }
  for (double& x : u) x /= nu;

  double rho = 0.0;
  Vector gu(u.size());
  for (std::size_t it = 0; it < max_iter; ++it) {
    matvec(g, u, gu);
    rho = dot(u, gu);
    if (rho <= 0.0) {
      if (norm2(gu) == 0.0) throw InvalidArgument("largest_singular_value: zero matrix");
    }
    double res2 = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double r = gu[i] - rho * u[i];
      res2 += r * r;
    }
    if (std::sqrt(res2) <= tol * rho) return std::sqrt(rho);
    const double n = norm2(gu);
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = gu[i] / n;
  }
  throw NumericalError("largest_singular_value: power iteration did not converge", max_iter,
                       std::sqrt(std::max(rho, 0.0)));
}

Vector soft_threshold(std::span<const double> x, double a) {
  if (!(a >= 0)) throw InvalidArgument("soft_threshold: threshold must be >= 0");
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    out[i] = v > a ? v - a : (v < -a ? v + a : 0.0);
  }
  return out;
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    r = r * (n - k + i) / i;
    if (r > std::numeric_limits<std::uint64_t>::max()) return std::numeric_limits<std::uint64_t>::max();
  }
  return static_cast<std::uint64_t>(r);
}

double restricted_isometry_constant(const Matrix& a, std::size_t s, std::uint64_t max_subsets) {
  const std::size_t n = a.cols();
  if (s < 1 || s > n)
    throw InvalidArgument("restricted_isometry_constant: need 1 <= S <= cols (S=" +
                          std::to_string(s) + ")");
  const std::uint64_t count = binomial(n, s);
  if (count > max_subsets)
    throw InvalidArgument("restricted_isometry_constant: C(" + std::to_string(n) + "," +
                          std::to_string(s) + ") = " + std::to_string(count) +
                          " subsets exceeds cap " + std::to_string(max_subsets));
  const Matrix gram = gram_cols(a);
  std::vector<std::size_t> idx(s);
  for (std::size_t i = 0; i < s; ++i) idx[i] = i;
  Matrix sub(s, s);
  double delta = 0.0;
  while (true) {
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) sub(i, j) = gram(idx[i], idx[j]);
    const auto [lo, hi] = symmetric_extreme_eigenvalues(sub);
    delta = std::max({delta, 1.0 - lo, hi - 1.0});
    // next combination in lexicographic order
    std::size_t i = s;
    while (i > 0 && idx[i - 1] == n - s + (i - 1)) --i;
    if (i == 0) break;
    ++idx[i - 1];
    for (std::size_t j = i; j < s; ++j) idx[j] = idx[j - 1] + 1;
  }
  return delta;
}

nlohmann::json sketch_to_json(const SketchOperator& op) {
  return {{"m", op.m()}, {"d", op.d()}, {"seed", op.seed}, {"rng", std::string(RngStream::kAlgorithm)}};
}

SketchOperator sketch_from_json(const nlohmann::json& j) {
  for (const auto& [key, _] : j.items())
    if (key != "m" && key != "d" && key != "seed" && key != "rng")
      throw ConfigError(key, "unknown sketch field");
  const std::string rng = j.value("rng", std::string(RngStream::kAlgorithm));
  if (rng != RngStream::kAlgorithm)
    throw ConfigError("rng", "unsupported generator '" + rng + "'");
  return gaussian_sketch(j.at("m").get<std::size_t>(), j.at("d").get<std::size_t>(),
                         j.at("seed").get<std::uint64_t>());
}

std::string matrix_to_csv(const Matrix& a) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      if (j) os << ',';
      os << a(i, j);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace csdm

namespace csdm {
SketchOperator sketch_from_matrix(Matrix a) {
  SketchOperator op;
  op.s_max = largest_singular_value(a);
  op.lipschitz = op.s_max * op.s_max;
  op.matrix = std::move(a);
  return op;
}
}  // namespace csdm
