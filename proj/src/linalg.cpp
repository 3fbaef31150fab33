#include "csdm/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "csdm/error.hpp"

namespace csdm {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries)
    : rows_(rows), cols_(cols), data_(std::move(entries)) {
  if (data_.size() != rows * cols)
    throw InvalidArgument("matrix entries length " + std::to_string(data_.size()) +
                          " != rows*cols " + std::to_string(rows * cols));
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw InvalidArgument("ragged matrix initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Vector Matrix::column(std::size_t j) const {
  Vector c(rows_);
  for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
  return c;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix Matrix::select_columns(std::span<const std::size_t> idx) const {
  Matrix s(rows_, idx.size());
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t k = 0; k < idx.size(); ++k) s(i, k) = (*this)(i, idx[k]);
  return s;
}

bool Matrix::all_finite() const noexcept { return csdm::all_finite(data_); }

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw InvalidArgument("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  // Four interleaved partial sums combined in a fixed order.
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  const std::size_t n = a.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double norm1(std::span<const double> a) {
  double s = 0;
  for (double v : a) s += std::abs(v);
  return s;
}

double norm_inf(std::span<const double> a) {
  double s = 0;
  for (double v : a) s = std::max(s, std::abs(v));
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw InvalidArgument("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vector add(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("add: length mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

Vector sub(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("sub: length mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

Vector scaled(std::span<const double> a, double s) {
  Vector r(a.begin(), a.end());
  for (double& v : r) v *= s;
  return r;
}

bool all_finite(std::span<const double> a) noexcept {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

void matvec(const Matrix& a, std::span<const double> x, std::span<double> y) {
  if (x.size() != a.cols() || y.size() != a.rows())
    throw InvalidArgument("matvec: shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " times " + std::to_string(x.size()) + ")");
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  Vector y(a.rows());
  matvec(a, x, y);
  return y;
}

void matvec_t(const Matrix& a, std::span<const double> x, std::span<double> y) {
  if (x.size() != a.rows() || y.size() != a.cols())
    throw InvalidArgument("matvec_t: shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + ")^T times " + std::to_string(x.size()));
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double xi = x[i];
    const auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) y[j] += xi * r[j];
  }
}

Vector matvec_t(const Matrix& a, std::span<const double> x) {
  Vector y(a.cols());
  matvec_t(a, x, y);
  return y;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: inner dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto bk = b.row(k);
      for (std::size_t j = 0; j < bk.size(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix gram_rows(const Matrix& a) {
  Matrix g(a.rows(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j <= i; ++j) g(i, j) = g(j, i) = dot(a.row(i), a.row(j));
  return g;
}

Matrix gram_cols(const Matrix& a) {
  Matrix g(a.cols(), a.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto r = a.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ri = r[i];
      for (std::size_t j = 0; j <= i; ++j) g(i, j) += ri * r[j];
    }
  }
  for (std::size_t i = 0; i < a.cols(); ++i)
    for (std::size_t j = 0; j < i; ++j) g(j, i) = g(i, j);
  return g;
}

SymmetricEigen symmetric_eigen(const Matrix& s, double tol, int max_sweeps) {
  const std::size_t n = s.rows();
  if (s.cols() != n) throw InvalidArgument("symmetric_eigen: matrix not square");
  if (!s.all_finite()) throw NumericalError("symmetric_eigen: non-finite input");
  Matrix a = s;
  Matrix v = Matrix::identity(n);
  double scale = 0;
  for (double e : a.entries()) scale = std::max(scale, std::abs(e));
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= tol * std::max(scale, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });
  SymmetricEigen out{Vector(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

std::pair<double, double> symmetric_extreme_eigenvalues(const Matrix& s) {
  const std::size_t n = s.rows();
  if (n == 1) return {s(0, 0), s(0, 0)};
  if (n == 2) {
    const double m = 0.5 * (s(0, 0) + s(1, 1));
    const double d = 0.5 * (s(0, 0) - s(1, 1));
    const double r = std::hypot(d, s(0, 1));
    return {m - r, m + r};
  }
  const auto e = symmetric_eigen(s);
  return {e.values.front(), e.values.back()};
}

Matrix cholesky(const Matrix& s) {
  const std::size_t n = s.rows();
  if (s.cols() != n) throw InvalidArgument("cholesky: matrix not square");
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = s(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw NumericalError("cholesky: matrix not positive definite", j, d);
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / l(j, j);
    }
  }
  return l;
}

Vector cholesky_solve(const Matrix& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  if (b.size() != n) throw InvalidArgument("cholesky_solve: length mismatch");
  Vector y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) y[i] -= l(i, k) * y[k];
    y[i] /= l(i, i);
  }
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) y[ii] -= l(k, ii) * y[k];
    y[ii] /= l(ii, ii);
  }
  return y;
}

namespace {

LeastSquaresResult pseudo_inverse_solve(const Matrix& a, std::span<const double> b,
                                        double rank_tol) {
  const auto eig = symmetric_eigen(gram_cols(a));
  const Vector atb = matvec_t(a, b);
  const double top = std::max(eig.values.back(), 0.0);
  const std::size_t n = a.cols();
  LeastSquaresResult out{Vector(n, 0.0), 0, false};
  for (std::size_t k = 0; k < n; ++k) {
    const double lam = eig.values[k];
    if (lam <= rank_tol * top || lam <= 0.0) continue;
    ++out.rank;
    double c = 0;
    for (std::size_t i = 0; i < n; ++i) c += eig.vectors(i, k) * atb[i];
    c /= lam;
    for (std::size_t i = 0; i < n; ++i) out.x[i] += c * eig.vectors(i, k);
  }
  out.rank_deficient = out.rank < n;
  return out;
}

}  // namespace

LeastSquaresResult least_squares(const Matrix& a, std::span<const double> b, double rank_tol) {
  const std::size_t m = a.rows(), n = a.cols();
  if (b.size() != m) throw InvalidArgument("least_squares: rhs length mismatch");
  if (n == 0) return {Vector{}, 0, false};
  if (m < n) return pseudo_inverse_solve(a, b, rank_tol);

  Matrix r = a;
  Vector qtb(b.begin(), b.end());
  double max_diag = 0;
  std::vector<double> diag(n);
  for (std::size_t k = 0; k < n; ++k) {
    double norm = 0;
    for (std::size_t i = k; i < m; ++i) norm += r(i, k) * r(i, k);
    norm = std::sqrt(norm);
    const double alpha = r(k, k) > 0 ? -norm : norm;
    Vector v(m - k);
    for (std::size_t i = k; i < m; ++i) v[i - k] = r(i, k);
    v[0] -= alpha;
    const double vnorm2 = dot(v, v);
    if (vnorm2 > 0) {
      for (std::size_t j = k; j < n; ++j) {
        double s = 0;
        for (std::size_t i = k; i < m; ++i) s += v[i - k] * r(i, j);
        s = 2.0 * s / vnorm2;
        for (std::size_t i = k; i < m; ++i) r(i, j) -= s * v[i - k];
      }
      double s = 0;
      for (std::size_t i = k; i < m; ++i) s += v[i - k] * qtb[i];
      s = 2.0 * s / vnorm2;
      for (std::size_t i = k; i < m; ++i) qtb[i] -= s * v[i - k];
    }
    diag[k] = std::abs(r(k, k));
    max_diag = std::max(max_diag, diag[k]);
  }
  for (double dk : diag)
    if (dk <= rank_tol * max_diag || dk == 0.0) return pseudo_inverse_solve(a, b, rank_tol);

  Vector x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = qtb[ii];
    for (std::size_t j = ii + 1; j < n; ++j) s -= r(ii, j) * x[j];
    x[ii] = s / r(ii, ii);
  }
  return {std::move(x), n, false};
}

}  // namespace csdm
