#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace csdm {

using Vector = std::vector<double>;

// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }
  Vector column(std::size_t j) const;

  const std::vector<double>& entries() const noexcept { return data_; }
  std::vector<double>& entries() noexcept { return data_; }

  Matrix transposed() const;
  // Columns selected in the given order.
  Matrix select_columns(std::span<const std::size_t> idx) const;

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Fixed-order reductions: results depend only on the inputs, never on
// scheduling or vector width.
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double norm1(std::span<const double> a);
double norm_inf(std::span<const double> a);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
Vector add(std::span<const double> a, std::span<const double> b);
Vector sub(std::span<const double> a, std::span<const double> b);
Vector scaled(std::span<const double> a, double s);
bool all_finite(std::span<const double> a) noexcept;

// y = A x
Vector matvec(const Matrix& a, std::span<const double> x);
void matvec(const Matrix& a, std::span<const double> x, std::span<double> y);
// y = A^T x
Vector matvec_t(const Matrix& a, std::span<const double> x);
void matvec_t(const Matrix& a, std::span<const double> x, std::span<double> y);

Matrix matmul(const Matrix& a, const Matrix& b);
// A A^T and A^T A.
Matrix gram_rows(const Matrix& a);
Matrix gram_cols(const Matrix& a);

struct SymmetricEigen {
  Vector values;   // ascending
  Matrix vectors;  // column j is the eigenvector of values[j]
};

// Cyclic Jacobi rotations; accurate to a few ulps of the spectral norm.
SymmetricEigen symmetric_eigen(const Matrix& s, double tol = 1e-14, int max_sweeps = 100);
// Extreme eigenvalues {min, max} of a symmetric matrix.
std::pair<double, double> symmetric_extreme_eigenvalues(const Matrix& s);

// Lower-triangular L with S = L L^T; throws NumericalError if S is not
// numerically positive definite.
Matrix cholesky(const Matrix& s);
Vector cholesky_solve(const Matrix& l, std::span<const double> b);

struct LeastSquaresResult {
  Vector x;
  std::size_t rank = 0;
  bool rank_deficient = false;
};

// min |A x - b|_2. Householder QR when A has full column rank, otherwise the
// minimum-norm pseudo-inverse solution.
LeastSquaresResult least_squares(const Matrix& a, std::span<const double> b,
                                 double rank_tol = 1e-12);

}  // namespace csdm
