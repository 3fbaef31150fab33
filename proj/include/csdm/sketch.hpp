#pragma once

#include <cstdint>
#include <string>

#include "csdm/linalg.hpp"
#include "csdm/rng.hpp"
#include "vendor_json.hpp"

namespace csdm {

// m x d Gaussian measurement matrix with entries N(0, 1/m). Only (m, d, seed)
// are persisted; the matrix is regenerated bit-exactly on load.
struct SketchOperator {
  Matrix matrix;
  std::uint64_t seed = 0;
  double s_max = 0.0;      // largest singular value
  double lipschitz = 0.0;  // s_max^2, Lipschitz constant of the Lasso gradient

  std::size_t m() const noexcept { return matrix.rows(); }
  std::size_t d() const noexcept { return matrix.cols(); }
};

SketchOperator gaussian_sketch(std::size_t m, std::size_t d, std::uint64_t seed);

// Power iteration on the Gram matrix of A. Stops when the eigen-residual of
// the Rayleigh quotient is below tol relative; throws NumericalError carrying
// the last estimate otherwise.
double largest_singular_value(const Matrix& a, double tol = 1e-10, std::size_t max_iter = 200000);

// Coordinatewise prox of a*|.|_1.
Vector soft_threshold(std::span<const double> x, double a);

// delta_S by exhaustive enumeration of column subsets. Subsets of size exactly
// S suffice: by eigenvalue interlacing a principal submatrix never has a more
// extreme spectrum than the matrix containing it.
double restricted_isometry_constant(const Matrix& a, std::size_t s,
                                    std::uint64_t max_subsets = 2'000'000);

std::uint64_t binomial(std::uint64_t n, std::uint64_t k);  // saturates at UINT64_MAX

nlohmann::json sketch_to_json(const SketchOperator& op);
SketchOperator sketch_from_json(const nlohmann::json& j);

// Full-precision CSV, one matrix row per line.
std::string matrix_to_csv(const Matrix& a);

}  // namespace csdm

namespace csdm {
// Wraps an arbitrary matrix (tests, user-supplied operators); seed is 0 and
// s_max/lipschitz are computed by power iteration.
SketchOperator sketch_from_matrix(Matrix a);
}  // namespace csdm
