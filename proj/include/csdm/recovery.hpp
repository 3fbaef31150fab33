#pragma once

#include <optional>
#include <string>
#include <vector>

#include "csdm/error.hpp"
#include "csdm/sketch.hpp"

namespace csdm::recovery {

// F(x) = 1/2 |Ax - y|_2^2 + lambda |x|_1 over a borrowed sketch.
class LassoProblem {
 public:
  LassoProblem(const SketchOperator& sketch, Vector y, double lambda);

  const SketchOperator& sketch() const noexcept { return *sketch_; }
  const Matrix& a() const noexcept { return sketch_->matrix; }
  const Vector& y() const noexcept { return y_; }
  double lambda() const noexcept { return lambda_; }
  std::size_t d() const noexcept { return sketch_->d(); }
  std::size_t m() const noexcept { return sketch_->m(); }

 private:
  const SketchOperator* sketch_;
  Vector y_;
  double lambda_;
};

enum class StopReason { tolerance, max_iter };
std::string to_string(StopReason r);

struct TraceEntry {
  std::size_t k = 0;
  double objective = 0.0;
  double best_objective = 0.0;
  double residual = 0.0;
  double elapsed_s = 0.0;
};

struct SolverTrace {
  std::vector<TraceEntry> entries;
  StopReason stop = StopReason::max_iter;
  std::size_t iterations = 0;
};

struct RecoveryResult {
  Vector x_hat;
  std::vector<std::size_t> support;
  SolverTrace trace;
  std::optional<Vector> debiased;
};

struct SolverOptions {
  std::size_t max_iter = 1000;
  double tol = 1e-8;
  // Residual (and a trace row) every this many iterations; the final iterate
  // is always checked.
  std::size_t check_every = 1;
  bool record_trace = true;
  double support_threshold_rel = 1e-6;
  bool debias = false;
};

// Thrown when an iterate turns non-finite; carries the trace up to that point.
class SolverDivergence : public NumericalError {
 public:
  SolverDivergence(const std::string& what, std::size_t step, SolverTrace trace)
      : NumericalError(what, step), trace_(std::move(trace)) {}
  const SolverTrace& trace() const noexcept { return trace_; }

 private:
  SolverTrace trace_;
};

double lasso_objective(const LassoProblem& p, std::span<const double> x);
// grad f(x) = A^T (A x - y)
Vector lasso_gradient(const LassoProblem& p, std::span<const double> x);
// max_i dist(-grad_i, lambda * d|x_i|); zero exactly at a minimizer.
double subgradient_residual(const LassoProblem& p, std::span<const double> x);
double subgradient_residual(std::span<const double> grad, std::span<const double> x,
                            double lambda);

// SoftThreshold(x' - grad f(x') / L, lambda / L).
Vector prox_step(const LassoProblem& p, std::span<const double> x_prev, double lipschitz);

// x0 = A^T y.
Vector default_start(const LassoProblem& p);

RecoveryResult fista_solve(const LassoProblem& p, std::span<const double> x0,
                           const SolverOptions& opts = {});
RecoveryResult ista_solve(const LassoProblem& p, std::span<const double> x0,
                          const SolverOptions& opts = {});

// Global minimizer among all supports of size <= s_max (coordinate descent on
// each restricted problem), certified by the full-space subgradient residual.
Vector oracle_solve_exhaustive(const LassoProblem& p, std::size_t s_max,
                               std::uint64_t max_supports = 5'000'000);

std::vector<std::size_t> support_of(std::span<const double> x, double threshold_rel = 1e-6);

// Least-squares refit on the support of x_hat; zeros elsewhere.
Vector debias(std::span<const double> x_hat, const LassoProblem& p, double threshold_rel = 1e-6);

// lambda = sigma * sqrt(2 log d), sigma the per-coordinate noise level.
double universal_lambda(double sigma, std::size_t d);

// CSV with header k,objective,best_objective,residual,elapsed_s.
std::string trace_to_csv(const SolverTrace& trace);

}  // namespace csdm::recovery
