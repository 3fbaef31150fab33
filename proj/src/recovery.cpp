#include "csdm/recovery.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "csdm/log.hpp"

namespace csdm::recovery {

LassoProblem::LassoProblem(const SketchOperator& sketch, Vector y, double lambda)
    : sketch_(&sketch), y_(std::move(y)), lambda_(lambda) {
  if (y_.size() != sketch.m())
    throw InvalidArgument("LassoProblem: y has dimension " + std::to_string(y_.size()) +
                          ", sketch has " + std::to_string(sketch.m()) + " rows");
  if (!(lambda_ > 0)) throw InvalidArgument("LassoProblem: lambda must be > 0");
  if (!all_finite(y_)) throw InvalidArgument("LassoProblem: y has non-finite entries");
}

std::string to_string(StopReason r) { return r == StopReason::tolerance ? "tolerance" : "max-iter"; }

namespace {

void check_dim(const LassoProblem& p, std::span<const double> x, const char* who) {
  if (x.size() != p.d())
    throw InvalidArgument(std::string(who) + ": x has dimension " + std::to_string(x.size()) +
                          ", expected " + std::to_string(p.d()));
}

double objective_from_residual(std::span<const double> r, std::span<const double> x,
                               double lambda) {
  return 0.5 * dot(r, r) + lambda * norm1(x);
}

using Clock = std::chrono::steady_clock;

// Shared driver for FISTA (momentum on) and ISTA (momentum off).
RecoveryResult proximal_gradient(const LassoProblem& p, std::span<const double> x0,
                                 const SolverOptions& opts, bool accelerate) {
  check_dim(p, x0, accelerate ? "fista_solve" : "ista_solve");
  if (!(opts.tol > 0)) throw InvalidArgument("solver: tol must be > 0");
  if (opts.max_iter == 0) throw InvalidArgument("solver: max_iter must be > 0");
  const Matrix& a = p.a();
  const double lip = p.sketch().lipschitz;
  if (!(lip > 0)) throw InvalidArgument("solver: sketch lipschitz constant must be > 0");
  const double thresh = p.lambda() / lip;
  const std::size_t d = p.d(), m = p.m();
  const std::size_t every = std::max<std::size_t>(opts.check_every, 1);

  // Step 0: y_1 = x_0, t_1 = 1. A x and A y are carried along so each
  // iteration costs one product with A and one with A^T (plus one more when
  // the residual is checked).
  Vector x_prev(x0.begin(), x0.end());
  Vector ax_prev = matvec(a, x_prev);
  Vector yk = x_prev, ay = ax_prev;
  Vector x(d), ax(m), r(m), grad(d), step(d);
  double t = 1.0;
  double best = std::numeric_limits<double>::infinity();

  RecoveryResult out;
  const auto start = Clock::now();
  for (std::size_t k = 1; k <= opts.max_iter; ++k) {
    // x_k = p_L(y_k)
    for (std::size_t i = 0; i < m; ++i) r[i] = ay[i] - p.y()[i];
    matvec_t(a, r, grad);
    for (std::size_t i = 0; i < d; ++i) step[i] = yk[i] - grad[i] / lip;
    x = soft_threshold(step, thresh);
    matvec(a, x, ax);
    for (std::size_t i = 0; i < m; ++i) r[i] = ax[i] - p.y()[i];
    const double obj = objective_from_residual(r, x, p.lambda());
    if (!std::isfinite(obj) || !all_finite(x))
      throw SolverDivergence("proximal gradient: non-finite iterate", k, std::move(out.trace));
    best = std::min(best, obj);

    const bool check = (k % every == 0) || k == opts.max_iter;
    double residual = std::numeric_limits<double>::quiet_NaN();
    if (check) {
      matvec_t(a, r, grad);
      residual = subgradient_residual(grad, x, p.lambda());
      if (opts.record_trace) {
        const double el = std::chrono::duration<double>(Clock::now() - start).count();
        const double prev_el = out.trace.entries.empty() ? 0.0 : out.trace.entries.back().elapsed_s;
        out.trace.entries.push_back({k, obj, best, residual, std::max(el, prev_el)});
      }
    }
    out.trace.iterations = k;

    if (accelerate) {
      // t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2 ;  y_{k+1} = x_k + ((t_k - 1)/t_{k+1}) (x_k - x_{k-1})
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      const double beta = (t - 1.0) / t_next;
      for (std::size_t i = 0; i < d; ++i) yk[i] = x[i] + beta * (x[i] - x_prev[i]);
      for (std::size_t i = 0; i < m; ++i) ay[i] = ax[i] + beta * (ax[i] - ax_prev[i]);
      t = t_next;
    } else {
      yk = x;
      ay = ax;
    }
    std::swap(x_prev, x);
    std::swap(ax_prev, ax);

    if (check && residual <= opts.tol) {
      out.trace.stop = StopReason::tolerance;
      break;
    }
  }
  out.x_hat = std::move(x_prev);
  out.support = support_of(out.x_hat, opts.support_threshold_rel);
  if (opts.debias) out.debiased = debias(out.x_hat, p, opts.support_threshold_rel);
  return out;
}

}  // namespace

double lasso_objective(const LassoProblem& p, std::span<const double> x) {
  check_dim(p, x, "lasso_objective");
  const Vector r = sub(matvec(p.a(), x), p.y());
  return objective_from_residual(r, x, p.lambda());
}

Vector lasso_gradient(const LassoProblem& p, std::span<const double> x) {
  check_dim(p, x, "lasso_gradient");
  return matvec_t(p.a(), sub(matvec(p.a(), x), p.y()));
}

double subgradient_residual(std::span<const double> grad, std::span<const double> x,
                            double lambda) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double dist;
    if (x[i] > 0)
      dist = std::abs(grad[i] + lambda);
    else if (x[i] < 0)
      dist = std::abs(grad[i] - lambda);
    else
      dist = std::max(0.0, std::abs(grad[i]) - lambda);
    worst = std::max(worst, dist);
  }
  return worst;
}

double subgradient_residual(const LassoProblem& p, std::span<const double> x) {
  return subgradient_residual(lasso_gradient(p, x), x, p.lambda());
}

Vector prox_step(const LassoProblem& p, std::span<const double> x_prev, double lipschitz) {
  check_dim(p, x_prev, "prox_step");
  if (!(lipschitz > 0)) throw InvalidArgument("prox_step: L must be > 0");
  if (lipschitz < p.sketch().lipschitz * (1.0 - 1e-9))
    log::warn("prox_step: L=" + std::to_string(lipschitz) +
              " is below the Lipschitz constant " + std::to_string(p.sketch().lipschitz));
  const Vector g = lasso_gradient(p, x_prev);
  Vector z(x_prev.begin(), x_prev.end());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] -= g[i] / lipschitz;
  return soft_threshold(z, p.lambda() / lipschitz);
}

Vector default_start(const LassoProblem& p) { return matvec_t(p.a(), p.y()); }

RecoveryResult fista_solve(const LassoProblem& p, std::span<const double> x0,
                           const SolverOptions& opts) {
  return proximal_gradient(p, x0, opts, true);
}

RecoveryResult ista_solve(const LassoProblem& p, std::span<const double> x0,
                          const SolverOptions& opts) {
  return proximal_gradient(p, x0, opts, false);
}

Vector oracle_solve_exhaustive(const LassoProblem& p, std::size_t s_max,
                               std::uint64_t max_supports) {
  const std::size_t d = p.d();
  s_max = std::min(s_max, d);
  std::uint64_t total = 0;
  for (std::size_t s = 0; s <= s_max; ++s) {
    const std::uint64_t c = binomial(d, s);
    total = (c > max_supports || total + c > max_supports) ? max_supports + 1 : total + c;
  }
  if (total > max_supports)
    throw InvalidArgument("oracle_solve_exhaustive: support count exceeds cap " +
                          std::to_string(max_supports));

  const Matrix gram = gram_cols(p.a());
  const Vector aty = matvec_t(p.a(), p.y());
  const double yy = dot(p.y(), p.y());
  const double lam = p.lambda();

  Vector best_x(d, 0.0);
  double best_obj = 0.5 * yy;
  std::vector<std::size_t> idx;
  std::vector<double> z;
  for (std::size_t s = 1; s <= s_max; ++s) {
    idx.resize(s);
    for (std::size_t i = 0; i < s; ++i) idx[i] = i;
    while (true) {
      // Cyclic coordinate descent on the restricted problem.
      z.assign(s, 0.0);
      for (int sweep = 0; sweep < 100000; ++sweep) {
        double change = 0.0;
        for (std::size_t a = 0; a < s; ++a) {
          const std::size_t j = idx[a];
          double c = aty[j];
          for (std::size_t b = 0; b < s; ++b)
            if (b != a) c -= gram(j, idx[b]) * z[b];
          const double g = gram(j, j);
          const double nz = g > 0 ? (c > lam ? c - lam : (c < -lam ? c + lam : 0.0)) / g : 0.0;
          change = std::max(change, std::abs(nz - z[a]));
          z[a] = nz;
        }
        if (change <= 1e-12 * std::max(1.0, norm_inf(z))) break;
      }
      double quad = 0.0, lin = 0.0, l1 = 0.0;
      for (std::size_t a = 0; a < s; ++a) {
        lin += aty[idx[a]] * z[a];
        l1 += std::abs(z[a]);
        for (std::size_t b = 0; b < s; ++b) quad += z[a] * gram(idx[a], idx[b]) * z[b];
      }
      const double obj = 0.5 * quad - lin + 0.5 * yy + lam * l1;
      if (obj < best_obj) {
        best_obj = obj;
        std::fill(best_x.begin(), best_x.end(), 0.0);
        for (std::size_t a = 0; a < s; ++a) best_x[idx[a]] = z[a];
      }
      std::size_t i = s;
      while (i > 0 && idx[i - 1] == d - s + (i - 1)) --i;
      if (i == 0) break;
      ++idx[i - 1];
      for (std::size_t j = i; j < s; ++j) idx[j] = idx[j - 1] + 1;
    }
  }
  const double res = subgradient_residual(p, best_x);
  const double scale = std::max({lam, norm_inf(aty), 1e-300});
  if (res > 1e-7 * scale)
    throw NumericalError(
        "oracle_solve_exhaustive: best candidate fails the subgradient certificate "
        "(minimizer support larger than s_max?)",
        0, res);
  return best_x;
}

std::vector<std::size_t> support_of(std::span<const double> x, double threshold_rel) {
  const double thr = threshold_rel * norm_inf(x);
  std::vector<std::size_t> s;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (std::abs(x[i]) > thr) s.push_back(i);
  return s;
}

Vector debias(std::span<const double> x_hat, const LassoProblem& p, double threshold_rel) {
  check_dim(p, x_hat, "debias");
  const auto support = support_of(x_hat, threshold_rel);
  Vector out(p.d(), 0.0);
  if (support.empty()) return out;
  if (support.size() > p.m())
    throw InvalidArgument("debias: support size " + std::to_string(support.size()) +
                          " exceeds measurement count " + std::to_string(p.m()));
  const Matrix at = p.a().select_columns(support);
  const auto ls = least_squares(at, p.y());
  if (ls.rank_deficient)
    log::warn("debias: restricted design is rank deficient (rank " + std::to_string(ls.rank) +
              " of " + std::to_string(support.size()) + "); using pseudo-inverse");
  for (std::size_t k = 0; k < support.size(); ++k) out[support[k]] = ls.x[k];
  return out;
}

double universal_lambda(double sigma, std::size_t d) {
  if (!(sigma >= 0) || d < 2) throw InvalidArgument("universal_lambda: need sigma >= 0, d >= 2");
  return sigma * std::sqrt(2.0 * std::log(static_cast<double>(d)));
}

std::string trace_to_csv(const SolverTrace& trace) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "k,objective,best_objective,residual,elapsed_s\n";
  for (const auto& e : trace.entries)
    os << e.k << ',' << e.objective << ',' << e.best_objective << ',' << e.residual << ','
       << e.elapsed_s << '\n';
  return os.str();
}

}  // namespace csdm::recovery
