#pragma once

// Discrete optimal transport: measures, ground costs, exact and entropic
// solvers, Wasserstein distances and barycentric maps.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "otfuse/detail/network_simplex.hpp"
#include "otfuse/error.hpp"
#include "otfuse/types.hpp"

namespace otfuse {

inline constexpr double kSimplexTolerance = 1e-12;

/// Throws unless `h` is a nonnegative vector summing to one.
inline void require_simplex(const Vector& h, const char* name) {
  if (h.size() == 0) throw DomainError(std::string(name) + ": empty histogram");
  double sum = 0.0;
  for (Index i = 0; i < h.size(); ++i) {
    if (!std::isfinite(h(i)) || h(i) < 0.0)
      throw DomainError(std::string(name) + ": histogram entry " + std::to_string(i) + " is negative or non-finite");
    sum += h(i);
  }
  if (std::abs(sum - 1.0) > kSimplexTolerance)
    throw DomainError(std::string(name) + ": histogram sums to " + std::to_string(sum) + ", not 1");
}

inline Vector uniform_histogram(Index n) { return Vector::Constant(n, 1.0 / static_cast<double>(n)); }

/// Weighted point cloud: one support point per row.
class DiscreteMeasure {
 public:
  DiscreteMeasure(Matrix support, Vector histogram) : support_(std::move(support)), histogram_(std::move(histogram)) {
    if (support_.rows() != histogram_.size())
      throw ShapeError("measure support has " + std::to_string(support_.rows()) + " points but histogram has " +
                       std::to_string(histogram_.size()) + " entries");
    require_simplex(histogram_, "measure");
  }

  static DiscreteMeasure uniform(Matrix support) {
    const Index n = support.rows();
    return DiscreteMeasure(std::move(support), uniform_histogram(n));
  }

  const Matrix& support() const noexcept { return support_; }
  const Vector& histogram() const noexcept { return histogram_; }
  Index size() const noexcept { return support_.rows(); }
  Index dim() const noexcept { return support_.cols(); }

 private:
  Matrix support_;
  Vector histogram_;
};

/// Pairwise ground cost with the metric exponent it was built with.
class CostMatrix {
 public:
  explicit CostMatrix(Matrix entries, int exponent = 1) : entries_(std::move(entries)), exponent_(exponent) {
    if (exponent_ < 1) throw DomainError("cost exponent must be a positive integer");
    if (!entries_.allFinite()) throw DomainError("cost matrix contains NaN or Inf");
    if ((entries_.array() < 0.0).any()) throw DomainError("cost matrix has negative entries");
  }

  const Matrix& entries() const noexcept { return entries_; }
  int exponent() const noexcept { return exponent_; }
  Index rows() const noexcept { return entries_.rows(); }
  Index cols() const noexcept { return entries_.cols(); }
  double operator()(Index i, Index j) const { return entries_(i, j); }

 private:
  Matrix entries_;
  int exponent_;
};

struct TransportPlan {
  Matrix coupling;
  double transport_cost = 0.0;
  std::optional<Vector> dual_row;
  std::optional<Vector> dual_col;
  double marginal_violation = 0.0;
  long iterations = 0;
  bool converged = true;
};

/// (Euclidean distance)^p between every row of X and every row of Y.
/// Rows are differenced directly so identical points cost exactly zero.
inline CostMatrix build_cost_matrix(const Matrix& x, const Matrix& y, int p = 1) {
  if (x.cols() != y.cols() || x.cols() < 1)
    throw ShapeError("cost matrix: feature dimensions differ, X is " + shape_str(x) + ", Y is " + shape_str(y));
  if (p < 1) throw DomainError("cost exponent must be a positive integer");
  Matrix c(x.rows(), y.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < y.rows(); ++j) {
      const double sq = (x.row(i) - y.row(j)).squaredNorm();
      c(i, j) = p == 2 ? sq : std::pow(std::sqrt(sq), p);
    }
  }
  return CostMatrix(std::move(c), p);
}

namespace detail {

inline double marginal_gap(const Matrix& t, const Vector& a, const Vector& b) {
  const double row = (t.rowwise().sum() - a).cwiseAbs().maxCoeff();
  const double col = (t.colwise().sum().transpose() - b).cwiseAbs().maxCoeff();
  return std::max(row, col);
}

inline void check_problem(const CostMatrix& c, const Vector& a, const Vector& b) {
  if (c.rows() != a.size() || c.cols() != b.size())
    throw ShapeError("transport problem: cost is " + shape_str(c.entries()) + " but histograms have sizes " +
                     std::to_string(a.size()) + " and " + std::to_string(b.size()));
  require_simplex(a, "source");
  require_simplex(b, "target");
}

}  // namespace detail

/// Exact OT by network simplex. Returns a vertex of the transport polytope
/// together with dual potentials u, v with u_i + v_j <= C_ij.
inline TransportPlan solve_exact(const CostMatrix& c, const Vector& a, const Vector& b) {
  detail::check_problem(c, a, b);
  const Index n = c.rows(), m = c.cols();
  detail::NetworkSimplex ns(c.entries(), a, b);
  const std::int64_t cap = std::max<std::int64_t>(1'000'000, 100 * static_cast<std::int64_t>(n * m));
  ns.run(cap);
  if (ns.artificial_flow() > 1e-9) throw SolverError("exact OT: artificial arcs still carry flow (infeasible input)");

  TransportPlan plan;
  plan.coupling.resize(n, m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) plan.coupling(i, j) = std::max(0.0, ns.flow(i, j));
  plan.transport_cost = (plan.coupling.array() * c.entries().array()).sum();
  Vector u(n), v(m);
  for (Index i = 0; i < n; ++i) u(i) = -ns.potential(i);
  for (Index j = 0; j < m; ++j) v(j) = ns.potential(n + j);
  // Potentials are defined up to a shared constant; centre them for readability.
  const double shift = v.size() > 0 ? v.minCoeff() : 0.0;
  u.array() += shift;
  v.array() -= shift;
  plan.dual_row = std::move(u);
  plan.dual_col = std::move(v);
  plan.marginal_violation = detail::marginal_gap(plan.coupling, a, b);
  plan.iterations = static_cast<long>(ns.pivots());
  return plan;
}

struct SinkhornOptions {
  double regularization = 0.05;
  long max_iter = 10000;
  double tol = 1e-9;
};

namespace detail {

inline double log_sum_exp(const double* values, Index count) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Index k = 0; k < count; ++k) mx = std::max(mx, values[k]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (Index k = 0; k < count; ++k) s += std::exp(values[k] - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Entropy-regularized OT, iterated on dual potentials in the log domain.
inline TransportPlan solve_sinkhorn(const CostMatrix& c, const Vector& a, const Vector& b,
                                    const SinkhornOptions& opt = {}) {
  if (!(opt.regularization > 0.0) || !std::isfinite(opt.regularization))
    throw DomainError("sinkhorn: regularization must be positive");
  if (!(opt.tol > 0.0)) throw DomainError("sinkhorn: tolerance must be positive");
  if (opt.max_iter < 1) throw DomainError("sinkhorn: max_iter must be at least 1");
  detail::check_problem(c, a, b);

  const Index n = c.rows(), m = c.cols();
  double lambda = opt.regularization;
  const Matrix& cost = c.entries();
  const Vector log_a = a.array().log();
  const Vector log_b = b.array().log();
  Vector f = Vector::Zero(n), g = Vector::Zero(m);
  std::vector<double> scratch(static_cast<std::size_t>(std::max(n, m)));

  auto update_f = [&] {
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < m; ++j) scratch[j] = (g(j) - cost(i, j)) / lambda;
      f(i) = lambda * (log_a(i) - detail::log_sum_exp(scratch.data(), m));
    }
  };
  auto update_g = [&] {
    for (Index j = 0; j < m; ++j) {
      for (Index i = 0; i < n; ++i) scratch[i] = (f(i) - cost(i, j)) / lambda;
      g(j) = lambda * (log_b(j) - detail::log_sum_exp(scratch.data(), n));
    }
  };
  auto row_violation = [&] {
    double worst = 0.0;
    for (Index i = 0; i < n; ++i) {
      double s = 0.0;
      for (Index j = 0; j < m; ++j) s += std::exp((f(i) + g(j) - cost(i, j)) / lambda);
      worst = std::max(worst, std::abs(s - a(i)));
    }
    return worst;
  };

  // Epsilon scaling: warm-start the potentials on a coarse regularization and
  // anneal towards the target. Plain iteration stalls once exp(-C/lambda)
  // spans hundreds of orders of magnitude.
  const double cmax = cost.size() > 0 ? cost.maxCoeff() : 0.0;
  long it = 0;
  for (double stage = std::max(opt.regularization, cmax); stage > opt.regularization && it < opt.max_iter;
       stage = std::max(opt.regularization, stage / 4.0)) {
    lambda = stage;
    for (int k = 0; k < 50 && it < opt.max_iter; ++k, ++it) {
      update_f();
      update_g();
    }
  }
  lambda = opt.regularization;

  TransportPlan plan;
  plan.converged = false;
  while (it < opt.max_iter) {
    update_f();
    update_g();
    ++it;
    for (Index i = 0; i < n; ++i)
      if (std::isnan(f(i))) throw SolverError("sinkhorn: non-finite dual potential at iteration " + std::to_string(it));
    for (Index j = 0; j < m; ++j)
      if (std::isnan(g(j))) throw SolverError("sinkhorn: non-finite dual potential at iteration " + std::to_string(it));
    if (it % 10 == 0 || it == opt.max_iter) {
      if (row_violation() <= opt.tol) {
        plan.converged = true;
        break;
      }
    }
  }

  plan.coupling.resize(n, m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) plan.coupling(i, j) = std::exp((f(i) + g(j) - cost(i, j)) / lambda);
  if (!plan.coupling.allFinite()) throw SolverError("sinkhorn: coupling overflowed");
  plan.transport_cost = (plan.coupling.array() * cost.array()).sum();
  plan.marginal_violation = detail::marginal_gap(plan.coupling, a, b);
  plan.iterations = it;
  return plan;
}

/// OT(mu, nu; D^p)^(1/p), solved exactly.
inline double wasserstein_distance(const DiscreteMeasure& mu, const DiscreteMeasure& nu, int p = 2) {
  const CostMatrix c = build_cost_matrix(mu.support(), nu.support(), p);
  const TransportPlan plan = solve_exact(c, mu.histogram(), nu.histogram());
  return std::pow(std::max(0.0, plan.transport_cost), 1.0 / p);
}

/// Replaces each point of the measure with histogram `h` (the columns of T) by
/// the coupling-weighted mean of `source` rows: diag(1/h) T^T S.
inline Matrix barycentric_project(const Matrix& coupling, const Matrix& source, const Vector& h) {
  if (coupling.rows() != source.rows() || coupling.cols() != h.size())
    throw ShapeError("barycentric projection: coupling " + shape_str(coupling) + ", source " + shape_str(source) +
                     ", histogram of size " + std::to_string(h.size()));
  for (Index j = 0; j < h.size(); ++j)
    if (!(h(j) > 0.0)) throw DomainError("barycentric projection: histogram entry " + std::to_string(j) + " has zero mass");
  Matrix out = coupling.transpose() * source;
  for (Index j = 0; j < h.size(); ++j) out.row(j) /= h(j);
  return out;
}

}  // namespace otfuse
