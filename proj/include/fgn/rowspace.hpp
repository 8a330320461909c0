// SPDX-License-Identifier: Apache-2.0
//
// Whitened row-space solve for the damped rank-one-per-example curvature
// step. For a batch of b margin rows stacked into J (b x d) with positive
// diagonal weights Q and damping lambda, the damped parameter-space system
//
//   ((1/b) J^T Q J + lambda I) d = -(1/b) J^T r
//
// is solved through the b-dimensional SPD system (K + b*lambda I) u = r_tilde
// with K = Q^{1/2} J J^T Q^{1/2} and r_tilde_i = r_i / sqrt(q_i), followed by
// the backprojection d = -J^T Q^{1/2} u. The operator is applied matrix-free:
// one transpose product and one forward product per CG iteration, or one
// fused product when an explicit whitened Gram is available.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

#include "fgn/margin.hpp"

namespace fgn {

struct OpCounts {
  std::int64_t apply_j = 0;
  std::int64_t apply_jt = 0;
};

// Matrix-free access to the batched margin Jacobian. apply_J maps a
// parameter-space vector to one margin directional derivative per example;
// apply_Jt is its exact adjoint. Call counts are shared across copies so
// cost accounting survives pass-by-value.
class RowOperator {
 public:
  using ApplyFn = std::function<Vector(const Vector&)>;

  RowOperator() = default;
  RowOperator(int batch, int dim, ApplyFn j, ApplyFn jt)
      : batch_(batch), dim_(dim), j_(std::move(j)), jt_(std::move(jt)) {}

  Vector apply_J(const Vector& v) const {
    if (v.size() != dim_)
      throw std::invalid_argument("RowOperator::apply_J: dimension mismatch");
    ++counts_->apply_j;
    return j_(v);
  }

  Vector apply_Jt(const Vector& u) const {
    if (u.size() != batch_)
      throw std::invalid_argument("RowOperator::apply_Jt: dimension mismatch");
    ++counts_->apply_jt;
    return jt_(u);
  }

  // Accounting hook for paths that evaluate a J (J^T .) pair through a
  // precomputed Gram instead of the closures.
  void note_fused_pair() const {
    ++counts_->apply_j;
    ++counts_->apply_jt;
  }

  int batch() const { return batch_; }
  int dim() const { return dim_; }
  const OpCounts& counts() const { return *counts_; }
  void reset_counts() const { *counts_ = OpCounts{}; }

 private:
  int batch_ = 0;
  int dim_ = 0;
  ApplyFn j_;
  ApplyFn jt_;
  std::shared_ptr<OpCounts> counts_ = std::make_shared<OpCounts>();
};

// One mini-batch worth of row-space ingredients. q_diag holds
// q_i = p_star_i * p_dagger_i and r holds p_dagger_i.
struct BatchSystem {
  RowOperator op;
  Vector q_diag;
  Vector r;
  double lambda = 0.0;
  int b = 0;

  // Optional explicit whitened Gram K = Q^{1/2} J J^T Q^{1/2}. When present,
  // the row-space operator is applied as one dense b x b product per CG
  // iteration instead of a JVP/VJP pair through `op`.
  std::optional<Matrix> whitened_gram;

  // Cached spectral-norm estimate of Q^{1/2} J. `norm_is_estimate` records
  // whether it came from power iteration (estimate) or was supplied exactly.
  mutable std::optional<double> operator_norm;
  mutable bool norm_is_estimate = false;

  // Number of q entries that hit the reciprocal-square-root floor.
  mutable std::int64_t q_floor_hits = 0;

  void validate() const {
    if (b < 1) throw std::invalid_argument("BatchSystem: empty batch");
    if (q_diag.size() != b || r.size() != b)
      throw std::invalid_argument("BatchSystem: q/r length must equal b");
    if (!(lambda > 0.0))
      throw std::invalid_argument("BatchSystem: damping must be positive");
    if (op.batch() != b)
      throw std::invalid_argument("BatchSystem: operator batch mismatch");
    if (whitened_gram &&
        (whitened_gram->rows() != b || whitened_gram->cols() != b))
      throw std::invalid_argument("BatchSystem: gram shape mismatch");
    for (int i = 0; i < b; ++i)
      if (!(q_diag[i] >= 0.0) || !std::isfinite(q_diag[i]))
        throw std::invalid_argument("BatchSystem: invalid q entry");
  }
};

struct SolveReport {
  Vector u;                      // row-space solution
  Vector direction;              // parameter-space direction, set by backproject
  double row_residual_norm = 0.0;
  int iterations = 0;
  double param_residual_bound = std::numeric_limits<double>::quiet_NaN();
  OpCounts solve_counts;         // operator applications inside the CG loop
};

struct CgOptions {
  double tol = 1e-5;
  int max_iter = 5;
  // When true, fills param_residual_bound = |J~| * row_residual_norm / b.
  // Uses the cached system norm, the Gram when available, or runs power
  // iteration (counted outside solve_counts).
  bool compute_residual_bound = true;
  // Test hook: called after every CG iteration with (iteration, iterate).
  std::function<void(int, const Vector&)> on_iterate;
};

// r_tilde_i = r_i / sqrt(q_i) = sqrt(p_dagger / p_star). Floors q at kQFloor
// and counts occurrences on the system.
inline Vector whitened_rhs(const BatchSystem& system) {
  system.validate();
  Vector rhs(system.b);
  for (int i = 0; i < system.b; ++i) {
    double q = system.q_diag[i];
    if (q < kQFloor) {
      q = kQFloor;
      ++system.q_floor_hits;
    }
    rhs[i] = system.r[i] / std::sqrt(q);
  }
  return rhs;
}

// Applies B = K + b*lambda*I. The generic route follows the sequence
// a = Q^{1/2} v, beta = J^T a, gamma = J beta, Bv = Q^{1/2} gamma + b*lambda*v
// with exactly one apply_Jt and one apply_J. With an explicit whitened Gram
// the same pair is evaluated as one dense product and recorded as fused.
inline Vector apply_whitened_operator(const BatchSystem& system,
                                      const Vector& v) {
  if (v.size() != system.b)
    throw std::invalid_argument("apply_whitened_operator: dimension mismatch");
  const double shift = static_cast<double>(system.b) * system.lambda;
  if (system.whitened_gram) {
    system.op.note_fused_pair();
    return (*system.whitened_gram) * v + shift * v;
  }
  const Vector q_sqrt = system.q_diag.array().sqrt();
  const Vector a = q_sqrt.cwiseProduct(v);
  const Vector beta = system.op.apply_Jt(a);
  const Vector gamma = system.op.apply_J(beta);
  return q_sqrt.cwiseProduct(gamma) + shift * v;
}

// Spectral norm |J~| = sqrt(lambda_max(K)) by power iteration on K. With an
// explicit Gram this touches no margin-map products; otherwise each power
// step costs one apply_Jt and one apply_J. The result is cached on the
// system and flagged as an estimate.
inline double estimate_operator_norm(const BatchSystem& system,
                                     int max_iters = 30, double tol = 1e-6) {
  system.validate();
  if (max_iters < 1)
    throw std::invalid_argument("estimate_operator_norm: need max_iters >= 1");
  std::mt19937_64 rng(0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> dist(0.0, 1.0);
  Vector v(system.b);
  for (int i = 0; i < system.b; ++i) v[i] = dist(rng);
  const double v0 = v.norm();
  if (v0 == 0.0 || system.b == 0) return 0.0;
  v /= v0;

  const Vector q_sqrt = system.q_diag.array().sqrt();
  const auto apply_k = [&](const Vector& x) -> Vector {
    if (system.whitened_gram) return (*system.whitened_gram) * x;
    return q_sqrt.cwiseProduct(
        system.op.apply_J(system.op.apply_Jt(q_sqrt.cwiseProduct(x))));
  };

  double eig = 0.0;
  for (int it = 0; it < max_iters; ++it) {
    Vector w = apply_k(v);
    const double norm = w.norm();
    if (norm == 0.0) {
      eig = 0.0;
      break;
    }
    const double prev = eig;
    eig = norm;  // Rayleigh growth factor of the normalized iterate
    v = w / norm;
    if (it > 0 && std::abs(eig - prev) <= tol * eig) break;
  }
  system.operator_norm = std::sqrt(eig);
  system.norm_is_estimate = true;
  return *system.operator_norm;
}

// Conjugate gradient on (K + b*lambda*I) u = r_tilde from a zero initial
// guess. Stops when |B u - r_tilde| <= tol * |r_tilde| or after max_iter
// iterations. The reported residual norm is computed from the accumulated
// operator image B u = sum_k alpha_k B p_k, not from the recurrence vector,
// so the operator-application budget stays at one JVP/VJP pair per
// iteration.
inline SolveReport cg_solve(const BatchSystem& system, const CgOptions& opts) {
  system.validate();
  if (!(opts.tol >= 0.0))
    throw std::invalid_argument("cg_solve: tolerance must be nonnegative");
  if (opts.max_iter < 1)
    throw std::invalid_argument("cg_solve: max_iter must be at least 1");

  const Vector rhs = whitened_rhs(system);
  const double rhs_norm = rhs.norm();

  SolveReport report;
  report.u = Vector::Zero(system.b);
  const OpCounts before = system.op.counts();

  if (rhs_norm > 0.0) {
    const double stop = opts.tol * rhs_norm;
    Vector residual = rhs;        // recurrence residual, drives the search
    Vector p = residual;
    Vector bu = Vector::Zero(system.b);  // accumulated B u
    double rr = residual.squaredNorm();

    for (int k = 0; k < opts.max_iter; ++k) {
      const Vector bp = apply_whitened_operator(system, p);
      if (!bp.allFinite()) throw std::runtime_error("CG divergence");
      const double curvature = p.dot(bp);
      if (!std::isfinite(curvature) || curvature <= 0.0)
        throw std::runtime_error("CG divergence");
      const double alpha = rr / curvature;
      report.u += alpha * p;
      bu += alpha * bp;
      residual -= alpha * bp;
      report.iterations = k + 1;
      if (opts.on_iterate) opts.on_iterate(k + 1, report.u);

      const double rr_next = residual.squaredNorm();
      if (!std::isfinite(rr_next)) throw std::runtime_error("CG divergence");
      report.row_residual_norm = (rhs - bu).norm();
      if (report.row_residual_norm <= stop) break;
      p = residual + (rr_next / rr) * p;
      rr = rr_next;
    }
  }

  const OpCounts after = system.op.counts();
  report.solve_counts.apply_j = after.apply_j - before.apply_j;
  report.solve_counts.apply_jt = after.apply_jt - before.apply_jt;

  if (opts.compute_residual_bound) {
    if (!system.operator_norm) estimate_operator_norm(system);
    report.param_residual_bound =
        *system.operator_norm * report.row_residual_norm / system.b;
  }
  return report;
}

inline SolveReport cg_solve(const BatchSystem& system, double tol,
                            int max_iter) {
  CgOptions opts;
  opts.tol = tol;
  opts.max_iter = max_iter;
  return cg_solve(system, opts);
}

// d = -J^T Q^{1/2} u. One transpose product.
inline Vector backproject(const BatchSystem& system, const Vector& u) {
  if (u.size() != system.b)
    throw std::invalid_argument("backproject: dimension mismatch");
  const Vector q_sqrt = system.q_diag.array().sqrt();
  return -system.op.apply_Jt(q_sqrt.cwiseProduct(u));
}

// Evaluates the parameter-space residual |(H + lambda I) d + g| of the
// backprojected direction through operator applications, checks it against
// the transfer bound |J~| * |e| / b with e = B u - r_tilde recomputed
// exactly, and returns the actual residual. A violation beyond the slack
// indicates an inconsistent adjoint pair.
inline double residual_transfer(const BatchSystem& system,
                                const SolveReport& report) {
  system.validate();
  if (report.u.size() != system.b)
    throw std::invalid_argument("residual_transfer: report does not match system");
  if (report.direction.size() != system.op.dim())
    throw std::invalid_argument("residual_transfer: direction missing; backproject first");

  const double inv_b = 1.0 / static_cast<double>(system.b);

  // (H + lambda I) d + g = (1/b) J^T (Q (J d) + r) + lambda d
  const Vector jd = system.op.apply_J(report.direction);
  const Vector inner = system.q_diag.cwiseProduct(jd) + system.r;
  const Vector param_residual =
      inv_b * system.op.apply_Jt(inner) + system.lambda * report.direction;
  const double actual = param_residual.norm();

  const Vector rhs = whitened_rhs(system);
  const Vector row_residual =
      apply_whitened_operator(system, report.u) - rhs;
  if (!system.operator_norm) estimate_operator_norm(system);
  const double bound = *system.operator_norm * row_residual.norm() * inv_b;

  // Power-iteration norms converge from below; allow wider slack for them.
  // The absolute term covers exactly-converged solves, where both sides are
  // pure roundoff; it scales with the right-hand side.
  const double slack = system.norm_is_estimate ? 1e-6 : 1e-8;
  const double floor =
      1e-14 * (1.0 + *system.operator_norm * rhs.norm() * inv_b);
  if (actual > bound * (1.0 + slack) + floor)
    throw std::runtime_error(
        "residual_transfer: bound violated (adjoint inconsistency?)");
  return actual;
}

}  // namespace fgn
