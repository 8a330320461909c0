// SPDX-License-Identifier: Apache-2.0
//
// Dense reference curvature computations for small instances: the full
// softmax Gauss-Newton matrix, the retained true-vs-rest (rank-one) term,
// the dropped within-competitor covariance, trace diagnostics, and a
// finite-difference Hessian. These are validation oracles, not a hot path;
// sizes are capped accordingly.

#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

#include "fgn/margin.hpp"

namespace fgn {

inline constexpr Eigen::Index kDenseOracleMaxSize = 4096;  // cap on C * d
inline constexpr int kFdHessianMaxDim = 128;

namespace detail {

inline void check_dense_size(Eigen::Index c, Eigen::Index d) {
  if (c * d > kDenseOracleMaxSize)
    throw std::invalid_argument("dense curvature: C*d exceeds the oracle size cap");
}

// Rows of Jz with the true-class row removed, original order preserved.
inline Matrix competitor_rows(const Matrix& jz, int true_class) {
  Matrix out(jz.rows() - 1, jz.cols());
  for (Eigen::Index j = 0, k = 0; j < jz.rows(); ++j)
    if (j != true_class) out.row(k++) = jz.row(j);
  return out;
}

inline void check_instance(const Matrix& jz, const MarginStats& stats,
                           int true_class) {
  if (jz.rows() < 2) throw std::invalid_argument("dense curvature: need C >= 2");
  if (true_class < 0 || true_class >= jz.rows())
    throw std::invalid_argument("dense curvature: true_class out of range");
  if (stats.rho.size() != jz.rows() - 1)
    throw std::invalid_argument("dense curvature: rho length does not match Jz");
  check_dense_size(jz.rows(), jz.cols());
}

}  // namespace detail

// Retained, dropped, and full output-space traces as closed forms of
// (p_star, xi). The identity tau_ret + tau_drop = tau_full is exact.
struct TraceTriple {
  double tau_ret = 0.0;
  double tau_drop = 0.0;
  double tau_full = 0.0;
};

// diag(p) - p p^T for a probability vector p.
inline Matrix softmax_covariance(const Vector& p) {
  if (p.size() < 1) throw std::invalid_argument("softmax_covariance: empty p");
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (!(p[i] > 0.0 && p[i] < 1.0))
      throw std::invalid_argument("softmax_covariance: entries must lie in (0,1)");
  if (std::abs(p.sum() - 1.0) > 1e-10)
    throw std::invalid_argument("softmax_covariance: entries must sum to 1");
  Matrix cov = Matrix(p.asDiagonal());
  cov.noalias() -= p * p.transpose();
  return cov;
}

// Full softmax Gauss-Newton matrix Jz^T (diag(p) - p p^T) Jz.
inline Matrix ggn_dense(const Matrix& jz, const Vector& p) {
  if (jz.rows() != p.size())
    throw std::invalid_argument("ggn_dense: Jz rows must match p length");
  detail::check_dense_size(jz.rows(), jz.cols());
  return jz.transpose() * softmax_covariance(p) * jz;
}

// The margin Jacobian row -J_true + rho^T J_competitors as a column vector.
inline Vector margin_jacobian_row(const Matrix& jz, const MarginStats& stats,
                                  int true_class) {
  detail::check_instance(jz, stats, true_class);
  const Matrix jm = detail::competitor_rows(jz, true_class);
  Vector js = jm.transpose() * stats.rho;
  js -= jz.row(true_class).transpose();
  return js;
}

// Rank-one retained term q * J_s^T J_s with q = p_star * p_dagger.
inline Matrix fgn_dense(const Matrix& jz, const MarginStats& stats,
                        int true_class) {
  const Vector js = margin_jacobian_row(jz, stats, true_class);
  return stats.q * (js * js.transpose());
}

// Dropped term p_dagger * Jm^T (diag(rho) - rho rho^T) Jm over the
// competitor rows Jm. Satisfies ggn = fgn + residual.
inline Matrix decomposition_residual(const Matrix& jz, const MarginStats& stats,
                                     int true_class) {
  detail::check_instance(jz, stats, true_class);
  const Matrix jm = detail::competitor_rows(jz, true_class);
  Matrix rho_cov = Matrix(stats.rho.asDiagonal());
  rho_cov.noalias() -= stats.rho * stats.rho.transpose();
  return stats.p_dagger * (jm.transpose() * rho_cov * jm);
}

// Same quantity written as the rho-weighted covariance of competitor rows
// around their mean: p_dagger * sum_j rho_j (J_j - Jbar)^T (J_j - Jbar).
inline Matrix competitor_gap_covariance_form(const Matrix& jz,
                                             const MarginStats& stats,
                                             int true_class) {
  detail::check_instance(jz, stats, true_class);
  const Matrix jm = detail::competitor_rows(jz, true_class);
  const Vector mean_row = jm.transpose() * stats.rho;
  Matrix gap = Matrix::Zero(jz.cols(), jz.cols());
  for (Eigen::Index j = 0; j < jm.rows(); ++j) {
    const Vector centered = jm.row(j).transpose() - mean_row;
    gap.noalias() += stats.rho[j] * (centered * centered.transpose());
  }
  return stats.p_dagger * gap;
}

inline TraceTriple trace_decomposition(double p_star, double xi) {
  if (!(p_star > 0.0 && p_star < 1.0))
    throw std::invalid_argument("trace_decomposition: p_star must lie in (0,1)");
  if (!(xi >= 0.0 && xi < 1.0))
    throw std::invalid_argument("trace_decomposition: xi must lie in [0,1)");
  const double p_dagger = 1.0 - p_star;
  TraceTriple out;
  out.tau_ret = p_star * p_dagger * (2.0 - xi);
  out.tau_drop = p_dagger * xi;
  out.tau_full = 2.0 * p_star * p_dagger + p_dagger * p_dagger * xi;
  return out;
}

// Central-difference Hessian, symmetrized. Intended for small dimensions.
template <class LossFn>
Matrix finite_difference_hessian(LossFn&& loss_fn, const Vector& w,
                                 double h = 1e-4) {
  if (!(h > 0.0))
    throw std::invalid_argument("finite_difference_hessian: h must be positive");
  const int d = static_cast<int>(w.size());
  if (d > kFdHessianMaxDim)
    throw std::invalid_argument("finite_difference_hessian: dimension too large");
  Matrix hess(d, d);
  Vector x = w;
  const double inv = 1.0 / (4.0 * h * h);
  for (int i = 0; i < d; ++i) {
    for (int j = i; j < d; ++j) {
      auto probe = [&](double si, double sj) {
        x = w;
        x[i] += si * h;
        x[j] += sj * h;
        return loss_fn(x);
      };
      const double v =
          (probe(1, 1) - probe(1, -1) - probe(-1, 1) + probe(-1, -1)) * inv;
      hess(i, j) = v;
      hess(j, i) = v;
    }
  }
  return hess;
}

}  // namespace fgn
