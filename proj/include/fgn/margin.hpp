// SPDX-License-Identifier: Apache-2.0
//
// True-vs-rest margin form of multiclass softmax cross-entropy.
//
// For logits z in R^C with true class index t, the aggregate competitor
// logit is z_dagger = log sum_{j != t} exp(z_j) and the scalar margin is
// s = z_dagger - z_t. The cross-entropy loss equals softplus(s) exactly,
// the gradient equals the usual softmax gradient p - y, and the
// curvature-relevant per-example scalars (p_star, p_dagger, rho, q, xi)
// are all functions of the same representation.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <utility>

namespace fgn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Floor used for q = p_star * p_dagger wherever a reciprocal square root is
// taken downstream (row whitening). Reported diagnostics stay unclamped.
inline constexpr double kQFloor = 1e-300;

// Tolerance for the internal gradient identity cross-check.
inline constexpr double kGradientIdentityTol = 1e-12;

struct Logits {
  Vector values;       // length C
  int true_class = 0;  // index in [0, C)

  int num_classes() const { return static_cast<int>(values.size()); }

  void validate() const {
    if (num_classes() < 2)
      throw std::invalid_argument("Logits: need at least two classes");
    if (true_class < 0 || true_class >= num_classes())
      throw std::invalid_argument("Logits: true_class out of range");
    if (!values.allFinite())
      throw std::invalid_argument("Logits: non-finite entry");
  }
};

// Per-example scalars of the margin representation. `rho` is the
// conditional competitor distribution in original class order with the
// true-class entry removed.
struct MarginStats {
  double z_dagger = 0.0;
  double s = 0.0;
  double p_star = 0.0;
  double p_dagger = 0.0;
  Vector rho;        // length C-1, positive, sums to 1
  double q = 0.0;    // p_star * p_dagger, in (0, 1/4]
  double xi = 0.0;   // 1 - |rho|^2, in [0, 1 - 1/(C-1)]
};

struct LogitGradient {
  Vector values;  // length C, entries sum to 0
};

// log sum_i exp(v_i), max-shifted. Exact for a singleton.
inline double logsumexp(const Vector& v) {
  if (v.size() == 0) throw std::invalid_argument("logsumexp: empty reduction");
  if (!v.allFinite()) throw std::invalid_argument("logsumexp: non-finite entry");
  if (v.size() == 1) return v[0];
  const double m = v.maxCoeff();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) acc += std::exp(v[i] - m);
  return m + std::log(acc);
}

// 1 / (1 + exp(-x)) without overflow on either tail.
inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(s)); for s > 0 uses s + log1p(exp(-s)).
inline double softplus(double s) {
  if (s > 0.0) return s + std::log1p(std::exp(-s));
  return std::log1p(std::exp(s));
}

// Softmax of a full logit vector, max-shifted.
inline Vector softmax(const Vector& z) {
  Vector p = (z.array() - z.maxCoeff()).exp();
  p /= p.sum();
  return p;
}

// The competitor sub-vector: original order with the true-class entry removed.
inline Vector competitor_logits(const Vector& z, int true_class) {
  Vector out(z.size() - 1);
  for (Eigen::Index j = 0, k = 0; j < z.size(); ++j)
    if (j != true_class) out[k++] = z[j];
  return out;
}

inline MarginStats margin_stats(const Logits& logits) {
  logits.validate();
  const Vector comp = competitor_logits(logits.values, logits.true_class);

  MarginStats out;
  out.z_dagger = logsumexp(comp);
  out.s = out.z_dagger - logits.values[logits.true_class];
  out.p_star = stable_sigmoid(-out.s);
  out.p_dagger = 1.0 - out.p_star;
  out.rho = softmax(comp);
  out.q = out.p_star * out.p_dagger;
  out.xi = 1.0 - out.rho.squaredNorm();
  return out;
}

// Cross-entropy loss as softplus of the margin. Agrees with -log softmax_t
// to full precision.
inline double loss(const Logits& logits) {
  logits.validate();
  const double z_dagger =
      logsumexp(competitor_logits(logits.values, logits.true_class));
  return softplus(z_dagger - logits.values[logits.true_class]);
}

// phi'(s) = p_dagger and phi''(s) = p_star * p_dagger for the softplus link.
inline std::pair<double, double> scalar_link_derivatives(double s) {
  if (!std::isfinite(s))
    throw std::invalid_argument("scalar_link_derivatives: non-finite margin");
  const double phi1 = stable_sigmoid(s);
  return {phi1, phi1 * stable_sigmoid(-s)};
}

// Softmax gradient p - y in original class order. Also evaluates the margin
// form p_dagger * [-1 at true class; rho elsewhere] and checks the two agree
// componentwise; a mismatch indicates a broken invariant, not bad input.
inline LogitGradient logit_gradient(const Logits& logits) {
  logits.validate();
  const Vector p = softmax(logits.values);
  Vector g = p;
  g[logits.true_class] -= 1.0;

  const MarginStats st = margin_stats(logits);
  for (int j = 0, k = 0; j < logits.num_classes(); ++j) {
    const double margin_form =
        (j == logits.true_class) ? -st.p_dagger : st.p_dagger * st.rho[k++];
    if (std::abs(g[j] - margin_form) > kGradientIdentityTol)
      throw std::logic_error("logit_gradient: margin form deviates from p - y");
  }
  return {std::move(g)};
}

}  // namespace fgn
