// SPDX-License-Identifier: Apache-2.0
//
// Frozen-feature affine softmax head: z_i = W^T h_i + bias. Because the
// logits are affine in (W, bias), the batched margin Jacobian has the
// explicit row structure J_i = (a_i (x) h_i, a_i) with the logit-space
// margin gradient a_i, and the row Gram has the closed form
// G_ij = (h_i . h_j + 1) (a_i . a_j); the +1 carries the bias column.
// Parameter vectors are packed as [vec(W) column-major; bias].

#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

#include "fgn/margin.hpp"
#include "fgn/rowspace.hpp"

namespace fgn {

struct FeatureBatch {
  Matrix features;        // b x d_f
  Eigen::VectorXi labels; // length b, entries in [0, C)
  int num_classes = 0;

  int size() const { return static_cast<int>(features.rows()); }
  int feature_dim() const { return static_cast<int>(features.cols()); }

  void validate() const {
    if (size() < 1) throw std::invalid_argument("FeatureBatch: empty batch");
    if (labels.size() != size())
      throw std::invalid_argument("FeatureBatch: labels length mismatch");
    if (num_classes < 2)
      throw std::invalid_argument("FeatureBatch: need at least two classes");
    if (!features.allFinite())
      throw std::invalid_argument("FeatureBatch: non-finite feature");
    for (int i = 0; i < size(); ++i)
      if (labels[i] < 0 || labels[i] >= num_classes)
        throw std::invalid_argument("FeatureBatch: label out of range");
  }
};

struct HeadParams {
  Matrix w;     // d_f x C
  Vector bias;  // C

  int feature_dim() const { return static_cast<int>(w.rows()); }
  int num_classes() const { return static_cast<int>(bias.size()); }
  int dim() const { return static_cast<int>(w.size() + bias.size()); }

  Vector pack() const {
    Vector v(dim());
    v.head(w.size()) = Eigen::Map<const Vector>(w.data(), w.size());
    v.tail(bias.size()) = bias;
    return v;
  }

  static HeadParams unpack(const Vector& v, int d_f, int c) {
    if (v.size() != static_cast<Eigen::Index>(d_f) * c + c)
      throw std::invalid_argument("HeadParams::unpack: size mismatch");
    HeadParams p;
    p.w = Eigen::Map<const Matrix>(v.data(), d_f, c);
    p.bias = v.tail(c);
    return p;
  }

  static HeadParams zero(int d_f, int c) {
    return {Matrix::Zero(d_f, c), Vector::Zero(c)};
  }
};

// Logit-space margin gradient: -1 at the true class, rho elsewhere,
// original class order.
struct MarginRowA {
  Vector a;  // length C, entries sum to 0
};

inline MarginRowA margin_row(const MarginStats& stats, int true_class, int c) {
  if (stats.rho.size() != c - 1)
    throw std::invalid_argument("margin_row: rho length does not match C");
  if (true_class < 0 || true_class >= c)
    throw std::invalid_argument("margin_row: true_class out of range");
  Vector a(c);
  for (int j = 0, k = 0; j < c; ++j)
    a[j] = (j == true_class) ? -1.0 : stats.rho[k++];
  return {std::move(a)};
}

// Z = H W + 1 bias^T, one logit row per example.
inline Matrix affine_logits(const HeadParams& params, const FeatureBatch& batch) {
  batch.validate();
  if (params.feature_dim() != batch.feature_dim() ||
      params.num_classes() != batch.num_classes)
    throw std::invalid_argument("affine_logits: shape mismatch");
  Matrix z = batch.features * params.w;
  z.rowwise() += params.bias.transpose();
  return z;
}

// Everything the optimizers need from one forward pass over a batch.
struct BatchEval {
  Matrix logits;       // b x C
  Matrix probs;        // b x C softmax rows
  Matrix margin_rows;  // b x C rows a_i
  Vector margin;       // s_i
  Vector p_star;
  Vector p_dagger;
  Vector q;            // p_star * p_dagger
  double mean_loss = 0.0;
};

inline BatchEval evaluate_batch(const HeadParams& params,
                                const FeatureBatch& batch) {
  BatchEval eval;
  eval.logits = affine_logits(params, batch);
  const int b = batch.size();
  const int c = batch.num_classes;
  eval.probs.resize(b, c);
  eval.margin_rows.resize(b, c);
  eval.margin.resize(b);
  eval.p_star.resize(b);
  eval.p_dagger.resize(b);
  eval.q.resize(b);
  double loss_sum = 0.0;
  for (int i = 0; i < b; ++i) {
    const Logits row{eval.logits.row(i).transpose(), batch.labels[i]};
    const MarginStats st = margin_stats(row);
    eval.probs.row(i) = softmax(row.values).transpose();
    eval.margin_rows.row(i) = margin_row(st, row.true_class, c).a.transpose();
    eval.margin[i] = st.s;
    eval.p_star[i] = st.p_star;
    eval.p_dagger[i] = st.p_dagger;
    eval.q[i] = st.q;
    loss_sum += softplus(st.s);
  }
  eval.mean_loss = loss_sum / b;
  return eval;
}

// G_ij = (h_i . h_j + 1) (a_i . a_j).
inline Matrix gram_unwhitened(const Matrix& features, const Matrix& margin_rows) {
  if (features.rows() != margin_rows.rows())
    throw std::invalid_argument("gram_unwhitened: batch size mismatch");
  const Matrix feature_part =
      (features * features.transpose()).array() + 1.0;
  return feature_part.cwiseProduct(margin_rows * margin_rows.transpose());
}

// K_ij = sqrt(q_i q_j) G_ij.
inline Matrix gram_whitened(const Matrix& gram, const Vector& q_diag) {
  if (gram.rows() != gram.cols() || gram.rows() != q_diag.size())
    throw std::invalid_argument("gram_whitened: shape mismatch");
  for (Eigen::Index i = 0; i < q_diag.size(); ++i)
    if (!(q_diag[i] >= 0.0))
      throw std::invalid_argument("gram_whitened: q must be nonnegative");
  const Vector q_sqrt = q_diag.array().sqrt();
  return q_sqrt.asDiagonal() * gram * q_sqrt.asDiagonal();
}

// Matrix-free margin Jacobian for the affine head. apply_J contracts a
// packed (W, bias) direction against each row (a_i (x) h_i, a_i); apply_Jt
// is the exact adjoint.
inline RowOperator affine_row_operator(const Matrix& features,
                                       const Matrix& margin_rows) {
  if (features.rows() != margin_rows.rows())
    throw std::invalid_argument("affine_row_operator: batch size mismatch");
  const int b = static_cast<int>(features.rows());
  const int d_f = static_cast<int>(features.cols());
  const int c = static_cast<int>(margin_rows.cols());
  const int dim = d_f * c + c;

  auto h = std::make_shared<const Matrix>(features);
  auto a = std::make_shared<const Matrix>(margin_rows);

  auto apply_j = [h, a, d_f, c](const Vector& v) {
    const Eigen::Map<const Matrix> w_dir(v.data(), d_f, c);
    Matrix t = (*h) * w_dir;
    t.rowwise() += v.tail(c).transpose();
    return Vector(t.cwiseProduct(*a).rowwise().sum());
  };
  auto apply_jt = [h, a, d_f, c, dim](const Vector& u) {
    const Matrix weighted = u.asDiagonal() * (*a);  // b x C
    Vector out(dim);
    Eigen::Map<Matrix>(out.data(), d_f, c).noalias() =
        h->transpose() * weighted;
    out.tail(c) = a->transpose() * u;
    return out;
  };
  return RowOperator(b, dim, std::move(apply_j), std::move(apply_jt));
}

inline RowOperator affine_row_operator(const HeadParams& params,
                                       const FeatureBatch& batch) {
  const BatchEval eval = evaluate_batch(params, batch);
  return affine_row_operator(batch.features, eval.margin_rows);
}

// Row-space system for one batch. When the batch is small enough the
// whitened Gram is materialized and CG runs on it; the row operator is kept
// either way for backprojection and diagnostics.
inline BatchSystem make_batch_system(const Matrix& features,
                                     const BatchEval& eval, double lambda,
                                     int gram_threshold = 512) {
  BatchSystem sys;
  sys.b = static_cast<int>(features.rows());
  sys.op = affine_row_operator(features, eval.margin_rows);
  sys.q_diag = eval.q;
  sys.r = eval.p_dagger;
  sys.lambda = lambda;
  if (sys.b <= gram_threshold)
    sys.whitened_gram =
        gram_whitened(gram_unwhitened(features, eval.margin_rows), eval.q);
  return sys;
}

// Coordinatewise standardization fitted on a training split.
struct Standardizer {
  Vector mean;
  Vector scale;  // reciprocal of the per-coordinate standard deviation

  void apply(FeatureBatch& batch) const {
    if (batch.feature_dim() != mean.size())
      throw std::invalid_argument("Standardizer: dimension mismatch");
    batch.features.rowwise() -= mean.transpose();
    batch.features = batch.features * scale.asDiagonal();
  }
};

inline Standardizer fit_standardizer(const Matrix& features) {
  const int n = static_cast<int>(features.rows());
  Standardizer st;
  st.mean = features.colwise().mean();
  Matrix centered = features.rowwise() - st.mean.transpose();
  Vector var = centered.array().square().colwise().mean();
  st.scale.resize(var.size());
  for (Eigen::Index j = 0; j < var.size(); ++j) {
    const double sd = std::sqrt(var[j]);
    st.scale[j] = (sd > 1e-12) ? 1.0 / sd : 1.0;  // constant coordinates pass through
  }
  if (n < 2)
    throw std::invalid_argument("fit_standardizer: need at least two rows");
  return st;
}

}  // namespace fgn
