// SPDX-License-Identifier: Apache-2.0

#include "fgn/affine_head.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fgn/dense_curvature.hpp"
#include "test_util.hpp"

using fgn::FeatureBatch;
using fgn::HeadParams;
using fgn::Matrix;
using fgn::Vector;
using fgn::test::Rng;

namespace {

FeatureBatch random_batch(Rng& rng, int b, int d_f, int c) {
  FeatureBatch batch;
  batch.features = fgn::test::random_matrix(rng, b, d_f);
  batch.labels.resize(b);
  for (int i = 0; i < b; ++i) batch.labels[i] = static_cast<int>(rng() % c);
  batch.num_classes = c;
  return batch;
}

HeadParams random_params(Rng& rng, int d_f, int c, double scale = 0.5) {
  return {fgn::test::random_matrix(rng, d_f, c, scale),
          fgn::test::random_vector(rng, c, scale)};
}

// Dense margin Jacobian assembled from first principles: row i is
// (a_i (x) h_i, a_i) in the packed [vec(W) column-major; bias] layout.
Matrix dense_margin_jacobian(const Matrix& features, const Matrix& margin_rows) {
  const int b = static_cast<int>(features.rows());
  const int d_f = static_cast<int>(features.cols());
  const int c = static_cast<int>(margin_rows.cols());
  Matrix j(b, d_f * c + c);
  for (int i = 0; i < b; ++i) {
    for (int cls = 0; cls < c; ++cls)
      for (int k = 0; k < d_f; ++k)
        j(i, cls * d_f + k) = margin_rows(i, cls) * features(i, k);
    for (int cls = 0; cls < c; ++cls)
      j(i, d_f * c + cls) = margin_rows(i, cls);
  }
  return j;
}

TEST(AffineLogits, ZeroParamsGiveZeroLogits) {
  Rng rng(201);
  const auto batch = random_batch(rng, 4, 3, 5);
  const auto z = fgn::affine_logits(HeadParams::zero(3, 5), batch);
  EXPECT_EQ(z.norm(), 0.0);
}

TEST(AffineLogits, HandComputedSingleFeature) {
  FeatureBatch batch;
  batch.features = Matrix::Constant(1, 1, 2.0);
  batch.labels = Eigen::VectorXi::Zero(1);
  batch.num_classes = 2;
  HeadParams params;
  params.w.resize(1, 2);
  params.w << 1.0, -1.0;
  params.bias = Vector::Zero(2);
  const auto z = fgn::affine_logits(params, batch);
  EXPECT_DOUBLE_EQ(z(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(z(0, 1), -2.0);
}

TEST(AffineLogits, BatchedMatchesPerExampleLoop) {
  Rng rng(203);
  const auto batch = random_batch(rng, 6, 4, 3);
  const auto params = random_params(rng, 4, 3);
  const auto z = fgn::affine_logits(params, batch);
  for (int i = 0; i < 6; ++i) {
    const Vector expected =
        params.w.transpose() * batch.features.row(i).transpose() + params.bias;
    EXPECT_LE((z.row(i).transpose() - expected).norm(), 1e-14);
  }
}

TEST(AffineLogits, RejectsShapeMismatch) {
  Rng rng(204);
  const auto batch = random_batch(rng, 3, 4, 3);
  EXPECT_THROW(fgn::affine_logits(HeadParams::zero(5, 3), batch),
               std::invalid_argument);
}

TEST(MarginRow, BinaryCase) {
  const auto st = fgn::margin_stats({Eigen::Vector2d(0.3, -0.4), 0});
  const auto row = fgn::margin_row(st, 0, 2);
  EXPECT_DOUBLE_EQ(row.a[0], -1.0);
  EXPECT_DOUBLE_EQ(row.a[1], 1.0);
}

TEST(MarginRow, ThreeClassSymmetricCompetitors) {
  const auto st = fgn::margin_stats({Eigen::Vector3d(1.0, 0.0, 0.0), 0});
  const auto row = fgn::margin_row(st, 0, 3);
  EXPECT_DOUBLE_EQ(row.a[0], -1.0);
  EXPECT_NEAR(row.a[1], 0.5, 1e-15);
  EXPECT_NEAR(row.a[2], 0.5, 1e-15);
  EXPECT_LE(std::abs(row.a.sum()), 1e-12);
}

TEST(MarginRow, RejectsInconsistentShapes) {
  const auto st = fgn::margin_stats({Eigen::Vector3d(1.0, 0.0, 0.0), 0});
  EXPECT_THROW(fgn::margin_row(st, 0, 4), std::invalid_argument);
  EXPECT_THROW(fgn::margin_row(st, 3, 3), std::invalid_argument);
}

TEST(HeadParams, PackUnpackRoundTripAndSizeCheck) {
  Rng rng(206);
  const HeadParams params{fgn::test::random_matrix(rng, 3, 4),
                          fgn::test::random_vector(rng, 4)};
  const auto back = HeadParams::unpack(params.pack(), 3, 4);
  EXPECT_EQ((back.w - params.w).norm(), 0.0);
  EXPECT_EQ((back.bias - params.bias).norm(), 0.0);
  EXPECT_THROW(HeadParams::unpack(params.pack(), 4, 4), std::invalid_argument);
}

TEST(MarginRow, ScaledRowEqualsSoftmaxGradient) {
  Rng rng(207);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + static_cast<int>(rng() % 9);
    const auto logits = fgn::test::random_logits(rng, c, 2.5);
    const auto st = fgn::margin_stats(logits);
    const auto row = fgn::margin_row(st, logits.true_class, c);
    Vector py = fgn::test::oracle_softmax(logits.values);
    py[logits.true_class] -= 1.0;
    EXPECT_LE((st.p_dagger * row.a - py).lpNorm<Eigen::Infinity>(), 1e-12);
    // |a|^2 = 1 + |rho|^2 = 2 - xi
    EXPECT_NEAR(row.a.squaredNorm(), 2.0 - st.xi, 1e-12);
  }
}

TEST(GramUnwhitened, SingleExampleClosedForm) {
  Matrix features(1, 2);
  features << 1.0, 0.0;
  Matrix rows(1, 2);
  rows << -1.0, 1.0;
  const Matrix g = fgn::gram_unwhitened(features, rows);
  EXPECT_DOUBLE_EQ(g(0, 0), 4.0);  // (1 + 1) * |a|^2
}

TEST(GramUnwhitened, OrthogonalFeaturesLeaveBiasTerm) {
  Matrix features(2, 2);
  features << 1.0, 0.0, 0.0, 1.0;
  Matrix rows(2, 3);
  rows << -1.0, 0.5, 0.5, -1.0, 0.5, 0.5;
  const Matrix g = fgn::gram_unwhitened(features, rows);
  EXPECT_NEAR(g(0, 1), 1.5, 1e-14);  // (0 + 1) * |a|^2 with |a|^2 = 1.5
}

TEST(GramUnwhitened, MatchesDenseJacobianProduct) {
  Rng rng(211);
  for (int trial = 0; trial < 30; ++trial) {
    const int b = 2 + static_cast<int>(rng() % 6);
    const int d_f = 1 + static_cast<int>(rng() % 4);
    const int c = 2 + static_cast<int>(rng() % 4);
    const auto batch = random_batch(rng, b, d_f, c);
    const auto eval = fgn::evaluate_batch(random_params(rng, d_f, c), batch);
    const Matrix j = dense_margin_jacobian(batch.features, eval.margin_rows);
    const Matrix g = fgn::gram_unwhitened(batch.features, eval.margin_rows);
    EXPECT_LE(fgn::test::rel_frob_err(g, j * j.transpose()), 1e-10);
  }
}

TEST(GramWhitened, UniformQScalesUniformly) {
  Rng rng(213);
  const Matrix g = fgn::test::random_matrix(rng, 3, 3);
  const Matrix sym = g * g.transpose();
  const Matrix k = fgn::gram_whitened(sym, Vector::Constant(3, 0.25));
  EXPECT_LE(fgn::test::rel_frob_err(k, Matrix(sym / 4.0)), 1e-14);
}

TEST(GramWhitened, SingleExampleValue) {
  Matrix g(1, 1);
  g << 4.0;
  const Matrix k = fgn::gram_whitened(g, Vector::Constant(1, 0.25));
  EXPECT_DOUBLE_EQ(k(0, 0), 1.0);
}

TEST(GramWhitened, MatchesOperatorBuiltGram) {
  Rng rng(217);
  const int b = 5, d_f = 3, c = 4;
  const auto batch = random_batch(rng, b, d_f, c);
  const auto eval = fgn::evaluate_batch(random_params(rng, d_f, c), batch);
  const auto op = fgn::affine_row_operator(batch.features, eval.margin_rows);
  const Vector q_sqrt = eval.q.array().sqrt();

  // K columns through the operator route: K e_i = Q^{1/2} J J^T Q^{1/2} e_i.
  Matrix k_op(b, b);
  for (int i = 0; i < b; ++i) {
    Vector e = Vector::Zero(b);
    e[i] = 1.0;
    k_op.col(i) =
        q_sqrt.cwiseProduct(op.apply_J(op.apply_Jt(q_sqrt.cwiseProduct(e))));
  }
  const Matrix k_closed = fgn::gram_whitened(
      fgn::gram_unwhitened(batch.features, eval.margin_rows), eval.q);
  EXPECT_LE(fgn::test::rel_frob_err(k_closed, k_op), 1e-10);
  EXPECT_GE(fgn::test::min_eigenvalue(k_closed), -1e-10 * k_closed.trace());
}

TEST(AffineRowOperator, ZeroDirectionMapsToZero) {
  Rng rng(219);
  const auto batch = random_batch(rng, 4, 3, 3);
  const auto eval = fgn::evaluate_batch(random_params(rng, 3, 3), batch);
  const auto op = fgn::affine_row_operator(batch.features, eval.margin_rows);
  EXPECT_EQ(op.apply_J(Vector::Zero(op.dim())).norm(), 0.0);
  EXPECT_EQ(op.apply_Jt(Vector::Zero(4)).norm(), 0.0);
}

TEST(AffineRowOperator, MatchesDenseJacobian) {
  Rng rng(223);
  for (int trial = 0; trial < 20; ++trial) {
    const int b = 2 + static_cast<int>(rng() % 5);
    const int d_f = 1 + static_cast<int>(rng() % 4);
    const int c = 2 + static_cast<int>(rng() % 4);
    const auto batch = random_batch(rng, b, d_f, c);
    const auto eval = fgn::evaluate_batch(random_params(rng, d_f, c), batch);
    const Matrix j = dense_margin_jacobian(batch.features, eval.margin_rows);
    const auto op = fgn::affine_row_operator(batch.features, eval.margin_rows);

    const Vector v = fgn::test::random_vector(rng, op.dim());
    EXPECT_LE((op.apply_J(v) - j * v).lpNorm<Eigen::Infinity>(), 1e-12);
    const Vector u = fgn::test::random_vector(rng, b);
    EXPECT_LE((op.apply_Jt(u) - j.transpose() * u).lpNorm<Eigen::Infinity>(),
              1e-12);
  }
}

TEST(AffineRowOperator, AdjointProbes) {
  Rng rng(227);
  const auto batch = random_batch(rng, 8, 5, 6);
  const auto eval = fgn::evaluate_batch(random_params(rng, 5, 6), batch);
  const auto op = fgn::affine_row_operator(batch.features, eval.margin_rows);
  for (int probe = 0; probe < 100; ++probe) {
    const Vector v = fgn::test::random_vector(rng, op.dim());
    const Vector u = fgn::test::random_vector(rng, 8);
    const double lhs = op.apply_J(v).dot(u);
    const double rhs = v.dot(op.apply_Jt(u));
    EXPECT_LE(std::abs(lhs - rhs),
              1e-10 * (1.0 + std::abs(lhs) + std::abs(rhs)));
  }
}

TEST(BatchSystem, GramAndOperatorRoutesGiveSameDirection) {
  Rng rng(229);
  const int b = 6, d_f = 4, c = 5;
  const auto batch = random_batch(rng, b, d_f, c);
  const auto eval = fgn::evaluate_batch(random_params(rng, d_f, c), batch);

  auto gram_sys = fgn::make_batch_system(batch.features, eval, 0.5, 512);
  ASSERT_TRUE(gram_sys.whitened_gram.has_value());
  auto op_sys = fgn::make_batch_system(batch.features, eval, 0.5, 0);
  ASSERT_FALSE(op_sys.whitened_gram.has_value());

  const auto rep_gram = fgn::cg_solve(gram_sys, 1e-13, b);
  const auto rep_op = fgn::cg_solve(op_sys, 1e-13, b);
  const Vector d_gram = fgn::backproject(gram_sys, rep_gram.u);
  const Vector d_op = fgn::backproject(op_sys, rep_op.u);
  EXPECT_LE((d_gram - d_op).norm(), 1e-8 * (1.0 + d_op.norm()));
}

TEST(AffineHead, FiniteDifferenceHessianMatchesBatchGgn) {
  Rng rng(233);
  const int b = 3, d_f = 2, c = 3;
  const auto batch = random_batch(rng, b, d_f, c);
  const auto params = random_params(rng, d_f, c);
  const Vector w0 = params.pack();

  const auto batch_loss = [&](const Vector& wvec) {
    const HeadParams p = HeadParams::unpack(wvec, d_f, c);
    const Matrix z = fgn::affine_logits(p, batch);
    double acc = 0.0;
    for (int i = 0; i < b; ++i)
      acc += fgn::test::oracle_nll(z.row(i).transpose(), batch.labels[i]);
    return acc / b;
  };

  // Batch GGN assembled from per-example dense pieces.
  const Matrix z = fgn::affine_logits(params, batch);
  Matrix ggn = Matrix::Zero(w0.size(), w0.size());
  for (int i = 0; i < b; ++i) {
    Matrix jz = Matrix::Zero(c, w0.size());
    for (int cls = 0; cls < c; ++cls) {
      for (int k = 0; k < d_f; ++k) jz(cls, cls * d_f + k) = batch.features(i, k);
      jz(cls, d_f * c + cls) = 1.0;
    }
    ggn += fgn::ggn_dense(jz, fgn::test::oracle_softmax(z.row(i).transpose()));
  }
  ggn /= b;

  const Matrix fd = fgn::finite_difference_hessian(batch_loss, w0, 1e-4);
  EXPECT_LE(fgn::test::rel_frob_err(fd, ggn), 1e-5);
}

TEST(Standardizer, NormalizesTrainSplit) {
  Rng rng(239);
  FeatureBatch train = random_batch(rng, 50, 4, 3);
  train.features.col(2).array() = 7.0;  // constant coordinate
  train.features.col(0).array() *= 12.0;
  train.features.col(0).array() += 3.0;
  FeatureBatch other = random_batch(rng, 10, 4, 3);

  const auto st = fgn::fit_standardizer(train.features);
  st.apply(train);
  st.apply(other);
  EXPECT_LE(train.features.col(0).mean(), 1e-12);
  EXPECT_NEAR(train.features.col(0).array().square().mean(), 1.0, 1e-10);
  EXPECT_EQ(train.features.col(2).norm(), 0.0);  // constant maps to zero
  EXPECT_TRUE(other.features.allFinite());
}

}  // namespace
