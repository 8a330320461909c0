// SPDX-License-Identifier: Apache-2.0
//
// Training-step layer for the affine head. Three methods share one step
// interface:
//
//   fgn  — damped true-vs-rest curvature step solved in the whitened
//          b-dimensional row space by CG (no warm start), then backprojected.
//   sgn  — damped full softmax Gauss-Newton step solved by parameter-space
//          CG with matrix-free curvature products, warm-started from the
//          previous direction.
//   adam — bias-corrected first-order baseline.
//
// All three use the exact mini-batch softmax gradient; the methods differ
// only in the curvature model behind the linear solve.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fgn/affine_head.hpp"
#include "fgn/margin.hpp"
#include "fgn/rowspace.hpp"

namespace fgn {

enum class Method { kFgn, kSgn, kAdam };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kFgn: return "fgn";
    case Method::kSgn: return "sgn";
    case Method::kAdam: return "adam";
  }
  return "unknown";
}

inline Method method_from_name(const std::string& name) {
  if (name == "fgn") return Method::kFgn;
  if (name == "sgn") return Method::kSgn;
  if (name == "adam") return Method::kAdam;
  throw std::invalid_argument("unknown method: " + name);
}

struct OptimizerConfig {
  Method method = Method::kFgn;
  double learning_rate = 0.1;
  double damping = 1.0;
  double cg_tol = 1e-5;
  int cg_max_iter = 5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  // Batches up to this size solve the whitened system through the explicit
  // row Gram; larger batches go through the matrix-free operator.
  int gram_threshold = 512;
  bool sgn_warm_start = true;
  // When set, FGN steps also estimate the operator norm so the solve report
  // carries the residual-transfer bound. Off by default: the core step does
  // not need it, the estimate costs extra operator work per step, and on
  // the operator path it would break the margin-map product budget.
  bool residual_diagnostics = false;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw std::invalid_argument("OptimizerConfig: learning_rate must be positive");
    if (method != Method::kAdam && !(damping > 0.0))
      throw std::invalid_argument("OptimizerConfig: damping must be positive");
    if (cg_max_iter < 1)
      throw std::invalid_argument("OptimizerConfig: cg_max_iter must be >= 1");
    if (!(cg_tol >= 0.0))
      throw std::invalid_argument("OptimizerConfig: cg_tol must be nonnegative");
  }
};

struct StepOpCounts {
  std::int64_t apply_j = 0;   // margin-map (or logit-map, for sgn) forward products
  std::int64_t apply_jt = 0;  // transpose products
  std::int64_t forwards = 0;  // batched logit evaluations
};

struct StepResult {
  HeadParams new_params;
  double batch_loss = 0.0;
  double grad_norm = 0.0;
  std::optional<SolveReport> solve;
  StepOpCounts op_counts;
};

struct AdamState {
  Vector m;
  Vector v;
  std::int64_t t = 0;
};

struct SgnState {
  Vector warm_direction;  // previous parameter-space direction, never reset
};

namespace detail {

// Decorrelates the parameter-initialization stream from data-generation
// streams that may share the same user-facing seed (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Exact mini-batch softmax gradient (1/b) sum_i Jz_i^T (p_i - y_i), packed.
inline Vector softmax_gradient(const FeatureBatch& batch, const BatchEval& eval) {
  const int b = batch.size();
  const int d_f = batch.feature_dim();
  const int c = batch.num_classes;
  Matrix py = eval.probs;
  for (int i = 0; i < b; ++i) py(i, batch.labels[i]) -= 1.0;
  py /= static_cast<double>(b);
  Vector g(d_f * c + c);
  Eigen::Map<Matrix>(g.data(), d_f, c).noalias() = batch.features.transpose() * py;
  g.tail(c) = py.colwise().sum();
  return g;
}

// Same gradient through the margin route (1/b) J^T r with r_i = p_dagger_i.
inline Vector margin_gradient(const FeatureBatch& batch, const BatchEval& eval) {
  const int b = batch.size();
  const int d_f = batch.feature_dim();
  const int c = batch.num_classes;
  const Matrix weighted = eval.p_dagger.asDiagonal() * eval.margin_rows;
  Vector g(d_f * c + c);
  Eigen::Map<Matrix>(g.data(), d_f, c).noalias() =
      batch.features.transpose() * weighted / b;
  g.tail(c) = eval.margin_rows.transpose() * eval.p_dagger / b;
  return g;
}

inline HeadParams apply_update(const HeadParams& params, const Vector& update) {
  HeadParams next = params;
  const int d_f = params.feature_dim();
  const int c = params.num_classes();
  next.w += Eigen::Map<const Matrix>(update.data(), d_f, c);
  next.bias += update.tail(c);
  return next;
}

inline void check_finite_loss(double batch_loss) {
  if (!std::isfinite(batch_loss))
    throw std::runtime_error("optimizer step: non-finite batch loss");
}

}  // namespace detail

inline StepResult fgn_step(const HeadParams& params, const FeatureBatch& batch,
                           const OptimizerConfig& config) {
  config.validate();
  const BatchEval eval = evaluate_batch(params, batch);
  detail::check_finite_loss(eval.mean_loss);

  StepResult result;
  result.batch_loss = eval.mean_loss;
  result.op_counts.forwards = 1;
  result.grad_norm = detail::margin_gradient(batch, eval).norm();

  BatchSystem system = make_batch_system(batch.features, eval, config.damping,
                                         config.gram_threshold);
  CgOptions opts;
  opts.tol = config.cg_tol;
  opts.max_iter = config.cg_max_iter;
  opts.compute_residual_bound = config.residual_diagnostics;
  SolveReport report = cg_solve(system, opts);
  report.direction = backproject(system, report.u);

  result.op_counts.apply_j = report.solve_counts.apply_j;
  result.op_counts.apply_jt = report.solve_counts.apply_jt + 1;
  result.new_params = detail::apply_update(
      params, config.learning_rate * report.direction);
  result.solve = std::move(report);
  return result;
}

inline StepResult sgn_step(const HeadParams& params, const FeatureBatch& batch,
                           SgnState& state, const OptimizerConfig& config) {
  config.validate();
  const BatchEval eval = evaluate_batch(params, batch);
  detail::check_finite_loss(eval.mean_loss);

  const int b = batch.size();
  const int d_f = batch.feature_dim();
  const int c = batch.num_classes;
  const int dim = d_f * c + c;
  const Vector g = detail::softmax_gradient(batch, eval);

  StepResult result;
  result.batch_loss = eval.mean_loss;
  result.grad_norm = g.norm();
  result.op_counts.forwards = 1;

  // Damped full softmax Gauss-Newton product
  // v -> (1/b) sum_i Jz_i^T (diag(p_i) - p_i p_i^T) Jz_i v + lambda v,
  // evaluated batched: one logit-map forward, a rowwise covariance apply,
  // one logit-map transpose.
  const auto apply_damped_ggn = [&](const Vector& v) -> Vector {
    const Eigen::Map<const Matrix> w_dir(v.data(), d_f, c);
    Matrix t = batch.features * w_dir;
    t.rowwise() += v.tail(c).transpose();
    ++result.op_counts.apply_j;

    Matrix m = eval.probs.cwiseProduct(t);
    const Vector row_dot = m.rowwise().sum();
    m -= row_dot.asDiagonal() * eval.probs;

    Vector out(dim);
    Eigen::Map<Matrix>(out.data(), d_f, c).noalias() =
        batch.features.transpose() * m / b;
    out.tail(c) = m.colwise().sum() / b;
    ++result.op_counts.apply_jt;
    out += config.damping * v;
    return out;
  };

  // CG on (H + lambda I) d = -g; stopping rule is relative to |g|.
  Vector d = Vector::Zero(dim);
  const double g_norm = g.norm();
  if (g_norm > 0.0) {
    if (config.sgn_warm_start && state.warm_direction.size() == dim)
      d = state.warm_direction;
    Vector residual = -g;
    if (d.squaredNorm() > 0.0) residual -= apply_damped_ggn(d);
    Vector p = residual;
    double rr = residual.squaredNorm();
    const double stop = config.cg_tol * g_norm;
    for (int k = 0; k < config.cg_max_iter && std::sqrt(rr) > stop; ++k) {
      const Vector ap = apply_damped_ggn(p);
      const double curvature = p.dot(ap);
      if (!std::isfinite(curvature) || curvature <= 0.0)
        throw std::runtime_error("CG divergence");
      const double alpha = rr / curvature;
      d += alpha * p;
      residual -= alpha * ap;
      const double rr_next = residual.squaredNorm();
      if (!std::isfinite(rr_next)) throw std::runtime_error("CG divergence");
      p = residual + (rr_next / rr) * p;
      rr = rr_next;
    }
  }

  state.warm_direction = d;
  result.new_params = detail::apply_update(params, config.learning_rate * d);
  return result;
}

inline StepResult adam_step(const HeadParams& params, const FeatureBatch& batch,
                            AdamState& state, const OptimizerConfig& config) {
  config.validate();
  const BatchEval eval = evaluate_batch(params, batch);
  detail::check_finite_loss(eval.mean_loss);

  const Vector g = detail::softmax_gradient(batch, eval);
  const int dim = static_cast<int>(g.size());
  if (state.m.size() != dim) {
    state.m = Vector::Zero(dim);
    state.v = Vector::Zero(dim);
    state.t = 0;
  }
  state.t += 1;
  state.m = config.adam_beta1 * state.m + (1.0 - config.adam_beta1) * g;
  state.v = config.adam_beta2 * state.v +
            (1.0 - config.adam_beta2) * g.cwiseProduct(g);
  const double bias1 = 1.0 - std::pow(config.adam_beta1, state.t);
  const double bias2 = 1.0 - std::pow(config.adam_beta2, state.t);
  const Vector m_hat = state.m / bias1;
  const Vector v_hat = state.v / bias2;
  const Vector update = -config.learning_rate *
                        (m_hat.array() / (v_hat.array().sqrt() + config.adam_eps))
                            .matrix();

  StepResult result;
  result.batch_loss = eval.mean_loss;
  result.grad_norm = g.norm();
  result.op_counts.forwards = 1;
  result.op_counts.apply_jt = 1;  // the gradient transpose product
  result.new_params = detail::apply_update(params, update);
  return result;
}

// -------------------------------------------------------------------------
// Training loop: one-time shuffle, static batches, wrap-around padding.

struct TrainSchedule {
  int epochs = 150;
  int batch_size = 128;
  int eval_cadence = 100;  // evaluate every this many steps

  void validate() const {
    if (epochs < 1 || batch_size < 1 || eval_cadence < 1)
      throw std::invalid_argument("TrainSchedule: all fields must be positive");
  }
};

struct EvalPoint {
  std::int64_t step = 0;
  double wall_seconds = 0.0;  // cumulative step time, excludes evaluation/IO
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double eval_accuracy = 0.0;
};

struct TrainingLog {
  std::uint64_t seed = 0;
  std::vector<EvalPoint> points;
  HeadParams final_params;
  StepOpCounts total_ops;
};

// Static batch windows over positions 0..n-1; the final partial window wraps
// around to the start. n=10, batch=4 gives [0..3], [4..7], [8,9,0,1].
inline std::vector<std::vector<int>> batch_plan(int n, int batch_size) {
  if (n < 1 || batch_size < 1)
    throw std::invalid_argument("batch_plan: need positive sizes");
  const int num_batches = (n + batch_size - 1) / batch_size;
  std::vector<std::vector<int>> plan(num_batches);
  for (int k = 0; k < num_batches; ++k) {
    plan[k].resize(batch_size);
    for (int j = 0; j < batch_size; ++j)
      plan[k][j] = (k * batch_size + j) % n;
  }
  return plan;
}

// Mean loss and top-1 accuracy over a full split.
inline std::pair<double, double> evaluate_split(const HeadParams& params,
                                                const FeatureBatch& split) {
  const Matrix z = affine_logits(params, split);
  double loss_sum = 0.0;
  int correct = 0;
  for (int i = 0; i < split.size(); ++i) {
    const Vector row = z.row(i).transpose();
    loss_sum += loss({row, split.labels[i]});
    Eigen::Index argmax = 0;
    row.maxCoeff(&argmax);
    if (static_cast<int>(argmax) == split.labels[i]) ++correct;
  }
  return {loss_sum / split.size(),
          static_cast<double>(correct) / split.size()};
}

inline HeadParams init_head(int d_f, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  HeadParams params = HeadParams::zero(d_f, c);
  const double scale = d_f > 0 ? 1.0 / std::sqrt(static_cast<double>(d_f)) : 0.0;
  for (int j = 0; j < c; ++j)
    for (int k = 0; k < d_f; ++k) params.w(k, j) = scale * dist(rng);
  return params;
}

inline TrainingLog train(const FeatureBatch& train_split,
                         const FeatureBatch& eval_split,
                         const OptimizerConfig& config,
                         const TrainSchedule& schedule) {
  train_split.validate();
  eval_split.validate();
  schedule.validate();
  config.validate();
  if (train_split.num_classes != eval_split.num_classes ||
      train_split.feature_dim() != eval_split.feature_dim())
    throw std::invalid_argument("train: split shape mismatch");

  const int n = train_split.size();
  const int d_f = train_split.feature_dim();
  const int c = train_split.num_classes;

  std::mt19937_64 rng(detail::mix_seed(config.seed));
  HeadParams params = init_head(d_f, c, rng);

  // One-time shuffle; batches stay fixed across epochs.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  const auto plan = batch_plan(n, schedule.batch_size);
  std::vector<FeatureBatch> batches(plan.size());
  for (size_t k = 0; k < plan.size(); ++k) {
    FeatureBatch& b = batches[k];
    const auto& window = plan[k];
    b.features.resize(window.size(), d_f);
    b.labels.resize(window.size());
    b.num_classes = c;
    for (size_t j = 0; j < window.size(); ++j) {
      const int src = order[window[j]];
      b.features.row(j) = train_split.features.row(src);
      b.labels[static_cast<int>(j)] = train_split.labels[src];
    }
  }

  TrainingLog log;
  log.seed = config.seed;

  AdamState adam_state;
  SgnState sgn_state;
  double wall = 0.0;
  std::int64_t step = 0;
  const std::int64_t total_steps =
      static_cast<std::int64_t>(schedule.epochs) * plan.size();

  const auto record = [&]() {
    const auto [train_loss, train_acc] = evaluate_split(params, train_split);
    (void)train_acc;
    const auto [eval_loss, eval_acc] = evaluate_split(params, eval_split);
    log.points.push_back({step, wall, train_loss, eval_loss, eval_acc});
  };
  record();  // baseline before the first step

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    for (const auto& batch : batches) {
      const auto t0 = std::chrono::steady_clock::now();
      StepResult result;
      switch (config.method) {
        case Method::kFgn: result = fgn_step(params, batch, config); break;
        case Method::kSgn: result = sgn_step(params, batch, sgn_state, config); break;
        case Method::kAdam: result = adam_step(params, batch, adam_state, config); break;
      }
      const auto t1 = std::chrono::steady_clock::now();
      wall += std::chrono::duration<double>(t1 - t0).count();
      params = std::move(result.new_params);
      log.total_ops.apply_j += result.op_counts.apply_j;
      log.total_ops.apply_jt += result.op_counts.apply_jt;
      log.total_ops.forwards += result.op_counts.forwards;
      ++step;
      if (step % schedule.eval_cadence == 0 || step == total_steps) record();
    }
  }
  log.final_params = std::move(params);
  return log;
}

}  // namespace fgn
