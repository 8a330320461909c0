// SPDX-License-Identifier: Apache-2.0
//
// Mechanism sweeps and the head-training benchmark harness.
//
//   trace_sweep          — closed-form retained/dropped/full output-space
//                          traces over a competitor-dispersion grid.
//   step_ratio_sweep     — two-dimensional linear-logit construction that
//                          scores the damped true-vs-rest step under the
//                          full-curvature quadratic model.
//   curvature_cost_sweep — per-step wall time and exact curvature-path flop
//                          counts for adam/fgn/sgn as the class count grows.
//   head_benchmark       — multi-seed training runs with traces interpolated
//                          onto a shared wall-time grid plus time-to-threshold
//                          readouts.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fgn/dense_curvature.hpp"
#include "fgn/feature_cache.hpp"
#include "fgn/optimizers.hpp"

namespace fgn {

// ------------------------------------------------------------------ traces

struct TraceSweepRecord {
  double xi = 0.0;
  double tau_ret = 0.0;
  double tau_drop = 0.0;
  double tau_full = 0.0;
};

// Evenly spaced grid over the admissible dispersion range [0, 1 - 1/(C-1)].
inline std::vector<double> uniform_xi_grid(int num_classes, int points) {
  if (num_classes < 3 || points < 2)
    throw std::invalid_argument("uniform_xi_grid: need C >= 3 and >= 2 points");
  const double xi_max = 1.0 - 1.0 / (num_classes - 1);
  std::vector<double> grid(points);
  for (int i = 0; i < points; ++i)
    grid[i] = xi_max * static_cast<double>(i) / (points - 1);
  return grid;
}

inline std::vector<TraceSweepRecord> trace_sweep(
    double p_star, int num_classes, const std::vector<double>& xi_grid) {
  if (num_classes < 2)
    throw std::invalid_argument("trace_sweep: need at least two classes");
  const double xi_max = 1.0 - 1.0 / (num_classes - 1);
  std::vector<TraceSweepRecord> records;
  records.reserve(xi_grid.size());
  for (double xi : xi_grid) {
    if (!(xi >= 0.0 && xi <= xi_max))
      throw std::invalid_argument("trace_sweep: xi outside the admissible range");
    const TraceTriple t = trace_decomposition(p_star, xi);
    records.push_back({xi, t.tau_ret, t.tau_drop, t.tau_full});
  }
  return records;
}

// -------------------------------------------------------------- step ratio

struct StepRatioConfig {
  int num_classes = 10;
  double p_star = 0.70;
  double eta = 1.25;
  double beta = 3.0;
  std::vector<double> alpha_grid;                    // blend weights in (0,1]
  std::vector<double> damping_scales = {0.01, 0.1, 1.0};

  static std::vector<double> default_alpha_grid(int points = 40) {
    std::vector<double> grid(points);
    for (int i = 0; i < points; ++i)
      grid[i] = static_cast<double>(i + 1) / points;
    return grid;
  }
};

struct StepRatioRecord {
  double alpha = 0.0;
  double xi = 0.0;
  double damping_scale = 0.0;
  double ratio = 0.0;
};

// Deterministic competitor slopes: C-1 points uniformly spaced on [0,1],
// then centered to mean zero.
inline Vector centered_uniform_slopes(int count) {
  Vector t(count);
  if (count == 1) {
    t[0] = 0.0;
    return t;
  }
  for (int j = 0; j < count; ++j)
    t[j] = static_cast<double>(j) / (count - 1);
  t.array() -= t.mean();
  return t;
}

inline std::vector<StepRatioRecord> step_ratio_sweep(const StepRatioConfig& config) {
  const int c = config.num_classes;
  if (c < 2) throw std::invalid_argument("step_ratio_sweep: need C >= 2");
  if (!(config.p_star > 0.0 && config.p_star < 1.0))
    throw std::invalid_argument("step_ratio_sweep: p_star must lie in (0,1)");
  const std::vector<double> alphas =
      config.alpha_grid.empty() ? StepRatioConfig::default_alpha_grid()
                                : config.alpha_grid;
  for (double scale : config.damping_scales)
    if (!(scale > 0.0))
      throw std::invalid_argument("step_ratio_sweep: damping scales must be positive");
  const int m = c - 1;
  const double p_star = config.p_star;
  const double p_dagger = 1.0 - p_star;

  // Logit Jacobian rows in the reordered (true, competitors) coordinates.
  const Vector slopes = centered_uniform_slopes(m);
  Eigen::Vector2d a_star(-1.0, config.eta);
  Matrix a_comp(m, 2);
  for (int j = 0; j < m; ++j) {
    a_comp(j, 0) = 1.0;
    a_comp(j, 1) = config.beta * slopes[j];
  }

  // Damping reference: trace of the retained term at zero dispersion,
  // where the competitor blend is fully concentrated on the first row.
  const Eigen::Vector2d concentrated_dir = a_comp.row(0).transpose() - a_star;
  const double trace_ref = p_star * p_dagger * concentrated_dir.squaredNorm();

  std::vector<StepRatioRecord> records;
  records.reserve(alphas.size() * config.damping_scales.size());
  for (double alpha : alphas) {
    if (!(alpha > 0.0 && alpha <= 1.0))
      throw std::invalid_argument("step_ratio_sweep: alpha must lie in (0,1]");
    Vector rho = Vector::Constant(m, alpha / m);
    rho[0] += 1.0 - alpha;
    const double xi = 1.0 - rho.squaredNorm();

    Vector p(c);
    p[0] = p_star;
    p.tail(m) = p_dagger * rho;
    Vector p_minus_y = p;
    p_minus_y[0] -= 1.0;

    Matrix a_full(c, 2);
    a_full.row(0) = a_star.transpose();
    a_full.bottomRows(m) = a_comp;

    const Eigen::Vector2d g = a_full.transpose() * p_minus_y;
    const Matrix h_ggn =
        a_full.transpose() * softmax_covariance(p) * a_full;
    const Eigen::Vector2d margin_dir =
        a_comp.transpose() * rho - a_star;
    const Matrix h_fgn =
        p_star * p_dagger * (margin_dir * margin_dir.transpose());

    for (double scale : config.damping_scales) {
      const double lambda = scale * trace_ref / 2.0;
      const Matrix eye = Matrix::Identity(2, 2);
      const Eigen::Vector2d d_ggn =
          (h_ggn + lambda * eye).ldlt().solve(-g);
      const Eigen::Vector2d d_fgn =
          (h_fgn + lambda * eye).ldlt().solve(-g);
      const auto decrease = [&](const Eigen::Vector2d& d) {
        return -(g.dot(d) + 0.5 * d.dot(h_ggn * d) +
                 0.5 * lambda * d.squaredNorm());
      };
      records.push_back({alpha, xi, scale, decrease(d_fgn) / decrease(d_ggn)});
    }
  }
  return records;
}

// -------------------------------------------------------------- cost sweep

struct CostSweepConfig {
  std::vector<int> class_grid = {2,   4,   8,    16,   32,   64,
                                 128, 256, 512,  1024, 2048, 4096};
  int feature_dim = 2048;
  int batch_size = 512;
  int n_examples = 32768;
  int warmup_steps = 128;
  int timed_steps = 640;
  double damping = 1.0;
  int cg_max_iter = 5;
  double adam_lr = 3e-4;
  double second_order_lr = 0.1;
  std::uint64_t seed = 0;
};

struct TimingRecord {
  int num_classes = 0;
  std::string method;
  double mean_step_seconds = 0.0;
  double std_step_seconds = 0.0;
  std::uint64_t flops_curvature = 0;  // per step, curvature-product path only
  std::int64_t apply_j = 0;           // per step
  std::int64_t apply_jt = 0;          // per step
};

// Flop audit of one whitened row-space operator application on the explicit
// Gram path: a b x b matvec (2b^2 - b) plus the damping scale-and-add (2b).
// Independent of both C and d_f.
inline std::uint64_t fgn_curvature_flops_per_iteration(int batch) {
  const std::uint64_t b = static_cast<std::uint64_t>(batch);
  return 2 * b * b + b;
}

// Flop audit of one damped full-softmax curvature product as implemented in
// sgn_step: logit-map forward (HV + 1c^T), the rowwise softmax covariance
// application, the logit-map transpose, batch averaging, and the damping
// term. Affine in C with slope proportional to b*d_f.
inline std::uint64_t sgn_curvature_flops_per_iteration(int batch,
                                                       int feature_dim,
                                                       int num_classes) {
  const std::uint64_t b = batch, d = feature_dim, c = num_classes;
  std::uint64_t flops = 0;
  flops += b * c * (2 * d - 1);  // T = H * V
  flops += b * c;                // T += 1 c^T
  flops += b * c;                // m = P .* T
  flops += b * (c - 1);          // row_dot = rowwise sum
  flops += 2 * b * c;            // m -= row_dot * P
  flops += d * c * (2 * b - 1);  // H^T m
  flops += d * c;                // / b
  flops += c * (b - 1) + c;      // column sums, / b
  flops += 2 * (d * c + c);      // += lambda v
  return flops;
}

inline std::vector<TimingRecord> curvature_cost_sweep(const CostSweepConfig& config) {
  if (config.class_grid.empty() || config.timed_steps < 1 ||
      config.warmup_steps < 0)
    throw std::invalid_argument("curvature_cost_sweep: invalid configuration");
  if (config.batch_size > config.n_examples)
    throw std::invalid_argument("curvature_cost_sweep: batch larger than dataset");

  std::vector<TimingRecord> records;
  for (int c : config.class_grid) {
    const FeatureBatch data = make_gaussian_features(
        config.n_examples, config.feature_dim, c, config.seed);
    const auto plan = batch_plan(config.n_examples, config.batch_size);

    for (Method method : {Method::kAdam, Method::kFgn, Method::kSgn}) {
      OptimizerConfig cfg;
      cfg.method = method;
      cfg.learning_rate =
          method == Method::kAdam ? config.adam_lr : config.second_order_lr;
      cfg.damping = config.damping;
      cfg.cg_max_iter = config.cg_max_iter;
      cfg.cg_tol = 0.0;  // spend the full iteration budget, matched across methods
      cfg.seed = config.seed;

      std::mt19937_64 rng(detail::mix_seed(config.seed));
      HeadParams params = init_head(config.feature_dim, c, rng);
      AdamState adam_state;
      SgnState sgn_state;

      TimingRecord record;
      record.num_classes = c;
      record.method = method_name(method);

      std::vector<double> times;
      times.reserve(config.timed_steps);
      const int total = config.warmup_steps + config.timed_steps;
      FeatureBatch batch;
      batch.num_classes = c;
      for (int step = 0; step < total; ++step) {
        const auto& window = plan[step % plan.size()];
        batch.features.resize(static_cast<Eigen::Index>(window.size()),
                              config.feature_dim);
        batch.labels.resize(static_cast<Eigen::Index>(window.size()));
        for (size_t j = 0; j < window.size(); ++j) {
          batch.features.row(static_cast<Eigen::Index>(j)) =
              data.features.row(window[j]);
          batch.labels[static_cast<Eigen::Index>(j)] = data.labels[window[j]];
        }

        const auto t0 = std::chrono::steady_clock::now();
        StepResult result;
        switch (method) {
          case Method::kFgn: result = fgn_step(params, batch, cfg); break;
          case Method::kSgn: result = sgn_step(params, batch, sgn_state, cfg); break;
          case Method::kAdam: result = adam_step(params, batch, adam_state, cfg); break;
        }
        const auto t1 = std::chrono::steady_clock::now();
        params = std::move(result.new_params);

        if (step >= config.warmup_steps) {
          times.push_back(std::chrono::duration<double>(t1 - t0).count());
          record.apply_j = result.op_counts.apply_j;
          record.apply_jt = result.op_counts.apply_jt;
          switch (method) {
            case Method::kFgn:
              record.flops_curvature =
                  static_cast<std::uint64_t>(result.solve->iterations) *
                  fgn_curvature_flops_per_iteration(config.batch_size);
              break;
            case Method::kSgn:
              record.flops_curvature =
                  static_cast<std::uint64_t>(result.op_counts.apply_j) *
                  sgn_curvature_flops_per_iteration(config.batch_size,
                                                    config.feature_dim, c);
              break;
            case Method::kAdam:
              record.flops_curvature = 0;
              break;
          }
        }
      }

      const double mean =
          std::accumulate(times.begin(), times.end(), 0.0) / times.size();
      double var = 0.0;
      for (double t : times) var += (t - mean) * (t - mean);
      record.mean_step_seconds = mean;
      record.std_step_seconds = std::sqrt(var / times.size());
      records.push_back(std::move(record));
    }
  }
  return records;
}

// --------------------------------------------------------------- benchmark

struct BenchmarkConfig {
  std::vector<std::pair<std::string, OptimizerConfig>> methods;
  int seeds = 10;
  TrainSchedule schedule;
  int grid_points = 200;
  std::vector<double> accuracy_thresholds = {0.42, 0.43, 0.44};
};

struct AggregateCurve {
  std::string method;
  std::vector<double> grid_seconds;
  std::vector<double> mean_train_loss, std_train_loss;
  std::vector<double> mean_eval_loss, std_eval_loss;
  std::vector<double> mean_eval_accuracy, std_eval_accuracy;
};

struct ThresholdRecord {
  std::string method;
  double threshold = 0.0;
  bool reached = false;
  double time_seconds = 0.0;  // meaningful only when reached
};

struct BenchmarkResult {
  std::map<std::string, std::vector<TrainingLog>> logs;
  std::vector<AggregateCurve> curves;
  std::vector<ThresholdRecord> thresholds;
};

// Piecewise-linear interpolation onto a grid that must not extend past the
// trace (no extrapolation). Wall times are expected non-decreasing.
inline std::vector<double> interp_onto_grid(const std::vector<double>& wall,
                                            const std::vector<double>& values,
                                            const std::vector<double>& grid) {
  if (wall.size() != values.size() || wall.empty())
    throw std::invalid_argument("interp_onto_grid: bad trace");
  for (size_t i = 1; i < wall.size(); ++i)
    if (wall[i] < wall[i - 1])
      throw std::invalid_argument("interp_onto_grid: wall times not monotone");
  std::vector<double> out;
  out.reserve(grid.size());
  for (double t : grid) {
    if (t < wall.front() || t > wall.back())
      throw std::invalid_argument("interp_onto_grid: grid point outside trace");
    const auto hi = std::lower_bound(wall.begin(), wall.end(), t);
    if (hi == wall.begin()) {
      out.push_back(values.front());
      continue;
    }
    const size_t j = static_cast<size_t>(hi - wall.begin());
    if (j == wall.size() || wall[j - 1] == t) {
      out.push_back(values[j - 1]);
      continue;
    }
    const double w = (t - wall[j - 1]) / (wall[j] - wall[j - 1]);
    out.push_back((1.0 - w) * values[j - 1] + w * values[j]);
  }
  return out;
}

inline BenchmarkResult head_benchmark(const FeatureBatch& train_split,
                                      const FeatureBatch& eval_split,
                                      const BenchmarkConfig& config) {
  if (config.methods.empty() || config.seeds < 1 || config.grid_points < 2)
    throw std::invalid_argument("head_benchmark: invalid configuration");

  BenchmarkResult result;
  for (const auto& [name, base_cfg] : config.methods) {
    auto& runs = result.logs[name];
    for (int seed = 0; seed < config.seeds; ++seed) {
      OptimizerConfig cfg = base_cfg;
      cfg.seed = base_cfg.seed + static_cast<std::uint64_t>(seed);
      runs.push_back(train(train_split, eval_split, cfg, config.schedule));
    }
  }

  for (const auto& [name, base_cfg] : config.methods) {
    (void)base_cfg;
    const auto& runs = result.logs.at(name);

    // Shared grid ends at the earliest final eval time across seeds, so no
    // run is ever extrapolated.
    double horizon = std::numeric_limits<double>::infinity();
    for (const auto& log : runs)
      horizon = std::min(horizon, log.points.back().wall_seconds);

    AggregateCurve curve;
    curve.method = name;
    curve.grid_seconds.resize(config.grid_points);
    for (int i = 0; i < config.grid_points; ++i)
      curve.grid_seconds[i] =
          horizon * static_cast<double>(i) / (config.grid_points - 1);
    // Pin the endpoints exactly so rounding never pushes the grid past the
    // shortest run.
    curve.grid_seconds.front() = 0.0;
    curve.grid_seconds.back() = horizon;

    std::vector<std::vector<double>> train_loss, eval_loss, eval_acc;
    for (const auto& log : runs) {
      std::vector<double> wall, tl, el, ea;
      for (const auto& point : log.points) {
        wall.push_back(point.wall_seconds);
        tl.push_back(point.train_loss);
        el.push_back(point.eval_loss);
        ea.push_back(point.eval_accuracy);
      }
      train_loss.push_back(interp_onto_grid(wall, tl, curve.grid_seconds));
      eval_loss.push_back(interp_onto_grid(wall, el, curve.grid_seconds));
      eval_acc.push_back(interp_onto_grid(wall, ea, curve.grid_seconds));
    }

    const auto mean_std = [&](const std::vector<std::vector<double>>& per_seed,
                              std::vector<double>& mean_out,
                              std::vector<double>& std_out) {
      const size_t s = per_seed.size();
      mean_out.resize(config.grid_points);
      std_out.resize(config.grid_points);
      for (int i = 0; i < config.grid_points; ++i) {
        double mean = 0.0;
        for (const auto& run : per_seed) mean += run[i];
        mean /= s;
        double var = 0.0;
        for (const auto& run : per_seed)
          var += (run[i] - mean) * (run[i] - mean);
        mean_out[i] = mean;
        std_out[i] = std::sqrt(var / s);
      }
    };
    mean_std(train_loss, curve.mean_train_loss, curve.std_train_loss);
    mean_std(eval_loss, curve.mean_eval_loss, curve.std_eval_loss);
    mean_std(eval_acc, curve.mean_eval_accuracy, curve.std_eval_accuracy);

    for (double threshold : config.accuracy_thresholds) {
      ThresholdRecord record;
      record.method = name;
      record.threshold = threshold;
      for (int i = 0; i < config.grid_points; ++i) {
        if (curve.mean_eval_accuracy[i] >= threshold) {
          record.reached = true;
          record.time_seconds = curve.grid_seconds[i];
          break;
        }
      }
      result.thresholds.push_back(record);
    }
    result.curves.push_back(std::move(curve));
  }
  return result;
}

}  // namespace fgn
