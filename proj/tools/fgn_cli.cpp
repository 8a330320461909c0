// SPDX-License-Identifier: Apache-2.0
//
// fgn command line.
//
//   fgn verify           run the invariant suites, exit 0 iff all pass
//   fgn mechanism        trace / step-ratio / timing sweeps, written as CSV
//   fgn make-features    write a synthetic feature cache
//   fgn train-head       train an affine head on a feature cache
//
// Exit codes: 0 success, 1 validation failure, 2 I/O error.

#include <cstdio>
#include <exception>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "fgn/fgn.hpp"

namespace {

void apply_threads(int threads, bool deterministic) {
  if (deterministic) threads = 1;
  if (threads < 1) threads = 1;
  Eigen::setNbThreads(threads);
}

std::string join_doubles(const std::vector<double>& values) {
  std::ostringstream out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) out << ',';
    out << fgn::format_double(values[i]);
  }
  return out.str();
}

void echo_run_stamp(std::uint64_t seed, const std::string& config_text) {
  std::printf("seed=%llu config=%s\n", static_cast<unsigned long long>(seed),
              fgn::hash_hex(fgn::fnv1a_hash(config_text)).c_str());
}

// ----------------------------------------------------------------- verify

struct VerifyCli {
  fgn::VerifyOptions options;

  int run() const {
    const fgn::VerifyReport report = fgn::run_verification(options);
    for (const auto& r : report.results)
      std::printf("[%s] %-38s worst %.3e  (tol %.3e)\n",
                  r.pass ? "PASS" : "FAIL", r.name.c_str(), r.worst_error,
                  r.tolerance);
    std::printf("%s\n", report.all_pass() ? "all properties passed"
                                          : "one or more properties FAILED");
    return report.all_pass() ? 0 : 1;
  }
};

// -------------------------------------------------------------- mechanism

struct TraceCli {
  double p_star = 0.60;
  int classes = 10;
  int points = 64;
  std::string out;

  int run() const {
    const auto records =
        fgn::trace_sweep(p_star, classes, fgn::uniform_xi_grid(classes, points));
    fgn::CsvWriter csv(out, {"xi", "tau_ret", "tau_drop", "tau_full"});
    for (const auto& r : records)
      csv.row({fgn::format_double(r.xi), fgn::format_double(r.tau_ret),
               fgn::format_double(r.tau_drop), fgn::format_double(r.tau_full)});
    csv.close();
    std::printf("wrote %zu rows to %s\n", records.size(), out.c_str());
    return 0;
  }
};

struct StepRatioCli {
  fgn::StepRatioConfig config;
  int alpha_points = 40;
  std::string out;

  int run() const {
    fgn::StepRatioConfig cfg = config;
    if (cfg.alpha_grid.empty())
      cfg.alpha_grid = fgn::StepRatioConfig::default_alpha_grid(alpha_points);
    const auto records = fgn::step_ratio_sweep(cfg);
    fgn::CsvWriter csv(out, {"alpha", "xi", "damping_scale", "ratio"});
    for (const auto& r : records)
      csv.row({fgn::format_double(r.alpha), fgn::format_double(r.xi),
               fgn::format_double(r.damping_scale),
               fgn::format_double(r.ratio)});
    csv.close();
    std::printf("wrote %zu rows to %s\n", records.size(), out.c_str());
    return 0;
  }
};

struct TimingCli {
  fgn::CostSweepConfig config;
  int threads = 1;
  bool deterministic = false;
  std::string out;

  int run() const {
    apply_threads(threads, deterministic);
    std::ostringstream stamp;
    stamp << "timing;d_f=" << config.feature_dim << ";b=" << config.batch_size
          << ";n=" << config.n_examples << ";warmup=" << config.warmup_steps
          << ";timed=" << config.timed_steps << ";damping=" << config.damping
          << ";cg=" << config.cg_max_iter;
    echo_run_stamp(config.seed, stamp.str());

    const auto records = fgn::curvature_cost_sweep(config);
    fgn::CsvWriter csv(out, {"C", "method", "mean_step_seconds",
                             "std_step_seconds", "flops_curvature",
                             "apply_j_count", "apply_jt_count"});
    for (const auto& r : records)
      csv.row({std::to_string(r.num_classes), r.method,
               fgn::format_double(r.mean_step_seconds),
               fgn::format_double(r.std_step_seconds),
               std::to_string(r.flops_curvature), std::to_string(r.apply_j),
               std::to_string(r.apply_jt)});
    csv.close();
    std::printf("wrote %zu rows to %s\n", records.size(), out.c_str());
    return 0;
  }
};

// ---------------------------------------------------------- make-features

struct MakeFeaturesCli {
  int n = 0;
  int feature_dim = 0;
  int classes = 0;
  std::uint64_t seed = 0;
  std::string mode = "gaussian";
  double cluster_radius = 3.0;
  double cluster_noise = 1.0;
  std::string out;

  int run() const {
    std::ostringstream stamp;
    stamp << "make-features;n=" << n << ";d_f=" << feature_dim
          << ";C=" << classes << ";mode=" << mode << ";radius=" << cluster_radius
          << ";noise=" << cluster_noise;
    echo_run_stamp(seed, stamp.str());

    fgn::FeatureBatch batch;
    if (mode == "gaussian") {
      batch = fgn::make_gaussian_features(n, feature_dim, classes, seed);
    } else if (mode == "clustered") {
      batch = fgn::make_clustered_features(n, feature_dim, classes, seed,
                                           cluster_radius, cluster_noise);
    } else {
      throw std::invalid_argument("mode must be gaussian or clustered");
    }
    fgn::write_feature_cache(out, batch);
    std::printf("wrote %d examples (d_f=%d, C=%d) to %s\n", n, feature_dim,
                classes, out.c_str());
    return 0;
  }
};

// ------------------------------------------------------------- train-head

struct TrainHeadCli {
  std::string cache;
  std::string method = "fgn";
  double lr = -1.0;  // negative: use the per-method default
  double damping = 1.0;
  double cg_tol = 1e-5;
  int cg_max_iter = 5;
  int batch = 128;
  int epochs = 150;
  int seeds = 10;
  int eval_cadence = 100;
  double val_fraction = 0.2;
  std::uint64_t split_seed = 0;
  bool standardize = true;
  std::vector<double> thresholds = {0.42, 0.43, 0.44};
  int grid_points = 200;
  std::uint64_t seed = 0;
  int threads = 1;
  bool deterministic = false;
  std::string out;

  int run() const {
    apply_threads(threads, deterministic);

    fgn::OptimizerConfig cfg;
    cfg.method = fgn::method_from_name(method);
    cfg.learning_rate =
        lr > 0.0 ? lr : (cfg.method == fgn::Method::kAdam ? 3e-4 : 0.1);
    cfg.damping = damping;
    cfg.cg_tol = cg_tol;
    cfg.cg_max_iter = cg_max_iter;
    cfg.seed = seed;

    std::ostringstream stamp;
    stamp << "train-head;method=" << method << ";lr=" << cfg.learning_rate
          << ";damping=" << damping << ";cg_tol=" << cg_tol
          << ";cg_max_iter=" << cg_max_iter << ";batch=" << batch
          << ";epochs=" << epochs << ";seeds=" << seeds
          << ";cadence=" << eval_cadence << ";val=" << val_fraction
          << ";split_seed=" << split_seed << ";standardize=" << standardize
          << ";thresholds=" << join_doubles(thresholds)
          << ";grid=" << grid_points;
    echo_run_stamp(seed, stamp.str());

    const fgn::FeatureBatch full = fgn::read_feature_cache(cache);
    auto [train_split, eval_split] =
        fgn::stratified_split(full, val_fraction, split_seed);
    if (standardize) {
      const fgn::Standardizer st = fgn::fit_standardizer(train_split.features);
      st.apply(train_split);
      st.apply(eval_split);
    }

    fgn::BenchmarkConfig bench;
    bench.methods = {{method, cfg}};
    bench.seeds = seeds;
    bench.schedule = {epochs, batch, eval_cadence};
    bench.grid_points = grid_points;
    bench.accuracy_thresholds = thresholds;
    const fgn::BenchmarkResult result =
        fgn::head_benchmark(train_split, eval_split, bench);

    const auto& runs = result.logs.at(method);
    for (int k = 0; k < seeds; ++k) {
      const std::string path = out + "_seed" + std::to_string(k) + ".csv";
      fgn::CsvWriter csv(path, {"seed", "step", "wall_seconds", "train_loss",
                                "eval_loss", "eval_accuracy"});
      for (const auto& point : runs[k].points)
        csv.row({std::to_string(runs[k].seed), std::to_string(point.step),
                 fgn::format_double(point.wall_seconds),
                 fgn::format_double(point.train_loss),
                 fgn::format_double(point.eval_loss),
                 fgn::format_double(point.eval_accuracy)});
      csv.close();
    }

    {
      fgn::CsvWriter csv(out + "_aggregate.csv",
                         {"method", "grid_seconds", "mean_train_loss",
                          "std_train_loss", "mean_eval_loss", "std_eval_loss",
                          "mean_eval_accuracy", "std_eval_accuracy"});
      const fgn::AggregateCurve& curve = result.curves.front();
      for (size_t i = 0; i < curve.grid_seconds.size(); ++i)
        csv.row({curve.method, fgn::format_double(curve.grid_seconds[i]),
                 fgn::format_double(curve.mean_train_loss[i]),
                 fgn::format_double(curve.std_train_loss[i]),
                 fgn::format_double(curve.mean_eval_loss[i]),
                 fgn::format_double(curve.std_eval_loss[i]),
                 fgn::format_double(curve.mean_eval_accuracy[i]),
                 fgn::format_double(curve.std_eval_accuracy[i])});
      csv.close();
    }
    {
      fgn::CsvWriter csv(out + "_thresholds.csv",
                         {"method", "threshold", "time_seconds"});
      for (const auto& t : result.thresholds)
        csv.row({t.method, fgn::format_double(t.threshold),
                 t.reached ? fgn::format_double(t.time_seconds) : "--"});
      csv.close();
    }
    std::printf("wrote %d per-seed logs plus aggregate and thresholds to %s_*\n",
                seeds, out.c_str());
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"True-vs-rest Gauss-Newton curvature toolkit"};
  app.require_subcommand(1);

  std::function<int()> runner;

  // verify
  VerifyCli verify;
  auto* verify_cmd = app.add_subcommand("verify", "run the invariant suites");
  verify_cmd->add_option("--seed", verify.options.seed, "randomization seed");
  verify_cmd->add_option("--decomp-instances",
                         verify.options.decomposition_instances,
                         "instances for the decomposition identity");
  verify_cmd->add_option("--equiv-instances",
                         verify.options.equivalence_instances,
                         "instances for the row/parameter equivalence");
  verify_cmd->add_option("--adjoint-probes", verify.options.adjoint_probes,
                         "probe pairs for the adjoint test");
  verify_cmd->add_option("--tol-decomposition",
                         verify.options.decomposition_tol);
  verify_cmd->add_option("--tol-equivalence", verify.options.equivalence_tol);
  verify_cmd->add_option("--tol-adjoint", verify.options.adjoint_tol);
  verify_cmd->add_option("--tol-gram", verify.options.gram_tol);
  verify_cmd
      ->add_flag("--inject-adjoint-fault",
                 verify.options.inject_adjoint_sign_error,
                 "flip one transpose-output sign (self-test of the verifier)")
      ->group("");  // hidden
  verify_cmd->callback([&] { runner = [&verify] { return verify.run(); }; });

  // mechanism
  auto* mech = app.add_subcommand("mechanism", "mechanism sweeps, CSV output");
  mech->require_subcommand(1);

  TraceCli trace;
  auto* trace_cmd = mech->add_subcommand("trace", "output-space trace sweep");
  trace_cmd->add_option("--p-star", trace.p_star, "true-class probability");
  trace_cmd->add_option("--classes", trace.classes, "class count");
  trace_cmd->add_option("--points", trace.points, "grid points");
  trace_cmd->add_option("--out", trace.out, "output CSV")->required();
  trace_cmd->callback([&] { runner = [&trace] { return trace.run(); }; });

  StepRatioCli ratio;
  auto* ratio_cmd =
      mech->add_subcommand("step-ratio", "damped step quality sweep");
  ratio_cmd->add_option("--p-star", ratio.config.p_star);
  ratio_cmd->add_option("--classes", ratio.config.num_classes);
  ratio_cmd->add_option("--eta", ratio.config.eta);
  ratio_cmd->add_option("--beta", ratio.config.beta);
  ratio_cmd->add_option("--alpha-points", ratio.alpha_points);
  ratio_cmd
      ->add_option("--damping-scales", ratio.config.damping_scales)
      ->delimiter(',');
  ratio_cmd->add_option("--out", ratio.out, "output CSV")->required();
  ratio_cmd->callback([&] { runner = [&ratio] { return ratio.run(); }; });

  TimingCli timing;
  auto* timing_cmd =
      mech->add_subcommand("timing", "per-step wall time and flop counts");
  timing_cmd->add_option("--class-grid", timing.config.class_grid)
      ->delimiter(',');
  timing_cmd->add_option("--feature-dim", timing.config.feature_dim);
  timing_cmd->add_option("--batch", timing.config.batch_size);
  timing_cmd->add_option("--examples", timing.config.n_examples);
  timing_cmd->add_option("--warmup", timing.config.warmup_steps);
  timing_cmd->add_option("--timed", timing.config.timed_steps);
  timing_cmd->add_option("--damping", timing.config.damping);
  timing_cmd->add_option("--cg-max-iter", timing.config.cg_max_iter);
  timing_cmd->add_option("--seed", timing.config.seed);
  timing_cmd->add_option("--threads", timing.threads);
  timing_cmd->add_flag("--deterministic", timing.deterministic);
  timing_cmd->add_option("--out", timing.out, "output CSV")->required();
  timing_cmd->callback([&] { runner = [&timing] { return timing.run(); }; });

  // make-features
  MakeFeaturesCli make_features;
  auto* make_cmd =
      app.add_subcommand("make-features", "write a synthetic feature cache");
  make_cmd->add_option("--n", make_features.n, "examples")->required();
  make_cmd->add_option("--feature-dim", make_features.feature_dim)->required();
  make_cmd->add_option("--classes", make_features.classes)->required();
  make_cmd->add_option("--seed", make_features.seed);
  make_cmd->add_option("--mode", make_features.mode)
      ->check(CLI::IsMember({"gaussian", "clustered"}));
  make_cmd->add_option("--cluster-radius", make_features.cluster_radius);
  make_cmd->add_option("--cluster-noise", make_features.cluster_noise);
  make_cmd->add_option("--out", make_features.out, "output cache")->required();
  make_cmd->callback(
      [&] { runner = [&make_features] { return make_features.run(); }; });

  // train-head
  TrainHeadCli train_head;
  auto* train_cmd =
      app.add_subcommand("train-head", "train an affine head on a cache");
  train_cmd->add_option("--cache", train_head.cache, "feature cache path")
      ->required();
  train_cmd->add_option("--method", train_head.method)
      ->check(CLI::IsMember({"fgn", "sgn", "adam"}));
  train_cmd->add_option("--lr", train_head.lr,
                        "learning rate (default 0.1, adam 3e-4)");
  train_cmd->add_option("--damping", train_head.damping);
  train_cmd->add_option("--cg-tol", train_head.cg_tol);
  train_cmd->add_option("--cg-max-iter", train_head.cg_max_iter);
  train_cmd->add_option("--batch", train_head.batch);
  train_cmd->add_option("--epochs", train_head.epochs);
  train_cmd->add_option("--seeds", train_head.seeds, "number of seeds");
  train_cmd->add_option("--eval-cadence", train_head.eval_cadence);
  train_cmd->add_option("--val-fraction", train_head.val_fraction);
  train_cmd->add_option("--split-seed", train_head.split_seed);
  train_cmd->add_flag("--standardize,!--no-standardize",
                      train_head.standardize,
                      "coordinatewise train-split standardization");
  train_cmd->add_option("--thresholds", train_head.thresholds)
      ->delimiter(',');
  train_cmd->add_option("--grid-points", train_head.grid_points);
  train_cmd->add_option("--seed", train_head.seed, "base seed");
  train_cmd->add_option("--threads", train_head.threads);
  train_cmd->add_flag("--deterministic", train_head.deterministic);
  train_cmd->add_option("--out", train_head.out, "output prefix")->required();
  train_cmd->callback(
      [&] { runner = [&train_head] { return train_head.run(); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    return runner ? runner() : 1;
  } catch (const fgn::IoError& err) {
    std::fprintf(stderr, "I/O error: %s\n", err.what());
    return 2;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
}
