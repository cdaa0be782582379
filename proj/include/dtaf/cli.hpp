#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dtaf/harness.hpp"
#include "dtaf/params.hpp"
#include "dtaf/run_config.hpp"
#include "dtaf/train.hpp"

namespace dtaf::cli {

namespace fs = std::filesystem;

struct Options {
  std::string command;
  fs::path config;
  std::optional<fs::path> checkpoint;
  std::optional<std::string> sweep;
  std::size_t windows = 3;
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
  // generate
  std::size_t length = 4000;
  std::uint64_t data_seed = 7;
  std::size_t channels = 1;
};

inline RunConfig resolve(const Options& o) {
  RunConfig rc = load_run_config(o.config);
  if (o.seed) rc.seeds = {*o.seed};
  if (o.out) rc.output_dir = *o.out;
  return rc;
}

inline fs::path run_dir(const RunConfig& rc, std::size_t horizon, std::uint64_t seed) {
  return rc.output_dir / ("h" + std::to_string(horizon) + "_seed" + std::to_string(seed));
}

inline void write_history(const fs::path& path, const std::vector<EpochRecord>& history, const std::string& comment) {
  CsvWriter w(path.string(), comment, {"epoch", "task", "stable", "robust", "total", "val_mse", "val_mae"});
  for (const auto& r : history)
    w.row(r.epoch, r.loss.task, r.loss.stable, r.loss.robust, r.loss.total, r.val_mse, r.val_mae);
}

inline int cmd_train(const Options& o, std::ostream& log) {
  auto rc = resolve(o);
  auto ds = load_dataset(rc);
  fs::create_directories(rc.output_dir);
  const auto comment = rc.hash_comment();
  CsvWriter summary((rc.output_dir / "metrics.csv").string(), comment,
                    {"horizon", "seed", "split", "mse", "mae", "best_epoch", "epochs"});
  for (auto h : rc.horizons) {
    const auto cfg = rc.model_for(h);
    for (auto seed : rc.seeds) {
      const auto opts = rc.train_for(seed);
      const auto dir = run_dir(rc, h, seed);
      fs::create_directories(dir);
      log << "train: horizon " << h << ", seed " << seed << "\n";
      auto res = train(ds, cfg, opts);
      for (const auto& r : res.history) {
        log << "  epoch " << r.epoch << " loss " << format_number(r.loss.total) << " val_mse "
            << format_number(r.val_mse) << "\n";
      }
      save_checkpoint((dir / "model.ckpt").string(), res.params,
                      {{"config_hash", rc.hash()},
                       {"horizon", std::to_string(h)},
                       {"seed", std::to_string(seed)},
                       {"best_epoch", std::to_string(res.state.best_epoch)}},
                      comment);
      write_history(dir / "history.csv", res.history, comment);
      CsvWriter metrics((dir / "metrics.csv").string(), comment, {"horizon", "split", "mse", "mae"});
      for (auto which : {Split::val, Split::test}) {
        auto m = evaluate(ds, which, res.params, cfg, opts.eval_stride);
        metrics.row(h, to_string(which), m.mse, m.mae);
        summary.row(h, static_cast<std::size_t>(seed), to_string(which), m.mse, m.mae, res.state.best_epoch,
                    res.history.size());
        log << "  " << to_string(which) << " mse " << format_number(m.mse) << " mae " << format_number(m.mae) << "\n";
      }
    }
  }
  return 0;
}

struct LoadedCheckpoint {
  fs::path path;
  ModelConfig cfg;
  DtafParams params;
};

// Accepts a checkpoint manifest or a train run directory containing model.ckpt.
// The horizon is read from the checkpoint; shapes are validated against cfg.
inline LoadedCheckpoint load_for(const RunConfig& rc, const Options& o) {
  fs::path p = o.checkpoint ? *o.checkpoint : run_dir(rc, rc.horizons.front(), rc.seeds.front());
  if (fs::is_directory(p)) p /= "model.ckpt";
  if (!fs::exists(p)) throw UserError("checkpoint '" + p.string() + "' does not exist");
  auto manifest = read_manifest(p.string());
  std::size_t horizon = rc.horizons.front();
  if (auto it = manifest.meta.find("horizon"); it != manifest.meta.end()) {
    horizon = detail::parse_size(it->second, p.string() + ": meta horizon: ");
  }
  LoadedCheckpoint out{p, rc.model_for(horizon), {}};
  out.params = load_checkpoint(p.string(), out.cfg);
  return out;
}

inline int cmd_eval(const Options& o, std::ostream& log) {
  auto rc = resolve(o);
  auto ck = load_for(rc, o);
  auto ds = load_dataset(rc);
  const fs::path dir = o.out ? *o.out : ck.path.parent_path();
  fs::create_directories(dir);
  CsvWriter w((dir / "eval_metrics.csv").string(), rc.hash_comment(), {"horizon", "split", "mse", "mae"});
  for (auto which : {Split::val, Split::test}) {
    auto m = evaluate(ds, which, ck.params, ck.cfg, rc.train.eval_stride);
    w.row(ck.cfg.horizon, to_string(which), m.mse, m.mae);
    log << to_string(which) << " mse " << format_number(m.mse) << " mae " << format_number(m.mae) << "\n";
  }
  return 0;
}

inline SweepSpec parse_sweep_arg(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos) throw ConfigError("--sweep: expected NAME=v1,v2,..., got '" + arg + "'");
  SweepSpec spec;
  spec.param = parse_sweep_param(std::string(detail::trim(std::string_view(arg).substr(0, eq))));
  spec.values = parse_size_list(arg.substr(eq + 1), "--sweep: ");
  if (spec.values.empty()) throw ConfigError("--sweep: value list is empty");
  return spec;
}

inline int cmd_sweep(const Options& o, std::ostream& log) {
  if (!o.sweep) throw ConfigError("--sweep: required for the sweep command");
  auto spec = parse_sweep_arg(*o.sweep);
  auto rc = resolve(o);
  for (auto v : spec.values) {
    for (auto h : rc.horizons) {
      try {
        apply_sweep_value(rc.model_for(h), spec.param, v).validate();
      } catch (const ConfigError& e) {
        throw ConfigError("--sweep " + to_string(spec.param) + "=" + std::to_string(v) + ": " + e.what());
      }
    }
  }
  auto ds = load_dataset(rc);
  spec.base = rc.model;
  spec.train = rc.train;
  spec.horizons = rc.horizons;
  spec.seeds = rc.seeds;
  log << "sweep " << to_string(spec.param) << ": " << spec.values.size() * spec.horizons.size() * spec.seeds.size()
      << " runs on " << sweep_threads() << " thread(s)\n";
  auto rows = run_sweep(ds, spec);
  fs::create_directories(rc.output_dir);
  const auto stem = "sweep_" + to_string(spec.param);
  write_sweep_csv((rc.output_dir / (stem + ".csv")).string(), rows, rc.hash_comment());
  write_sweep_summary_csv((rc.output_dir / (stem + "_summary.csv")).string(), sweep_means(rows), rc.hash_comment());
  bool failed = false;
  for (const auto& r : rows) {
    log << "  " << to_string(spec.param) << "=" << r.value << " h=" << r.horizon << " seed=" << r.seed << " mse "
        << format_number(r.mse) << " mae " << format_number(r.mae) << " " << r.status << "\n";
    failed |= r.status != "ok";
  }
  return failed ? 3 : 0;
}

inline int cmd_analyze(const Options& o, std::ostream& log) {
  if (o.windows == 0) throw ConfigError("--windows: must be at least 1");
  auto rc = resolve(o);
  auto ck = load_for(rc, o);
  auto ds = load_dataset(rc);
  auto test = make_windows(ds, Split::test, ck.cfg.input_len, ck.cfg.horizon, rc.train.eval_stride);
  auto ids = sample_windows(test, o.windows, rc.seeds.front());
  auto bundle = analyze(ck.params, ck.cfg, test.gather(ids));
  const fs::path dir = o.out ? *o.out : ck.path.parent_path() / "analysis";
  write_analysis(dir, bundle, rc.hash_comment());
  double before = 0.0, after = 0.0;
  for (const auto& w : bundle.windows) {
    before += mean_off_diagonal(w.kl_before, bundle.patches);
    after += mean_off_diagonal(w.kl_after, bundle.patches);
  }
  const double n = static_cast<double>(bundle.windows.size());
  log << "analyzed " << bundle.windows.size() << " window(s); mean off-diagonal KL before "
      << format_number(before / n) << ", after " << format_number(after / n) << "\n";
  return 0;
}

inline int cmd_generate(const Options& o, std::ostream& log) {
  if (!o.out) throw ConfigError("--out: output CSV path required");
  synthetic::RegimeSeriesOptions opts;
  opts.length = o.length;
  opts.channels = o.channels;
  if (opts.length == 0) throw ConfigError("--length: must be positive");
  if (opts.channels == 0) throw ConfigError("--channels: must be positive");
  if (o.out->has_parent_path()) fs::create_directories(o.out->parent_path());
  write_csv(o.out->string(), synthetic::regime_switching(opts, o.data_seed));
  log << "wrote " << opts.length << " rows to " << o.out->string() << "\n";
  return 0;
}

// Exit codes: 0 success, 2 user or configuration error, 3 runtime failure.
inline int run(int argc, const char* const* argv, std::ostream& log = std::cerr) {
  CLI::App app{"DTAF forecaster: train, evaluate, sweep and analyze"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "run configuration file")->required();
    sub->add_option("--out", o.out, "output directory (overrides [output] dir)");
    sub->add_option("--seed", o.seed, "seed (overrides [train] seeds)");
  };
  auto* train_cmd = app.add_subcommand("train", "train one model per (horizon, seed)");
  add_common(train_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on val and test");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint manifest or train run directory");
  auto* sweep_cmd = app.add_subcommand("sweep", "sensitivity sweep over one hyperparameter");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--sweep", o.sweep, "NAME=v1,v2,... with NAME in topk, patch_len, input_len")->required();
  auto* analyze_cmd = app.add_subcommand("analyze", "dump router, patch KL and spectral picks");
  add_common(analyze_cmd);
  analyze_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint manifest or train run directory");
  analyze_cmd->add_option("--windows", o.windows, "number of sampled test windows")->capture_default_str();
  auto* gen_cmd = app.add_subcommand("generate", "write a synthetic regime-switching CSV");
  gen_cmd->add_option("--out", o.out, "output CSV path")->required();
  gen_cmd->add_option("--length", o.length, "rows")->capture_default_str();
  gen_cmd->add_option("--channels", o.channels, "channels")->capture_default_str();
  gen_cmd->add_option("--seed", o.data_seed, "generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, log, log);
    return code == 0 ? 0 : 2;
  }
  try {
    if (train_cmd->parsed()) return cmd_train(o, log);
    if (eval_cmd->parsed()) return cmd_eval(o, log);
    if (sweep_cmd->parsed()) return cmd_sweep(o, log);
    if (analyze_cmd->parsed()) return cmd_analyze(o, log);
    if (gen_cmd->parsed()) return cmd_generate(o, log);
  } catch (const UserError& e) {
    log << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    log << "fatal: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace dtaf::cli
