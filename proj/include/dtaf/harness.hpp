#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "dtaf/config.hpp"
#include "dtaf/data.hpp"
#include "dtaf/io.hpp"
#include "dtaf/model.hpp"
#include "dtaf/train.hpp"

namespace dtaf {

// ---------------------------------------------------------------- baselines

// Repeats the last observed value over the horizon.
inline Metrics persistence_baseline(const WindowSet& windows) {
  return evaluate_with(windows, 1024, [](const WindowBatch& b) {
    std::vector<double> out;
    out.reserve(b.size() * b.horizon);
    for (std::size_t i = 0; i < b.size(); ++i) out.insert(out.end(), b.horizon, b.inputs[(i + 1) * b.input_len - 1]);
    return out;
  });
}

inline Metrics persistence_baseline(const SeriesDataset& ds, std::size_t input_len, std::size_t horizon,
                                    Split which = Split::test, std::size_t stride = 1) {
  return persistence_baseline(make_windows(ds, which, input_len, horizon, stride));
}

struct LinearBaseline {
  AffineParams map;  // [F, T_in], [F]
  Metrics test;
  std::vector<EpochRecord> history;
};

// Direct affine map T_in -> F shared across channels, zero-initialized and
// trained with L1 through the same loop and splits as DTAF.
inline LinearBaseline linear_baseline(const SeriesDataset& ds, std::size_t input_len, std::size_t horizon,
                                      const TrainOptions& opts) {
  auto train_w = make_windows(ds, Split::train, input_len, horizon, opts.train_stride);
  auto val_w = make_windows(ds, Split::val, input_len, horizon, opts.eval_stride);
  auto test_w = make_windows(ds, Split::test, input_len, horizon, opts.eval_stride);
  LinearBaseline out;
  out.map = {Tensor::zeros({horizon, input_len}, true), Tensor::zeros({horizon}, true)};
  auto predict = [&](const WindowBatch& b) {
    return linear(Tensor({b.size(), input_len}, b.inputs), out.map.weight, out.map.bias);
  };
  auto metrics = [&](const WindowSet& w) {
    return evaluate_with(w, opts.eval_batch, [&](const WindowBatch& b) { return predict(b).values(); });
  };
  auto fitted = fit(
      {out.map.weight, out.map.bias}, train_w,
      [&](const WindowBatch& b, std::uint64_t) {
        StepLoss s;
        s.total = task_loss(predict(b), Tensor({b.size(), horizon}, b.targets));
        s.parts.task = s.parts.total = s.total.item();
        return s;
      },
      [&] { return metrics(val_w); }, opts);
  out.history = std::move(fitted.history);
  out.test = metrics(test_w);
  return out;
}

// ------------------------------------------------------------------- sweeps

enum class SweepParam { top_k, patch_len, input_len };

inline std::string to_string(SweepParam p) {
  switch (p) {
    case SweepParam::top_k: return "topk";
    case SweepParam::patch_len: return "patch_len";
    case SweepParam::input_len: return "input_len";
  }
  return "?";
}

inline SweepParam parse_sweep_param(const std::string& name) {
  if (name == "topk" || name == "top_k" || name == "k") return SweepParam::top_k;
  if (name == "patch_len") return SweepParam::patch_len;
  if (name == "input_len") return SweepParam::input_len;
  throw ConfigError("unknown sweep parameter '" + name + "'; legal names: topk, patch_len, input_len");
}

struct SweepSpec {
  SweepParam param = SweepParam::top_k;
  std::vector<std::size_t> values;
  ModelConfig base;
  TrainOptions train;
  std::vector<std::size_t> horizons;
  std::vector<std::uint64_t> seeds;
};

struct SweepRow {
  std::size_t value = 0;
  std::size_t horizon = 0;
  std::uint64_t seed = 0;
  double mse = std::nan("");
  double mae = std::nan("");
  std::string status = "ok";
};

inline constexpr std::size_t kSweepMaxEpochs = 30;

inline ModelConfig apply_sweep_value(ModelConfig cfg, SweepParam p, std::size_t v) {
  switch (p) {
    case SweepParam::top_k: cfg.top_k = v; break;
    case SweepParam::patch_len: cfg.patch_len = v; break;
    case SweepParam::input_len: cfg.input_len = v; break;
  }
  return cfg;
}

// Worker count for independent runs: DTAF_THREADS if set, else 1.
inline std::size_t sweep_threads() {
  if (const char* env = std::getenv("DTAF_THREADS")) {
    long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

// Trains DTAF on `ds` for one cell and scores the test split.
inline SweepRow run_cell(const SeriesDataset& ds, const ModelConfig& cfg, TrainOptions opts) {
  SweepRow row;
  row.seed = opts.seed;
  row.horizon = cfg.horizon;
  auto result = train(ds, cfg, opts);
  auto m = evaluate(ds, Split::test, result.params, cfg, opts.eval_stride);
  row.mse = m.mse;
  row.mae = m.mae;
  return row;
}

// One row per (value, horizon, seed), in that nesting order. Cells are
// independent; a failing cell records its error and the sweep continues.
inline std::vector<SweepRow> run_sweep(const SeriesDataset& ds, const SweepSpec& spec) {
  if (spec.values.empty()) throw ConfigError("sweep needs at least one value");
  if (spec.horizons.empty()) throw ConfigError("sweep needs at least one horizon");
  if (spec.seeds.empty()) throw ConfigError("sweep needs at least one seed");
  std::vector<SweepRow> rows;
  for (auto v : spec.values)
    for (auto h : spec.horizons)
      for (auto s : spec.seeds) {
        SweepRow r;
        r.value = v;
        r.horizon = h;
        r.seed = s;
        rows.push_back(r);
      }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < rows.size(); i = next++) {
      auto& r = rows[i];
      try {
        ModelConfig cfg = apply_sweep_value(spec.base, spec.param, r.value);
        cfg.horizon = r.horizon;
        cfg.validate();
        TrainOptions opts = spec.train;
        opts.seed = r.seed;
        opts.max_epochs = std::min(opts.max_epochs, kSweepMaxEpochs);
        auto done = run_cell(ds, cfg, opts);
        r.mse = done.mse;
        r.mae = done.mae;
      } catch (const std::exception& e) {
        r.status = std::string("error: ") + e.what();
        std::replace(r.status.begin(), r.status.end(), ',', ';');
      }
    }
  };
  const std::size_t n = std::min(sweep_threads(), rows.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return rows;
}

struct SweepCell {
  std::size_t value = 0;
  std::size_t horizon = 0;
  double mse = 0.0;
  double mae = 0.0;
  std::size_t runs = 0;
};

// Arithmetic mean over seeds for every (value, horizon); failed runs excluded.
inline std::vector<SweepCell> sweep_means(const std::vector<SweepRow>& rows) {
  std::vector<SweepCell> cells;
  for (const auto& r : rows) {
    auto it = std::find_if(cells.begin(), cells.end(),
                           [&](const SweepCell& c) { return c.value == r.value && c.horizon == r.horizon; });
    if (it == cells.end()) {
      cells.push_back({r.value, r.horizon, 0.0, 0.0, 0});
      it = cells.end() - 1;
    }
    if (r.status != "ok") continue;
    it->mse += r.mse;
    it->mae += r.mae;
    it->runs += 1;
  }
  for (auto& c : cells) {
    c.mse = c.runs ? c.mse / static_cast<double>(c.runs) : std::nan("");
    c.mae = c.runs ? c.mae / static_cast<double>(c.runs) : std::nan("");
  }
  return cells;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows, const std::string& comment) {
  CsvWriter w(path, comment, {"value", "horizon", "seed", "mse", "mae", "status"});
  for (const auto& r : rows) w.row(r.value, r.horizon, static_cast<std::size_t>(r.seed), r.mse, r.mae, r.status);
}

inline void write_sweep_summary_csv(const std::string& path, const std::vector<SweepCell>& cells,
                                    const std::string& comment) {
  CsvWriter w(path, comment, {"value", "horizon", "runs", "mse_mean", "mae_mean"});
  for (const auto& c : cells) w.row(c.value, c.horizon, c.runs, c.mse, c.mae);
}

// ----------------------------------------------------------------- analysis

struct WindowAnalysis {
  std::size_t origin = 0;
  std::size_t channel = 0;
  std::vector<double> router;      // N x m
  std::vector<double> kl_before;   // N x N over softmaxed X_patch rows
  std::vector<double> kl_after;    // N x N over softmaxed X_stable rows
  std::vector<std::size_t> picks;  // N x k
  std::vector<double> pick_magnitudes;  // |Wave| at each pick
};

struct AnalysisBundle {
  std::size_t patches = 0;
  std::size_t experts = 0;
  std::size_t top_k = 0;
  std::vector<WindowAnalysis> windows;
};

// Mean of the off-diagonal entries of an N x N matrix.
inline double mean_off_diagonal(const std::vector<double>& m, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) acc += m[i * n + j];
  return n > 1 ? acc / static_cast<double>(n * (n - 1)) : 0.0;
}

// Evaluation-mode forward over `batch`, collecting router weights, patch
// distribution divergences before/after filtering and spectral picks.
inline AnalysisBundle analyze(DtafParams& params, const ModelConfig& cfg, const WindowBatch& batch) {
  NoGradGuard ng;
  AnalysisBundle out;
  const std::size_t n = cfg.num_patches(), m = cfg.n_experts, k = cfg.top_k;
  out.patches = n;
  out.experts = m;
  out.top_k = k;
  if (batch.size() == 0) return out;
  auto r = forward(Tensor({batch.size(), cfg.input_len}, batch.inputs), params, cfg);
  auto before = patch_kl_matrix(r.trace.patches);
  auto after = patch_kl_matrix(r.trace.stable);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    WindowAnalysis w;
    w.origin = batch.origin_indices[b];
    w.channel = batch.channel_ids[b];
    auto slice = [&](const Tensor& t, std::size_t per) {
      return std::vector<double>(t.values().begin() + static_cast<std::ptrdiff_t>(b * per),
                                 t.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
    };
    w.router = slice(r.trace.router, n * m);
    w.kl_before = slice(before, n * n);
    w.kl_after = slice(after, n * n);
    w.picks.assign(r.trace.picks.begin() + static_cast<std::ptrdiff_t>(b * n * k),
                   r.trace.picks.begin() + static_cast<std::ptrdiff_t>((b + 1) * n * k));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) w.pick_magnitudes.push_back(r.trace.wave.magnitude(b * n + i, w.picks[i * k + j]));
    out.windows.push_back(std::move(w));
  }
  return out;
}

// Deterministic sample of `count` window ids (sorted) from a window set.
inline std::vector<std::size_t> sample_windows(const WindowSet& windows, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> ids(windows.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  Engine eng(derive_seed(seed, 0xa7a1));
  shuffle(ids.begin(), ids.end(), eng);
  ids.resize(std::min(count, ids.size()));
  std::sort(ids.begin(), ids.end());
  return ids;
}

// router_weights.csv, patch_kl.csv, spectral_picks.csv in `dir`.
inline void write_analysis(const std::filesystem::path& dir, const AnalysisBundle& a, const std::string& comment) {
  std::filesystem::create_directories(dir);
  {
    CsvWriter w((dir / "router_weights.csv").string(), comment,
                {"window", "origin", "channel", "patch", "expert", "weight"});
    for (std::size_t i = 0; i < a.windows.size(); ++i)
      for (std::size_t p = 0; p < a.patches; ++p)
        for (std::size_t e = 0; e < a.experts; ++e)
          w.row(i, a.windows[i].origin, a.windows[i].channel, p, e, a.windows[i].router[p * a.experts + e]);
  }
  {
    CsvWriter w((dir / "patch_kl.csv").string(), comment, {"window", "stage", "patch_i", "patch_j", "kl"});
    for (std::size_t i = 0; i < a.windows.size(); ++i)
      for (const char* stage : {"before", "after"}) {
        const auto& m = std::string(stage) == "before" ? a.windows[i].kl_before : a.windows[i].kl_after;
        for (std::size_t p = 0; p < a.patches; ++p)
          for (std::size_t q = 0; q < a.patches; ++q) w.row(i, stage, p, q, m[p * a.patches + q]);
      }
  }
  {
    CsvWriter w((dir / "spectral_picks.csv").string(), comment, {"window", "patch", "rank", "bin", "wave_magnitude"});
    for (std::size_t i = 0; i < a.windows.size(); ++i)
      for (std::size_t p = 0; p < a.patches; ++p)
        for (std::size_t r = 0; r < a.top_k; ++r)
          w.row(i, p, r, a.windows[i].picks[p * a.top_k + r], a.windows[i].pick_magnitudes[p * a.top_k + r]);
  }
}

}  // namespace dtaf
