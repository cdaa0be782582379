#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dtaf/adamw.hpp"
#include "dtaf/config.hpp"
#include "dtaf/data.hpp"
#include "dtaf/model.hpp"
#include "dtaf/ops.hpp"
#include "dtaf/params.hpp"
#include "dtaf/random.hpp"

namespace dtaf {

// total = task + alpha * stable + beta * robust, where `stable` is the raw
// (unweighted) mean pairwise KL. alpha is applied exactly once.
struct LossBreakdown {
  double task = 0.0;
  double stable = 0.0;
  double robust = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
};

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t count = 0;  // number of scalar forecast values
};

// Mean absolute error over every element.
inline Tensor task_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("task_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  return mean(abs(sub(pred, target)));
}

struct RobustPass {
  Tensor robust;  // mean squared disagreement between the two passes
  ForwardResult first;
  ForwardResult second;
};

// Two stochastic passes with independent dropout masks (steps 2s and 2s+1).
inline RobustPass robust_loss(const Tensor& x, DtafParams& params, const ModelConfig& cfg, CounterRng rng,
                              std::uint64_t step) {
  RobustPass r;
  r.first = forward(x, params, cfg, {true, rng, 2 * step});
  r.second = forward(x, params, cfg, {true, rng, 2 * step + 1});
  r.robust = mean(square(sub(r.first.forecast, r.second.forecast)));
  return r;
}

struct StepLoss {
  Tensor total;
  LossBreakdown parts;
};

// Composite training objective for one batch. With beta == 0 a single pass is
// run; with alpha == 0 the stable term is not built. Both reduce exactly to
// plain L1 training when alpha == beta == 0.
inline StepLoss composite_loss(const WindowBatch& batch, DtafParams& params, const ModelConfig& cfg, CounterRng rng,
                               std::uint64_t step) {
  const std::size_t b = batch.size();
  Tensor x({b, cfg.input_len}, batch.inputs);
  Tensor target({b, cfg.horizon}, batch.targets);
  StepLoss out;
  out.parts.alpha = cfg.alpha;
  out.parts.beta = cfg.beta;
  Tensor pred, stable, robust;
  if (cfg.beta > 0.0) {
    auto rp = robust_loss(x, params, cfg, rng, step);
    pred = scale(add(rp.first.forecast, rp.second.forecast), 0.5);
    robust = rp.robust;
    if (cfg.alpha > 0.0) {
      stable = scale(add(stable_loss(rp.first.trace.stable, 1.0), stable_loss(rp.second.trace.stable, 1.0)), 0.5);
    }
  } else {
    auto r = forward(x, params, cfg, {true, rng, 2 * step});
    pred = r.forecast;
    if (cfg.alpha > 0.0) stable = stable_loss(r.trace.stable, 1.0);
  }
  Tensor total = task_loss(pred, target);
  out.parts.task = total.item();
  if (stable.defined()) {
    out.parts.stable = stable.item();
    total = add(total, scale(stable, cfg.alpha));
  }
  if (robust.defined()) {
    out.parts.robust = robust.item();
    total = add(total, scale(robust, cfg.beta));
  }
  out.parts.total = total.item();
  out.total = std::move(total);
  return out;
}

struct TrainOptions {
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  AdamWOptions adamw{};
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::size_t train_stride = 1;
  std::size_t eval_stride = 1;
  std::size_t eval_batch = 256;
  bool log_steps = false;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown loss;     // batch means
  double val_mse = 0.0;
  double val_mae = 0.0;
};

struct TrainState {
  std::size_t epoch = 0;
  double best_val_mse = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t patience_counter = 0;
  AdamWState optimizer;
  std::uint64_t rng_seed = 0;
};

struct FitResult {
  TrainState state;
  std::vector<EpochRecord> history;
  std::vector<LossBreakdown> steps;  // filled when TrainOptions::log_steps
};

// Batch order for one epoch: a seeded permutation of [0, n) cut into chunks.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Engine eng(derive_seed(seed, 0xba7c0000ULL + epoch));
  shuffle(order.begin(), order.end(), eng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

// Scales `grads` in place so their joint L2 norm is at most max_norm.
inline double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (auto& v : g) v *= f;
  }
  return norm;
}

// Generic minibatch AdamW loop with per-epoch validation and early stopping.
// On return `params` hold the values from the best validation epoch.
inline FitResult fit(std::vector<Tensor> params, const WindowSet& train,
                     const std::function<StepLoss(const WindowBatch&, std::uint64_t)>& step_loss,
                     const std::function<Metrics()>& validate, const TrainOptions& opts) {
  FitResult res;
  auto& st = res.state;
  st.optimizer.options = opts.adamw;
  st.rng_seed = opts.seed;
  std::vector<std::vector<double>> best;
  for (const auto& p : params) best.push_back(p.values());
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= opts.max_epochs; ++epoch) {
    st.epoch = epoch;
    EpochRecord rec;
    rec.epoch = epoch;
    auto batches = epoch_batches(train.size(), opts.batch_size, opts.seed, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      auto batch = train.gather(batches[bi]);
      for (auto& p : params) p.zero_grad();
      StepLoss loss = step_loss(batch, step);
      if (!std::isfinite(loss.parts.total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) +
                           " (first window origin " + std::to_string(batch.origin_indices.front()) + ", channel " +
                           std::to_string(batch.channel_ids.front()) + ")");
      }
      backward(loss.total);
      std::vector<std::vector<double>> grads;
      grads.reserve(params.size());
      for (const auto& p : params) grads.push_back(p.grad());
      clip_global_norm(grads, opts.clip_norm);
      adamw_step(params, grads, st.optimizer);
      ++step;
      rec.loss.task += loss.parts.task;
      rec.loss.stable += loss.parts.stable;
      rec.loss.robust += loss.parts.robust;
      rec.loss.total += loss.parts.total;
      rec.loss.alpha = loss.parts.alpha;
      rec.loss.beta = loss.parts.beta;
      if (opts.log_steps) res.steps.push_back(loss.parts);
    }
    const double nb = static_cast<double>(batches.size());
    rec.loss.task /= nb;
    rec.loss.stable /= nb;
    rec.loss.robust /= nb;
    rec.loss.total /= nb;
    Metrics val = validate();
    if (!std::isfinite(val.mse)) throw NumericError("non-finite validation MSE at epoch " + std::to_string(epoch));
    rec.val_mse = val.mse;
    rec.val_mae = val.mae;
    res.history.push_back(rec);
    if (val.mse < st.best_val_mse) {
      st.best_val_mse = val.mse;
      st.best_epoch = epoch;
      st.patience_counter = 0;
      for (std::size_t i = 0; i < params.size(); ++i) best[i] = params[i].values();
    } else if (++st.patience_counter >= opts.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].mutable_data();
    std::copy(best[i].begin(), best[i].end(), dst.begin());
  }
  return res;
}

// Accumulates squared and absolute errors of `predict(batch)` over a window set.
inline Metrics evaluate_with(const WindowSet& windows, std::size_t batch_size,
                             const std::function<std::vector<double>(const WindowBatch&)>& predict_batch) {
  NoGradGuard ng;
  double se = 0.0, ae = 0.0;
  std::size_t count = 0;
  for (std::size_t first = 0; first < windows.size(); first += batch_size) {
    auto batch = windows.range(first, batch_size);
    auto pred = predict_batch(batch);
    if (pred.size() != batch.targets.size()) throw ShapeError("evaluate: prediction size mismatch");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double e = pred[i] - batch.targets[i];
      se += e * e;
      ae += std::abs(e);
    }
    count += pred.size();
  }
  return {se / static_cast<double>(count), ae / static_cast<double>(count), count};
}

// Dropout-free metrics of a DTAF model over a prepared window set.
inline Metrics evaluate(const WindowSet& windows, DtafParams& params, const ModelConfig& cfg,
                        std::size_t batch_size = 256) {
  return evaluate_with(windows, batch_size, [&](const WindowBatch& b) {
    return forward(Tensor({b.size(), cfg.input_len}, b.inputs), params, cfg).forecast.values();
  });
}

inline Metrics evaluate(const SeriesDataset& ds, Split which, DtafParams& params, const ModelConfig& cfg,
                        std::size_t stride = 1) {
  return evaluate(make_windows(ds, which, cfg.input_len, cfg.horizon, stride), params, cfg);
}

struct TrainResult {
  DtafParams params;
  TrainState state;
  std::vector<EpochRecord> history;
  std::vector<LossBreakdown> steps;
};

// Trains DTAF on the (standardized) dataset's train split, validating on val.
inline TrainResult train(const SeriesDataset& ds, const ModelConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  auto train_windows = make_windows(ds, Split::train, cfg.input_len, cfg.horizon, opts.train_stride);
  auto val_windows = make_windows(ds, Split::val, cfg.input_len, cfg.horizon, opts.eval_stride);
  TrainResult out;
  out.params = init_params(cfg, opts.seed);
  const CounterRng rng{derive_seed(opts.seed, 0xd50)};
  auto fitted = fit(
      out.params.tensors(), train_windows,
      [&](const WindowBatch& b, std::uint64_t step) { return composite_loss(b, out.params, cfg, rng, step); },
      [&] { return evaluate(val_windows, out.params, cfg, opts.eval_batch); }, opts);
  out.state = std::move(fitted.state);
  out.history = std::move(fitted.history);
  out.steps = std::move(fitted.steps);
  return out;
}

}  // namespace dtaf
