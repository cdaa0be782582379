#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dtaf/train.hpp"
#include "fixtures.hpp"

using namespace dtaf;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input_len = 24;
  c.horizon = 6;
  c.patch_len = 8;
  c.stride = 4;
  c.d_model = 8;
  c.n_experts = 2;
  c.top_k = 3;
  return c;
}

SeriesDataset sine(std::size_t t = 600, double noise = 0.0) {
  Engine eng(77);
  auto ds = synthetic::from_function(t, 1, [&](std::size_t i, std::size_t) {
    return std::sin(2.0 * std::numbers::pi * double(i) / 12.0) + noise * normal(eng);
  });
  return standardize(split(std::move(ds), {0.7, 0.1, 0.2}));
}

TrainOptions quick(std::size_t epochs) {
  TrainOptions o;
  o.max_epochs = epochs;
  o.seed = 3;
  o.log_steps = true;
  return o;
}

std::vector<std::vector<double>> values_of(DtafParams& p) {
  std::vector<std::vector<double>> out;
  for (auto& [n, t] : p.named()) out.push_back(t->values());
  return out;
}

}  // namespace

// --------------------------------------------------------------- task loss

TEST(TaskLoss, Examples) {
  EXPECT_EQ(task_loss(Tensor({2}, {1.5, -2}), Tensor({2}, {1.5, -2})).item(), 0.0);
  EXPECT_EQ(task_loss(Tensor({2}, {0, 0}), Tensor({2}, {1, -3})).item(), 2.0);
  Engine eng(1);
  auto p = fixture::random_values(12, eng), t = fixture::random_values(12, eng);
  const double base = task_loss(Tensor({3, 4}, p), Tensor({3, 4}, t)).item();
  for (double c : {-2.5, 0.5, 3.0}) {
    std::vector<double> pc(p), tc(t);
    for (auto& v : pc) v *= c;
    for (auto& v : tc) v *= c;
    EXPECT_NEAR(task_loss(Tensor({3, 4}, pc), Tensor({3, 4}, tc)).item(), std::abs(c) * base, 1e-14);
  }
  EXPECT_THROW(task_loss(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
}

// ------------------------------------------------------------- robust loss

TEST(RobustLoss, ZeroDropoutGivesZero) {
  auto c = tiny();
  c.dropout = 0.0;
  Engine eng(2);
  auto p = init_params(c, 2);
  fixture::randomize(p, eng);
  Tensor x({4, 24}, fixture::random_values(96, eng));
  auto r = robust_loss(x, p, c, CounterRng{1}, 0);
  EXPECT_EQ(r.robust.item(), 0.0);
}

TEST(RobustLoss, ReproducibleAndPositiveWithDropout) {
  auto c = tiny();
  Engine eng(3);
  auto p = init_params(c, 3);
  fixture::randomize(p, eng);
  Tensor x({4, 24}, fixture::random_values(96, eng));
  auto a = robust_loss(x, p, c, CounterRng{9}, 5), b = robust_loss(x, p, c, CounterRng{9}, 5);
  EXPECT_EQ(a.robust.item(), b.robust.item());
  EXPECT_GT(a.robust.item(), 0.0);
  EXPECT_NE(a.first.forecast.values(), a.second.forecast.values());
}

// ----------------------------------------------------------- composite loss

TEST(CompositeLoss, DecompositionAndBetaZero) {
  auto ds = sine();
  auto w = make_windows(ds, Split::train, 24, 6);
  auto batch = w.range(0, 16);
  Engine eng(4);
  auto c = tiny();
  auto p = init_params(c, 4);
  fixture::randomize(p, eng);
  auto s = composite_loss(batch, p, c, CounterRng{2}, 0);
  EXPECT_NEAR(s.parts.total, s.parts.task + c.alpha * s.parts.stable + c.beta * s.parts.robust, 1e-9);
  EXPECT_GT(s.parts.stable, 0.0);
  EXPECT_GT(s.parts.robust, 0.0);
  c.beta = 0.0;
  auto z = composite_loss(batch, p, c, CounterRng{2}, 0);
  EXPECT_EQ(z.parts.robust, 0.0);
  EXPECT_NEAR(z.parts.total, z.parts.task + c.alpha * z.parts.stable, 1e-12);
  c.alpha = 0.0;
  auto l1 = composite_loss(batch, p, c, CounterRng{2}, 0);
  EXPECT_EQ(l1.parts.total, l1.parts.task);
}

TEST(CompositeLoss, DecompositionHoldsOnEveryLoggedStep) {
  auto res = train(sine(), tiny(), quick(2));
  ASSERT_FALSE(res.steps.empty());
  for (const auto& s : res.steps) EXPECT_NEAR(s.total, s.task + s.alpha * s.stable + s.beta * s.robust, 1e-9);
}

// Independent plain-L1 loop: forward, MAE, backward, clip, AdamW.
TEST(CompositeLoss, AlphaBetaZeroIsBitIdenticalToPlainL1) {
  auto ds = sine();
  auto c = tiny();
  c.alpha = c.beta = 0.0;
  auto opts = quick(3);
  auto res = train(ds, c, opts);

  auto params = init_params(c, opts.seed);
  auto tensors = params.tensors();
  const CounterRng rng{derive_seed(opts.seed, 0xd50)};
  AdamWState state{opts.adamw};
  auto train_w = make_windows(ds, Split::train, c.input_len, c.horizon);
  auto val_w = make_windows(ds, Split::val, c.input_len, c.horizon);
  std::vector<double> step_losses;
  double best_mse = INFINITY;
  std::vector<std::vector<double>> best;
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= 3; ++epoch) {
    for (const auto& ids : epoch_batches(train_w.size(), opts.batch_size, opts.seed, epoch)) {
      auto b = train_w.gather(ids);
      for (auto& t : tensors) t.zero_grad();
      Tensor x({b.size(), c.input_len}, b.inputs), y({b.size(), c.horizon}, b.targets);
      auto loss = task_loss(forward(x, params, c, {true, rng, 2 * step}).forecast, y);
      backward(loss);
      std::vector<std::vector<double>> grads;
      for (auto& t : tensors) grads.push_back(t.grad());
      clip_global_norm(grads, opts.clip_norm);
      adamw_step(tensors, grads, state);
      step_losses.push_back(loss.item());
      ++step;
    }
    const double mse = evaluate(val_w, params, c).mse;
    EXPECT_EQ(mse, res.history[epoch - 1].val_mse);
    if (mse < best_mse) {
      best_mse = mse;
      best = values_of(params);
    }
  }
  ASSERT_EQ(res.steps.size(), step_losses.size());
  for (std::size_t i = 0; i < step_losses.size(); ++i) {
    EXPECT_EQ(res.steps[i].total, step_losses[i]) << "step " << i;
    EXPECT_EQ(res.steps[i].total, res.steps[i].task);
  }
  EXPECT_EQ(values_of(res.params), best);
}

// ---------------------------------------------------------------- training

TEST(Train, LossDecreasesOnPureSine) {
  auto opts = quick(20);
  opts.patience = 20;
  auto res = train(sine(), tiny(), opts);
  ASSERT_GE(res.history.size(), 2u);
  EXPECT_LT(res.history.back().val_mse, res.history.front().val_mse);
  EXPECT_LT(res.state.best_val_mse, res.history.front().val_mse);
}

TEST(Train, ZeroLearningRateLeavesParamsUnchanged) {
  auto c = tiny();
  for (double wd : {0.0, 1e-4}) {
    auto opts = quick(2);
    opts.adamw.lr = 0.0;
    opts.adamw.weight_decay = wd;
    auto res = train(sine(), c, opts);
    auto init = init_params(c, opts.seed);
    EXPECT_EQ(values_of(res.params), values_of(init)) << "wd " << wd;
  }
}

TEST(Train, SameSeedSameHistoryDifferentSeedDiffers) {
  auto a = train(sine(), tiny(), quick(2)), b = train(sine(), tiny(), quick(2));
  ASSERT_EQ(a.history.size(), b.history.size());
  EXPECT_EQ(a.history[0].loss.total, b.history[0].loss.total);
  EXPECT_EQ(a.history[0].loss.robust, b.history[0].loss.robust);
  EXPECT_EQ(a.history[1].val_mse, b.history[1].val_mse);
  auto o = quick(2);
  o.seed = 4;
  auto c = train(sine(), tiny(), o);
  EXPECT_NE(a.history[0].loss.total, c.history[0].loss.total);
}

TEST(Train, EarlyStoppingReturnsBestCheckpoint) {
  auto ds = sine(600, 0.3);
  auto opts = quick(40);
  opts.patience = 2;
  opts.adamw.lr = 0.02;
  auto res = train(ds, tiny(), opts);
  double best = res.history.front().val_mse;
  for (const auto& r : res.history) best = std::min(best, r.val_mse);
  EXPECT_EQ(res.state.best_val_mse, best);
  auto again = evaluate(ds, Split::val, res.params, tiny());
  EXPECT_NEAR(again.mse, best, 1e-12);
  if (res.history.size() < 40) {
    EXPECT_EQ(res.history.size(), res.state.best_epoch + opts.patience);
  }
}

TEST(Train, NonFiniteLossNamesBatch) {
  auto ds = sine();
  auto w = make_windows(ds, Split::train, 24, 6);
  Tensor p = Tensor::zeros({1}, true);
  try {
    fit({p}, w,
        [&](const WindowBatch&, std::uint64_t step) {
          StepLoss s;
          s.total = sum(p);
          s.parts.total = step == 2 ? std::nan("") : 0.0;
          return s;
        },
        [] { return Metrics{}; }, quick(1));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 2"), std::string::npos) << e.what();
  }
}

TEST(Train, ClipGlobalNorm) {
  std::vector<std::vector<double>> g{{3.0}, {4.0}};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[1][0], 0.8, 1e-15);
  std::vector<std::vector<double>> small{{0.1, 0.2}};
  clip_global_norm(small, 5.0);
  EXPECT_EQ(small[0], (std::vector<double>{0.1, 0.2}));
}

TEST(Train, EpochBatchesArePermutations) {
  auto a = epoch_batches(103, 32, 1, 1);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(a.back().size(), 7u);
  std::vector<std::size_t> all;
  for (auto& b : a) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 103; ++i) EXPECT_EQ(all[i], i);
  EXPECT_NE(epoch_batches(103, 32, 1, 2)[0], a[0]);
  EXPECT_EQ(epoch_batches(103, 32, 1, 1), a);
}

// -------------------------------------------------------------- evaluation

TEST(Evaluate, ConstantSeriesWithZeroPredictorIsExact) {
  auto ds = standardize(split(synthetic::from_function(200, 2, [](auto, std::size_t c) { return 3.0 + double(c); }),
                              {0.7, 0.1, 0.2}));
  auto c = tiny();
  auto p = init_params(c, 1);
  for (auto& v : p.predictor.weight.mutable_data()) v = 0.0;
  auto m = evaluate(ds, Split::test, p, c);
  EXPECT_EQ(m.mse, 0.0);
  EXPECT_EQ(m.mae, 0.0);
}

TEST(Evaluate, ZeroPredictionOnUnitNoiseAndJensen) {
  auto ds = standardize(split(synthetic::regime_switching({.length = 20000, .period = 1e9, .trend_per_step = 0.0,
                                                           .noise_sigma = 1.0, .low_amplitude = 0.0,
                                                           .high_amplitude = 0.0},
                                                          5),
                              {0.7, 0.1, 0.2}));
  auto w = make_windows(ds, Split::test, 24, 6, 6);
  auto m = evaluate_with(w, 128, [](const WindowBatch& b) { return std::vector<double>(b.targets.size(), 0.0); });
  EXPECT_NEAR(m.mse, 1.0, 0.1);
  EXPECT_LE(m.mae, std::sqrt(m.mse));
  auto res = train(sine(), tiny(), quick(1));
  auto e = evaluate(sine(), Split::test, res.params, tiny());
  EXPECT_LE(e.mae, std::sqrt(e.mse));
}
