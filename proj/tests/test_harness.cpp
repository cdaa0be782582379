#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "dtaf/harness.hpp"
#include "fixtures.hpp"

using namespace dtaf;
namespace fs = std::filesystem;

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

SeriesDataset prepared(SeriesDataset ds, SplitRatios r = {0.7, 0.1, 0.2}) { return standardize(split(std::move(ds), r)); }

SeriesDataset regime(std::size_t t = 800) { return prepared(synthetic::regime_switching({.length = t}, 11)); }

TrainOptions quick(std::size_t epochs, std::uint64_t seed = 1) {
  TrainOptions o;
  o.max_epochs = epochs;
  o.seed = seed;
  o.train_stride = 2;
  return o;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

// ---------------------------------------------------------------- baselines

TEST(Persistence, ConstantSeriesIsExact) {
  auto ds = prepared(synthetic::from_function(200, 2, [](auto, auto) { return 5.0; }));
  auto m = persistence_baseline(ds, 24, 6);
  EXPECT_EQ(m.mse, 0.0);
  EXPECT_EQ(m.mae, 0.0);
}

TEST(Persistence, RampClosedForm) {
  const std::size_t t = 1000;
  auto ds = prepared(synthetic::from_function(t, 1, [](std::size_t i, auto) { return double(i); }));
  // Train rows 0..699 have population std sqrt((700^2 - 1) / 12); the
  // standardized ramp rises by 1/std per step, so errors are h/std, h = 1, 2.
  const double sd = std::sqrt((700.0 * 700.0 - 1.0) / 12.0);
  auto m = persistence_baseline(ds, 10, 2);
  EXPECT_NEAR(m.mse, 2.5 / (sd * sd), 1e-12);
  EXPECT_NEAR(m.mae, 1.5 / sd, 1e-12);
}

TEST(Persistence, WhiteNoiseGivesTwiceTheVariance) {
  auto ds = prepared(synthetic::regime_switching({.length = 30000, .period = 1e9, .trend_per_step = 0.0,
                                                  .noise_sigma = 1.0, .low_amplitude = 0.0, .high_amplitude = 0.0},
                                                 2));
  auto m = persistence_baseline(ds, 16, 4);
  EXPECT_NEAR(m.mse, 2.0, 0.2);
}

TEST(LinearBaseline, AffineSeriesIsLearned) {
  auto ds = prepared(synthetic::from_function(1200, 1, [](std::size_t i, auto) { return 0.5 * double(i) - 30.0; }));
  auto lb = linear_baseline(ds, 24, 6, quick(100));
  EXPECT_LT(lb.test.mse, 1e-3);
}

TEST(LinearBaseline, ZeroLearningRateEqualsZeroPredictor) {
  auto ds = regime();
  auto opts = quick(2);
  opts.adamw.lr = 0.0;
  auto lb = linear_baseline(ds, 24, 6, opts);
  auto zero = evaluate_with(make_windows(ds, Split::test, 24, 6), 256,
                            [](const WindowBatch& b) { return std::vector<double>(b.targets.size(), 0.0); });
  EXPECT_EQ(lb.test.mse, zero.mse);
  EXPECT_EQ(lb.test.mae, zero.mae);
}

TEST(LinearBaseline, Deterministic) {
  auto ds = regime();
  auto a = linear_baseline(ds, 24, 6, quick(3)), b = linear_baseline(ds, 24, 6, quick(3));
  EXPECT_EQ(a.test.mse, b.test.mse);
  EXPECT_EQ(a.test.mae, b.test.mae);
}

// ------------------------------------------------------------------- sweeps

TEST(Sweep, ParameterNames) {
  EXPECT_EQ(parse_sweep_param("topk"), SweepParam::top_k);
  EXPECT_EQ(parse_sweep_param("k"), SweepParam::top_k);
  EXPECT_EQ(parse_sweep_param("patch_len"), SweepParam::patch_len);
  EXPECT_EQ(parse_sweep_param("input_len"), SweepParam::input_len);
  try {
    parse_sweep_param("depth");
    FAIL();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    for (const char* n : {"topk", "patch_len", "input_len"}) EXPECT_NE(msg.find(n), std::string::npos) << msg;
  }
}

TEST(Sweep, TopKTableIsComplete) {
  SweepSpec spec;
  spec.param = SweepParam::top_k;
  spec.values = {2, 3, 4, 5};
  spec.base = tiny();
  spec.train = quick(1);
  spec.horizons = {4, 6};
  spec.seeds = {1};
  auto rows = run_sweep(regime(), spec);
  ASSERT_EQ(rows.size(), 8u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].value, spec.values[i / 2]);
    EXPECT_EQ(rows[i].horizon, spec.horizons[i % 2]);
    EXPECT_EQ(rows[i].status, "ok");
    EXPECT_TRUE(std::isfinite(rows[i].mse) && std::isfinite(rows[i].mae));
  }
}

TEST(Sweep, DegenerateSweepEqualsDirectRun) {
  auto ds = regime();
  SweepSpec spec;
  spec.param = SweepParam::patch_len;
  spec.values = {8};
  spec.base = tiny();
  spec.train = quick(2, 5);
  spec.horizons = {6};
  spec.seeds = {5};
  auto rows = run_sweep(ds, spec);
  ASSERT_EQ(rows.size(), 1u);
  auto res = train(ds, tiny(), quick(2, 5));
  auto m = evaluate(ds, Split::test, res.params, tiny());
  EXPECT_EQ(rows[0].mse, m.mse);
  EXPECT_EQ(rows[0].mae, m.mae);
}

TEST(Sweep, CellMeanIsArithmeticMeanOverSeeds) {
  SweepSpec spec;
  spec.param = SweepParam::input_len;
  spec.values = {16, 24};
  spec.base = tiny();
  spec.train = quick(1);
  spec.horizons = {6};
  spec.seeds = {1, 2, 3};
  auto rows = run_sweep(regime(), spec);
  auto cells = sweep_means(rows);
  ASSERT_EQ(cells.size(), 2u);
  for (const auto& c : cells) {
    double mse = 0.0, mae = 0.0;
    for (const auto& r : rows)
      if (r.value == c.value) {
        mse += r.mse;
        mae += r.mae;
      }
    EXPECT_EQ(c.runs, 3u);
    EXPECT_NEAR(c.mse, mse / 3.0, 1e-15);
    EXPECT_NEAR(c.mae, mae / 3.0, 1e-15);
  }
}

TEST(Sweep, FailingCellIsRecordedAndSweepContinues) {
  SweepSpec spec;
  spec.param = SweepParam::top_k;
  spec.values = {2, 99};
  spec.base = tiny();
  spec.train = quick(1);
  spec.horizons = {6};
  spec.seeds = {1};
  auto rows = run_sweep(regime(), spec);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].status, "ok");
  EXPECT_NE(rows[1].status.find("top_k"), std::string::npos) << rows[1].status;
  EXPECT_TRUE(std::isnan(rows[1].mse));
  auto path = fs::temp_directory_path() / "dtaf_sweep_fail.csv";
  write_sweep_csv(path.string(), rows, "config_hash=0");
  auto text = read_all(path);
  EXPECT_EQ(text.rfind("# config_hash=0\nvalue,horizon,seed,mse,mae,status\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_THROW(run_sweep(regime(), SweepSpec{}), ConfigError);
}

TEST(Sweep, ParallelWorkersMatchSerial) {
  SweepSpec spec;
  spec.param = SweepParam::top_k;
  spec.values = {2, 3, 4};
  spec.base = tiny();
  spec.train = quick(1);
  spec.horizons = {6};
  spec.seeds = {1};
  auto ds = regime();
  auto serial = run_sweep(ds, spec);
  ::setenv("DTAF_THREADS", "3", 1);
  auto parallel = run_sweep(ds, spec);
  ::unsetenv("DTAF_THREADS");
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(serial[i].mse, parallel[i].mse);
    EXPECT_EQ(serial[i].mae, parallel[i].mae);
  }
}

// ----------------------------------------------------------------- analysis

TEST(Analyze, ZeroExpertsLeaveKlUnchanged) {
  auto ds = regime();
  auto cfg = tiny();
  auto p = init_params(cfg, 1);
  auto test = make_windows(ds, Split::test, 24, 6);
  auto bundle = analyze(p, cfg, test.gather(sample_windows(test, 5, 1)));
  ASSERT_EQ(bundle.windows.size(), 5u);
  for (const auto& w : bundle.windows) EXPECT_EQ(w.kl_before, w.kl_after);
}

TEST(Analyze, IdenticalPatchesGiveIdenticalRouterRows) {
  auto cfg = tiny();
  cfg.stride = 8;  // T_in = 24, L = 8 -> three disjoint patches
  Engine eng(3);
  auto p = init_params(cfg, 3);
  fixture::randomize(p, eng);
  WindowBatch b;
  b.input_len = 24;
  b.horizon = 6;
  auto seg = fixture::random_values(8, eng);
  for (int i = 0; i < 3; ++i) b.inputs.insert(b.inputs.end(), seg.begin(), seg.end());
  b.targets.assign(6, 0.0);
  b.channel_ids = {0};
  b.origin_indices = {0};
  auto bundle = analyze(p, cfg, b);
  const auto& r = bundle.windows[0].router;
  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(r[i * 2 + e], r[e]);
}

TEST(Analyze, BundleInvariantsAndFiles) {
  auto ds = regime();
  auto cfg = tiny();
  auto res = train(ds, cfg, quick(2));
  auto test = make_windows(ds, Split::test, 24, 6);
  auto ids = sample_windows(test, 3, 7);
  EXPECT_EQ(ids, sample_windows(test, 3, 7));
  auto bundle = analyze(res.params, cfg, test.gather(ids));
  const std::size_t n = cfg.num_patches(), k = cfg.top_k;
  for (const auto& w : bundle.windows) {
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(w.router[i * 2] + w.router[i * 2 + 1], 1.0, 1e-9);
      EXPECT_NEAR(w.kl_before[i * n + i], 0.0, 1e-9);
      EXPECT_NEAR(w.kl_after[i * n + i], 0.0, 1e-9);
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GE(w.kl_before[i * n + j], -1e-12);
        EXPECT_GE(w.kl_after[i * n + j], -1e-12);
      }
    }
    ASSERT_EQ(w.picks.size(), n * k);
    for (auto pk : w.picks) EXPECT_LE(pk, cfg.d_model / 2);
  }
  auto dir = fs::temp_directory_path() / "dtaf_analysis";
  fs::remove_all(dir);
  write_analysis(dir, bundle, "config_hash=1");
  auto router = read_all(dir / "router_weights.csv");
  EXPECT_EQ(router.rfind("# config_hash=1\nwindow,origin,channel,patch,expert,weight\n", 0), 0u);
  EXPECT_EQ(std::count(router.begin(), router.end(), '\n'), 2 + 3 * n * 2);
  auto kl = read_all(dir / "patch_kl.csv");
  EXPECT_EQ(std::count(kl.begin(), kl.end(), '\n'), 2 + 3 * 2 * n * n);
  auto picks = read_all(dir / "spectral_picks.csv");
  EXPECT_EQ(std::count(picks.begin(), picks.end(), '\n'), 2 + 3 * n * k);
}

TEST(Analyze, MeanOffDiagonal) {
  EXPECT_DOUBLE_EQ(mean_off_diagonal({0, 1, 2, 3, 0, 5, 6, 7, 0}, 3), 24.0 / 6.0);
  EXPECT_EQ(mean_off_diagonal({0.0}, 1), 0.0);
}
