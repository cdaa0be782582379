#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dtaf/cli.hpp"

using namespace dtaf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string log;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "dtaf");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream log;
  int code = cli::run(static_cast<int>(argv.size()), argv.data(), log);
  return {code, log.str()};
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("dtaf_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  std::string config(const std::string& extra_model = "", const std::string& data = "synthetic = regime\nlength = 700",
                     const std::string& train = "max_epochs = 2") {
    auto p = dir_ / "run.ini";
    // Keys in extra_model replace the defaults of the same name.
    std::string model;
    for (const char* line : {"patch_len = 8", "stride = 4", "d_model = 8", "n_experts = 2", "top_k = 3"}) {
      const std::string key = std::string(line).substr(0, std::string(line).find(' '));
      if (extra_model.rfind(key + " ", 0) != 0) model += std::string(line) + "\n";
    }
    std::ofstream(p) << "[data]\n" << data << "\ninput_len = 32\nhorizons = 8\ntrain_stride = 2\n\n"
                     << "[model]\n" << model << extra_model << "\n[train]\n" << train
                     << "\nseeds = 1\n\n[output]\ndir = out\n";
    return p.string();
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, TrainWritesArtifactsWithConfigHash) {
  auto cfg = config();
  auto r = run({"train", "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.log;
  auto run_dir = dir_ / "out" / "h8_seed1";
  for (const char* f : {"model.ckpt", "model.ckpt.bin", "history.csv", "metrics.csv"}) {
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  }
  const auto hash = load_run_config(cfg).hash();
  for (auto p : {run_dir / "history.csv", run_dir / "metrics.csv", dir_ / "out" / "metrics.csv"}) {
    EXPECT_EQ(read_all(p).rfind("# config_hash=" + hash + "\n", 0), 0u) << p;
  }
  EXPECT_NE(read_all(run_dir / "model.ckpt").find("config_hash=" + hash), std::string::npos);
  auto hist = read_all(run_dir / "history.csv");
  EXPECT_NE(hist.find("epoch,task,stable,robust,total,val_mse,val_mae\n"), std::string::npos);
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 4);
}

TEST_F(CliTest, TrainIsByteIdenticalAcrossRuns) {
  auto cfg = config();
  ASSERT_EQ(run({"train", "--config", cfg}).code, 0);
  auto d = dir_ / "out" / "h8_seed1";
  auto h1 = read_all(d / "history.csv"), m1 = read_all(d / "metrics.csv"), b1 = read_all(d / "model.ckpt.bin");
  ASSERT_EQ(run({"train", "--config", cfg}).code, 0);
  EXPECT_EQ(h1, read_all(d / "history.csv"));
  EXPECT_EQ(m1, read_all(d / "metrics.csv"));
  EXPECT_EQ(b1, read_all(d / "model.ckpt.bin"));
}

TEST_F(CliTest, MissingDatasetNamesPath) {
  auto r = run({"train", "--config", config("", "path = nowhere/series.csv")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.log.find("nowhere/series.csv"), std::string::npos) << r.log;
}

TEST_F(CliTest, CsvDatasetRelativeToConfig) {
  write_csv((dir_ / "series.csv").string(), synthetic::regime_switching({.length = 500, .channels = 2}, 4));
  auto r = run({"train", "--config", config("", "path = series.csv")});
  EXPECT_EQ(r.code, 0) << r.log;
}

TEST_F(CliTest, InvalidConfigIsFieldLevel) {
  auto r = run({"train", "--config", config("top_k = 9")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.log.find("top_k"), std::string::npos) << r.log;
  auto unknown = run({"train", "--config", config("depth = 3")});
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.log.find("model.depth"), std::string::npos) << unknown.log;
  auto bad = run({"train", "--config", config("d_model = eight")});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.log.find("model.d_model"), std::string::npos) << bad.log;
  EXPECT_EQ(run({"train", "--config", (dir_ / "absent.ini").string()}).code, 2);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"train"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, TrainingAbortExitsThree) {
  auto r = run({"train", "--config", config("", "synthetic = regime\nlength = 700", "max_epochs = 3\nlr = 1e300")});
  EXPECT_EQ(r.code, 3) << r.log;
  EXPECT_NE(r.log.find("non-finite"), std::string::npos) << r.log;
}

TEST_F(CliTest, EvalMatchesTrainAndIsDeterministic) {
  auto cfg = config();
  ASSERT_EQ(run({"train", "--config", cfg}).code, 0);
  auto d = dir_ / "out" / "h8_seed1";
  ASSERT_EQ(run({"eval", "--config", cfg, "--checkpoint", (d / "model.ckpt").string()}).code, 0);
  auto e1 = read_all(d / "eval_metrics.csv");
  // Same rows as the train-time metrics (val then test).
  auto m = read_all(d / "metrics.csv");
  EXPECT_EQ(e1, m);
  ASSERT_EQ(run({"eval", "--config", cfg, "--checkpoint", d.string()}).code, 0);
  EXPECT_EQ(e1, read_all(d / "eval_metrics.csv"));
}

TEST_F(CliTest, EvalShapeMismatchNamesEmbed) {
  ASSERT_EQ(run({"train", "--config", config()}).code, 0);
  auto ck = (dir_ / "out" / "h8_seed1" / "model.ckpt").string();
  auto r = run({"eval", "--config", config("d_model = 16"), "--checkpoint", ck});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.log.find("embed"), std::string::npos) << r.log;
}

TEST_F(CliTest, SweepTopKAndPatchLength) {
  auto r = run({"sweep", "--config", config("", "synthetic = regime\nlength = 700", "max_epochs = 1"), "--sweep",
                "topk=2,3,4,5"});
  ASSERT_EQ(r.code, 0) << r.log;
  auto table = read_all(dir_ / "out" / "sweep_topk.csv");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 2 + 4);
  for (const char* v : {"\n2,8,1,", "\n3,8,1,", "\n4,8,1,", "\n5,8,1,"}) EXPECT_NE(table.find(v), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "sweep_topk_summary.csv"));

  auto cfg = dir_ / "long.ini";
  std::ofstream(cfg) << "[data]\nsynthetic = regime\nlength = 900\ninput_len = 64\nhorizons = 8\ntrain_stride = 4\n"
                     << "[model]\npatch_len = 16\nstride = 8\nd_model = 8\nn_experts = 2\ntop_k = 3\n"
                     << "[train]\nmax_epochs = 1\n[output]\ndir = out\n";
  auto p = run({"sweep", "--config", cfg.string(), "--sweep", "patch_len=8,16,32,48"});
  ASSERT_EQ(p.code, 0) << p.log;
  auto pt = read_all(dir_ / "out" / "sweep_patch_len.csv");
  EXPECT_EQ(std::count(pt.begin(), pt.end(), '\n'), 2 + 4);
  EXPECT_EQ(pt.find("error"), std::string::npos) << pt;
}

TEST_F(CliTest, SweepArgumentErrors) {
  auto cfg = config();
  auto empty = run({"sweep", "--config", cfg, "--sweep", "topk="});
  EXPECT_EQ(empty.code, 2);
  auto unknown = run({"sweep", "--config", cfg, "--sweep", "heads=1,2"});
  EXPECT_EQ(unknown.code, 2);
  for (const char* n : {"topk", "patch_len", "input_len"}) EXPECT_NE(unknown.log.find(n), std::string::npos);
  EXPECT_EQ(run({"sweep", "--config", cfg, "--sweep", "topk=2,99"}).code, 2);
  EXPECT_EQ(run({"sweep", "--config", cfg}).code, 2);
}

TEST_F(CliTest, AnalyzeWindowsAndDeterminism) {
  auto cfg = config();
  ASSERT_EQ(run({"train", "--config", cfg}).code, 0);
  auto d = dir_ / "out" / "h8_seed1";
  EXPECT_EQ(run({"analyze", "--config", cfg, "--checkpoint", d.string(), "--windows", "0"}).code, 2);
  ASSERT_EQ(run({"analyze", "--config", cfg, "--checkpoint", d.string(), "--windows", "3"}).code, 0);
  auto router = read_all(d / "analysis" / "router_weights.csv");
  // Three windows x N=7 patches x m=2 experts, after comment and header.
  EXPECT_EQ(std::count(router.begin(), router.end(), '\n'), 2 + 3 * 7 * 2);
  EXPECT_NE(router.find("\n2,"), std::string::npos);
  EXPECT_EQ(router.find("\n3,"), std::string::npos);
  auto kl = read_all(d / "analysis" / "patch_kl.csv"), picks = read_all(d / "analysis" / "spectral_picks.csv");
  ASSERT_EQ(run({"analyze", "--config", cfg, "--checkpoint", d.string(), "--windows", "3"}).code, 0);
  EXPECT_EQ(router, read_all(d / "analysis" / "router_weights.csv"));
  EXPECT_EQ(kl, read_all(d / "analysis" / "patch_kl.csv"));
  EXPECT_EQ(picks, read_all(d / "analysis" / "spectral_picks.csv"));
}

TEST_F(CliTest, SeedOverrideChangesHashAndRunDirectory) {
  auto cfg = config();
  auto r = run({"train", "--config", cfg, "--seed", "9", "--out", (dir_ / "alt").string()});
  ASSERT_EQ(r.code, 0) << r.log;
  auto hist = read_all(dir_ / "alt" / "h8_seed9" / "history.csv");
  EXPECT_EQ(hist.find("# config_hash=" + load_run_config(cfg).hash()), std::string::npos);
  EXPECT_EQ(hist.rfind("# config_hash=", 0), 0u);
}

TEST_F(CliTest, GenerateWritesLoadableCsv) {
  auto out = dir_ / "gen.csv";
  ASSERT_EQ(run({"generate", "--out", out.string(), "--length", "300", "--channels", "2"}).code, 0);
  auto ds = load_csv(out.string());
  EXPECT_EQ(ds.length(), 300u);
  EXPECT_EQ(ds.channels(), 2u);
}

TEST(RunConfig, ParsesSectionsAndRejectsDuplicates) {
  std::istringstream in("[data]\nsynthetic = regime # inline comment\nsplit = 0.6, 0.2, 0.2\nhorizons = 24, 48\n"
                        "[train]\nseeds = 1,2,3\nlr = 5e-4\n[output]\ndir = x\n");
  auto rc = parse_run_config(in);
  EXPECT_EQ(rc.horizons, (std::vector<std::size_t>{24, 48}));
  EXPECT_EQ(rc.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_DOUBLE_EQ(rc.ratios.train, 0.6);
  EXPECT_DOUBLE_EQ(rc.train.adamw.lr, 5e-4);
  EXPECT_EQ(rc.hash().size(), 16u);
  std::istringstream dup("[data]\nsynthetic = regime\nsynthetic = regime\n");
  EXPECT_THROW(parse_run_config(dup), ConfigError);
  std::istringstream sect("[optimizer]\n");
  EXPECT_THROW(parse_run_config(sect), ConfigError);
  std::istringstream none("[model]\nd_model = 8\n");
  EXPECT_THROW(parse_run_config(none), ConfigError);
}
