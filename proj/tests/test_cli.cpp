#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "aenet/aenet.hpp"

using namespace aenet;
namespace fs = std::filesystem;
using nlohmann::json;

#ifndef AENET_CLI_PATH
#error "AENET_CLI_PATH must point at the aenet executable"
#endif

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("aenet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Runs the CLI with stdout/stderr captured to files; returns the exit code.
  int run(const std::string& args) {
    const std::string cmd = std::string(AENET_CLI_PATH) + " " + args + " > " + (dir_ / "stdout.txt").string() +
                            " 2> " + (dir_ / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), {}};
  }

  std::string p(const std::string& name) { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Config layer
// ---------------------------------------------------------------------------

TEST(Config, UnknownKeysAreRejected) {
  TrainConfig cfg;
  EXPECT_THROW(io::apply_json(cfg, json{{"learning_rate", 0.1}}), ContractError);
  EXPECT_THROW(io::apply_json(cfg, json{{"channels", -3}}), ContractError);
  EXPECT_THROW(io::apply_json(cfg, json{{"lr", "fast"}}), ContractError);
}

TEST(Config, RoundTripsThroughJson) {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.gen.sigma = 1.5;
  cfg.use_aenet = false;
  cfg.prior = PriorSource::MaxCorrelation;
  TrainConfig back;
  io::apply_json(back, io::to_json(cfg));
  EXPECT_EQ(io::to_json(back), io::to_json(cfg));
}

TEST(Config, MalformedJsonIsAFormatError) {
  EXPECT_THROW(io::parse_json_text("{\"lr\": ", "inline"), FormatError);
}

TEST(Csv, LossCurveHasHeaderAndOneRowPerEpisode) {
  const auto csv = io::loss_curve_csv({0.5, 0.25});
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

// ---------------------------------------------------------------------------
// Executable
// ---------------------------------------------------------------------------

TEST_F(CliTest, GenWritesManifestAndEpisodes) {
  ASSERT_EQ(run("--seed 7 gen --out-dir " + p("eps") + " --count 3 --channels 4 --height 8 --width 8"), 0);
  const auto manifest = json::parse(slurp(dir_ / "eps" / "manifest.json"));
  EXPECT_EQ(manifest["count"], 3);
  EXPECT_EQ(manifest["seed"], 7);
  EXPECT_EQ(manifest["episodes"].size(), 3u);
  EXPECT_EQ(manifest["config"]["channels"], 4);
  const auto stored = io::read_episode_dir(dir_ / "eps");
  ASSERT_EQ(stored.size(), 3u);

  // Episodes read back equal freshly generated ones up to mask quantization.
  TrainConfig cfg;
  cfg.gen.channels = 4;
  cfg.gen.height = 8;
  cfg.gen.width = 8;
  cfg.seed = 7;
  const auto fresh = synth::EpisodeGenerator(cfg.generator()).generate(synth::Split::Novel, 1);
  EXPECT_EQ(stored[1].episode.query_feat, fresh.query_feat);
  EXPECT_EQ(stored[1].episode.query_gt, fresh.query_gt);
  EXPECT_EQ(stored[1].episode.fg_class, fresh.fg_class);
}

TEST_F(CliTest, RefusesToOverwriteWithoutForce) {
  ASSERT_EQ(run("gen --out-dir " + p("eps") + " --channels 4 --height 8 --width 8"), 0);
  EXPECT_EQ(run("gen --out-dir " + p("eps") + " --channels 4 --height 8 --width 8"), 2);
  EXPECT_NE(slurp(dir_ / "stderr.txt").find("--force"), std::string::npos);
  EXPECT_EQ(run("--force gen --out-dir " + p("eps") + " --channels 4 --height 8 --width 8"), 0);
}

TEST_F(CliTest, PriorBridgeRecoversGroundTruthWithoutBlur) {
  ASSERT_EQ(run("--seed 3 gen --out-dir " + p("eps") + " --count 4 --sigma 0 --noise-std 0"), 0);
  ASSERT_EQ(run("--seed 3 prior --episode-dir " + p("eps") + " --out-dir " + p("pri")), 0);
  const auto proto = json::parse(slurp(dir_ / "pri" / "prototypes.json"));
  EXPECT_EQ(proto["seed"], 3);
  ASSERT_EQ(proto["priors"].size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "ep%04zu", i);
    const auto disc = tio::read_mask_pgm<double>(dir_ / "pri" / (std::string(stem) + "_disc.pgm"));
    const auto gt = tio::read_mask_pgm<double>(dir_ / "eps" / (std::string(stem) + "_query_gt.pgm"));
    EXPECT_EQ(threshold(disc), gt) << stem;
  }
}

TEST_F(CliTest, PriorFromExplicitFiles) {
  ASSERT_EQ(run("gen --out-dir " + p("eps") + " --channels 4 --height 8 --width 8"), 0);
  const std::string args = "prior --query " + p("eps/ep0000_query_feat_high.ftns") + " --support " +
                           p("eps/ep0000_s0_feat_high.ftns") + " --mask " + p("eps/ep0000_s0_mask.pgm") +
                           " --out-dir " + p("pri") + " --scale 2";
  ASSERT_EQ(run(args), 0);
  const auto fg = tio::read_mask_pgm<double>(dir_ / "pri" / "prior_fg.pgm");
  EXPECT_EQ(fg.shape(), (Shape{16, 16}));
  EXPECT_EQ(run("prior --query " + p("eps/ep0000_query_feat_high.ftns") + " --out-dir " + p("pri2")), 2);
}

TEST_F(CliTest, MalformedInputsExitWithTwo) {
  {
    std::ofstream(dir_ / "bad.ftns") << "not a tensor";
    std::ofstream(dir_ / "bad.json") << "{\"lr\": ";
    std::ofstream(dir_ / "unknown.json") << "{\"warp\": 9}";
  }
  EXPECT_EQ(run("prior --query " + p("bad.ftns") + " --support " + p("bad.ftns") + " --mask " + p("bad.ftns") +
                " --out-dir " + p("o")),
            2);
  EXPECT_EQ(run("--config " + p("bad.json") + " gen --out-dir " + p("g1")), 2);
  EXPECT_EQ(run("--config " + p("unknown.json") + " gen --out-dir " + p("g2")), 2);
  EXPECT_EQ(run("gen --out-dir " + p("g3") + " --sigma -1"), 2);
  EXPECT_EQ(run("bench --mode nonsense"), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run(""), 2);
}

TEST_F(CliTest, ConfigFileThenFlagOverride) {
  std::ofstream(dir_ / "c.json") << R"({"channels": 4, "height": 8, "width": 8, "sigma": 0.5})";
  ASSERT_EQ(run("--config " + p("c.json") + " gen --out-dir " + p("eps") + " --sigma 1.25"), 0);
  const auto manifest = json::parse(slurp(dir_ / "eps" / "manifest.json"));
  EXPECT_EQ(manifest["config"]["channels"], 4);
  EXPECT_EQ(manifest["config"]["sigma"], 1.25);
}

TEST_F(CliTest, TrainWritesReportCurveAndParams) {
  const std::string cfg = " --channels 4 --height 8 --width 8 --blocks 1 --episodes-train 4 --episodes-eval 2";
  ASSERT_EQ(run("--seed 5 train --out " + p("r.json") + " --curve " + p("c.csv") + " --params " + p("w.ftns") +
                " --pred-dir " + p("pred") + " --pred-count 2" + cfg),
            0);
  const auto rep = json::parse(slurp(dir_ / "r.json"));
  EXPECT_EQ(rep["seed"], 5);
  EXPECT_EQ(rep["loss_curve"].size(), 4u);
  EXPECT_TRUE(fs::exists(dir_ / "pred" / "ep0001_pred.pgm"));
  const auto w = tio::read_tensor_file(dir_ / "w.ftns");
  EXPECT_EQ(w.data.ndim(), 1u);
  EXPECT_EQ(run("--seed 5 train --aenet off --out " + p("r.json") + cfg), 2);
  EXPECT_EQ(run("--seed 5 train --aenet maybe --out " + p("r2.json") + cfg), 2);
}

TEST_F(CliTest, BenchPriorEchoesSeedAndSigmas) {
  ASSERT_EQ(run("--seed 9 bench --mode prior --episodes 5 --sigmas 0 2 --noise-std 0 --channels 8 --height 16 --width 16 --out " +
                p("b.json")),
            0);
  const auto b = json::parse(slurp(dir_ / "b.json"));
  EXPECT_EQ(b["seed"], 9);
  ASSERT_EQ(b["rows"].size(), 2u);
  EXPECT_EQ(b["rows"][0]["auc_disc"]["mean"], 1.0);
}

TEST_F(CliTest, GradcheckPasses) {
  EXPECT_EQ(run("gradcheck --points 5 --out " + p("g.json")), 0);
  const auto g = json::parse(slurp(dir_ / "g.json"));
  EXPECT_TRUE(g["passed"].get<bool>());
}
