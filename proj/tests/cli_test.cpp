#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "captoy/common.hpp"
#include "captoy/toy_data.hpp"

namespace fs = std::filesystem;

namespace captoy {
namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / "captoy_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  CliResult run(const std::string& args) const {
    const fs::path out_file = dir_ / "cli_stdout.txt";
    const std::string cmd = std::string(CAPTOY_CLI_PATH) + " " + args + " > " +
                            out_file.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliResult res;
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream is(out_file);
    std::ostringstream ss;
    ss << is.rdbuf();
    res.out = ss.str();
    return res;
  }

  void write_config(const std::string& name, const std::string& extra = "") const {
    std::ofstream os(path(name));
    os << "[data]\n"
          "channels = 6\n"
          "num_text_classes = 4\n"
          "num_speakers = 2\n"
          "seed = 3\n"
          "n_utterances = 24\n"
          "holdout_fraction = 0.25\n"
          "[model]\n"
          "latent_dim = 1\n"
          "hidden_dim = 16\n"
          "[train]\n"
          "steps = 40\n"
          "batch_size = 4\n"
          "seed = 5\n"
       << extra;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

TEST_F(CliTest, GenDataWritesLoadableFile) {
  write_config("cfg.txt");
  const CliResult res =
      run("gen-data --config " + path("cfg.txt").string() + " --out " + path("d.bin").string());
  ASSERT_EQ(res.exit_code, 0) << res.out;
  const auto [spec, data] = load_dataset(path("d.bin").string());
  EXPECT_EQ(spec.channels, 6);
  EXPECT_EQ(data.size(), 24u);
}

TEST_F(CliTest, TrainRunDirReproducesBitExactly) {
  write_config("cfg.txt");
  const std::string cfg = path("cfg.txt").string();
  ASSERT_EQ(run("train --config " + cfg + " --out " + path("r1").string()).exit_code, 0);
  // Re-running from the resolved config must reproduce the metrics exactly.
  ASSERT_EQ(run("train --config " + path("r1/config.txt").string() + " --out " +
                path("r2").string())
                .exit_code,
            0);
  const std::string m1 = slurp(path("r1/metrics.csv"));
  const std::string m2 = slurp(path("r2/metrics.csv"));
  ASSERT_FALSE(m1.empty());
  EXPECT_EQ(m1, m2);
  EXPECT_TRUE(fs::exists(path("r1/model.ckpt")));
  EXPECT_TRUE(fs::exists(path("r1/eval.txt")));
}

TEST_F(CliTest, SeedFlagChangesTheRun) {
  write_config("cfg.txt");
  const std::string cfg = path("cfg.txt").string();
  ASSERT_EQ(run("train --config " + cfg + " --out " + path("r1").string()).exit_code, 0);
  ASSERT_EQ(
      run("train --config " + cfg + " --seed 6 --out " + path("r3").string()).exit_code, 0);
  EXPECT_NE(slurp(path("r1/metrics.csv")), slurp(path("r3/metrics.csv")));
}

TEST_F(CliTest, VerifyBoundsPassesOnTrainedFlatModel) {
  write_config("cfg.txt");
  ASSERT_EQ(run("gen-data --config " + path("cfg.txt").string() + " --out " +
                path("d.bin").string())
                .exit_code,
            0);
  ASSERT_EQ(run("train --config " + path("cfg.txt").string() + " --out " + path("r").string())
                .exit_code,
            0);
  const CliResult res = run("verify-bounds --model " + path("r/model.ckpt").string() +
                            " --data " + path("d.bin").string());
  EXPECT_EQ(res.exit_code, 0) << res.out;
  EXPECT_NE(res.out.find("bounds: OK"), std::string::npos);
  EXPECT_NE(res.out.find("[PASS] i_q <= r_avg"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run("").exit_code, 1);
  EXPECT_EQ(run("no-such-command").exit_code, 1);
  EXPECT_EQ(run("train --config " + path("missing.txt").string() + " --out " +
                path("r").string())
                .exit_code,
            1);
  EXPECT_EQ(run("train --nonsense-flag").exit_code, 1);
  EXPECT_EQ(run("mcd-dtw --a " + path("x.wav").string() + " --b " + path("d.bin").string())
                .exit_code,
            1);
}

TEST_F(CliTest, McdDtwPairsDatasetsByIndex) {
  write_config("cfg.txt");
  ASSERT_EQ(run("gen-data --config " + path("cfg.txt").string() + " --out " +
                path("d.bin").string())
                .exit_code,
            0);
  const CliResult res = run("mcd-dtw --a " + path("d.bin").string() + " --b " +
                            path("d.bin").string() + " --out " + path("pairs.csv").string());
  ASSERT_EQ(res.exit_code, 0) << res.out;
  std::ifstream is(path("pairs.csv"));
  std::string line;
  ASSERT_TRUE(std::getline(is, line));
  EXPECT_EQ(line, "id_a,id_b,mcd_dtw");
  int rows = 0;
  while (std::getline(is, line)) {
    EXPECT_NE(line.find(",0"), std::string::npos) << "self-comparison should be zero: " << line;
    ++rows;
  }
  EXPECT_EQ(rows, 24);
}

TEST_F(CliTest, TransferWritesLoadableSequences) {
  write_config("cfg.txt");
  ASSERT_EQ(run("gen-data --config " + path("cfg.txt").string() + " --out " +
                path("d.bin").string())
                .exit_code,
            0);
  ASSERT_EQ(run("train --config " + path("cfg.txt").string() + " --out " + path("r").string())
                .exit_code,
            0);
  const CliResult res =
      run("transfer --model " + path("r/model.ckpt").string() + " --data " +
          path("d.bin").string() + " --out " + path("t").string() + " --limit 3 --samples 2");
  ASSERT_EQ(res.exit_code, 0) << res.out;
  const auto [spec, generated] = load_dataset(path("t/generated.bin").string());
  EXPECT_EQ(spec.channels, 6);
  EXPECT_EQ(generated.size(), 6u);  // 3 references x 2 samples
  EXPECT_TRUE(fs::exists(path("t/transfer.csv")));
}

TEST_F(CliTest, SampleWritesRequestedDraws) {
  write_config("cfg.txt");
  ASSERT_EQ(run("train --config " + path("cfg.txt").string() + " --out " + path("r").string())
                .exit_code,
            0);
  const CliResult res = run("sample --model " + path("r/model.ckpt").string() + " --out " +
                            path("s").string() + " --text 2 --speaker 1 --samples 3 --max-len 50");
  ASSERT_EQ(res.exit_code, 0) << res.out;
  const auto [spec, generated] = load_dataset(path("s/samples.bin").string());
  ASSERT_EQ(generated.size(), 3u);
  for (const Utterance& u : generated) {
    EXPECT_EQ(u.y_t, 2);
    EXPECT_EQ(u.y_s, 1);
    EXPECT_LE(u.length(), 50);
  }
}

TEST_F(CliTest, SweepWritesOneRowPerCell) {
  write_config("cfg.txt",
               "[sweep]\n"
               "c_list = 0.5, 4\n"
               "latent_dim_list = 1, 2\n");
  const CliResult res = run("sweep --config " + path("cfg.txt").string() + " --out " +
                            path("sw").string() + " --jobs 2");
  ASSERT_EQ(res.exit_code, 0) << res.out;
  std::ifstream is(path("sw/summary.csv"));
  std::string header;
  ASSERT_TRUE(std::getline(is, header));
  EXPECT_EQ(header.rfind("cell,latent_dim,hierarchical,fixed_beta,beta,c,c_h,c_l,status", 0), 0u);
  int rows = 0, ok_rows = 0;
  std::string line;
  while (std::getline(is, line)) {
    ++rows;
    if (line.find(",ok,") != std::string::npos) ++ok_rows;
  }
  EXPECT_EQ(rows, 4);
  EXPECT_EQ(ok_rows, 4);
  for (int k = 0; k < 4; ++k)
    EXPECT_TRUE(fs::exists(path("sw/cell_" + std::to_string(k) + "/metrics.csv")));
}

}  // namespace
}  // namespace captoy
