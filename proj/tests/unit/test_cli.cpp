#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "gdnsq/checkpoint.hpp"
#include "gdnsq/pipeline.hpp"

namespace gdnsq {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::parse_and_dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliPipeline : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "gdnsq_cli_test"; }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    const std::vector<std::string> data{"--n-train", "300", "--n-val", "200"};
    auto fp = data;
    fp.insert(fp.begin(), {"train-fp", "--seed", "3", "--epochs", "10", "--out", (root() / "fp").string()});
    ASSERT_EQ(cli(fp).code, 0);
    ASSERT_EQ(cli({"ptq", "--ckpt", (root() / "fp" / "fp.ckpt").string(), "--out", (root() / "ptq").string()}).code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(root()); }

  static std::vector<std::string> qat_args(const std::string& out) {
    return {"qat",       "--ckpt",  (root() / "ptq" / "ptq.ckpt").string(), "--teacher", (root() / "fp" / "fp.ckpt").string(),
            "--epochs",  "2",       "--seed",                                "5",         "--out",
            (root() / out).string()};
  }
};

TEST_F(CliPipeline, StagesWriteTheirArtifacts) {
  EXPECT_TRUE(fs::exists(root() / "fp" / "run.json"));
  auto fp = Checkpoint::load(root() / "fp" / "fp.ckpt");
  EXPECT_EQ(fp.text("meta/kind"), "fp");
  auto ptq = Checkpoint::load(root() / "ptq" / "ptq.ckpt");
  EXPECT_EQ(ptq.text("meta/kind"), "ptq");

  auto r = cli(qat_args("qat"));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"run.json", "last.ckpt", "metrics.csv"}) EXPECT_TRUE(fs::exists(root() / "qat" / f)) << f;
  EXPECT_NE(r.out.find("max actual"), std::string::npos);

  auto audit = cli({"audit", "--ckpt", (root() / "qat" / "last.ckpt").string()});
  EXPECT_EQ(audit.code, 0) << audit.err;
  EXPECT_NE(audit.out.find("weights"), std::string::npos);

  auto csv = cli({"export-metrics", "--run-dir", (root() / "qat").string()});
  EXPECT_EQ(csv.code, 0);
  EXPECT_EQ(csv.out, slurp(root() / "qat" / "metrics.csv"));
  auto json = cli({"export-metrics", "--run-dir", (root() / "qat").string(), "--format", "json"});
  EXPECT_EQ(json.code, 0);
  EXPECT_EQ(json.out.front(), '[');

  auto fuse = cli({"fuse", "--ckpt", (root() / "qat" / "last.ckpt").string(), "--out", (root() / "fused").string()});
  EXPECT_EQ(fuse.code, 0) << fuse.err;
  EXPECT_TRUE(fs::exists(root() / "fused" / "fused.json"));
}

TEST_F(CliPipeline, QatIsByteReproducible) {
  ASSERT_EQ(cli(qat_args("rep_a")).code, 0);
  ASSERT_EQ(cli(qat_args("rep_b")).code, 0);
  EXPECT_EQ(slurp(root() / "rep_a" / "metrics.csv"), slurp(root() / "rep_b" / "metrics.csv"));
  EXPECT_EQ(slurp(root() / "rep_a" / "last.ckpt"), slurp(root() / "rep_b" / "last.ckpt"));
}

TEST_F(CliPipeline, ResumeMatchesUninterruptedRun) {
  auto full = qat_args("full");
  full[6] = "3";
  ASSERT_EQ(cli(full).code, 0);
  ASSERT_EQ(cli(qat_args("part")).code, 0);
  auto resumed = cli({"qat", "--teacher", (root() / "fp" / "fp.ckpt").string(), "--resume",
                      (root() / "part" / "last.ckpt").string(), "--epochs", "3", "--out", (root() / "part").string()});
  ASSERT_EQ(resumed.code, 0) << resumed.err;
  EXPECT_EQ(slurp(root() / "full" / "metrics.csv"), slurp(root() / "part" / "metrics.csv"));
  auto a = Checkpoint::load(root() / "full" / "last.ckpt");
  auto b = Checkpoint::load(root() / "part" / "last.ckpt");
  for (const auto& s : a.sections()) {
    if (s.name.rfind("model/", 0) == 0 || s.name.rfind("optim/", 0) == 0) {
      EXPECT_EQ(s.payload, b.section(s.name).payload) << s.name;
    }
  }
}

TEST_F(CliPipeline, ConfigPrecedence) {
  const auto cfg = root() / "cfg.json";
  std::ofstream(cfg) << R"({"wbits": 3, "abits": 5, "epochs": 1, "seed": 11})";
  auto args = qat_args("cfg");
  args.insert(args.end(), {"--config", cfg.string(), "--abits", "6"});
  // flags win over the file, the file wins over defaults
  ASSERT_EQ(cli(args).code, 0);
  auto c = RunConfig::from_json(slurp(root() / "cfg" / "run.json"));
  EXPECT_EQ(c.targets.weights, 3.0);
  EXPECT_EQ(c.targets.activations, 6.0);
  EXPECT_EQ(c.epochs, 2u);
  EXPECT_EQ(c.seed, 5u);
}

TEST_F(CliPipeline, SeedFallsBackToEnvironment) {
  auto args = qat_args("env");
  args.erase(args.begin() + 7, args.begin() + 9);
  ::setenv("GDNSQ_SEED", "42", 1);
  auto r = cli(args);
  ::unsetenv("GDNSQ_SEED");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(RunConfig::from_json(slurp(root() / "env" / "run.json")).seed, 42u);

  ::setenv("GDNSQ_SEED", "abc", 1);
  EXPECT_EQ(cli(args).code, 2);
  ::unsetenv("GDNSQ_SEED");
}

TEST_F(CliPipeline, FlagMapping) {
  auto args = qat_args("flags");
  args.insert(args.end(), {"--wbits", "2", "--abits", "3", "--noise-mode", "rounding_residual", "--distill",
                           "cross_entropy", "--initial-tq", "100"});
  ASSERT_EQ(cli(args).code, 0);
  auto c = RunConfig::from_json(slurp(root() / "flags" / "run.json"));
  EXPECT_EQ(c.targets.weights, 2.0);
  EXPECT_EQ(c.targets.activations, 3.0);
  EXPECT_EQ(c.noise_mode, NoiseMode::rounding_residual);
  EXPECT_EQ(c.distill, DistillLoss::cross_entropy);
  EXPECT_EQ(c.initial_t_q, 100.0);
}

TEST_F(CliPipeline, InvalidCombinationsAreUsageErrors) {
  const auto teacher = (root() / "fp" / "fp.ckpt").string();
  const auto ptq = (root() / "ptq" / "ptq.ckpt").string();
  const auto out = (root() / "bad").string();
  EXPECT_EQ(cli({"qat", "--teacher", teacher, "--out", out}).code, 2);
  EXPECT_EQ(cli({"qat", "--ckpt", ptq, "--out", out}).code, 2);
  EXPECT_EQ(cli({"qat", "--ckpt", ptq, "--teacher", teacher, "--no-ptq", "--out", out}).code, 2);
  EXPECT_EQ(cli({"qat", "--ckpt", ptq, "--teacher", teacher, "--wbits", "0.5", "--out", out}).code, 2);
  EXPECT_EQ(cli({"qat", "--teacher", ptq, "--ckpt", ptq, "--out", out}).code, 2);
  EXPECT_EQ(cli({"audit", "--ckpt", teacher}).code, 2);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_EQ(cli({"train-fp", "--bogus"}).code, 2);
  EXPECT_EQ(cli({"verify", "--filter", "bsc"}).code, 0);
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST(Cli, RuntimeFailureIsExitOne) {
  auto dir = fs::temp_directory_path() / "gdnsq_cli_bad_ckpt";
  fs::create_directories(dir);
  std::ofstream(dir / "x.ckpt") << "not a checkpoint";
  auto r = cli({"audit", "--ckpt", (dir / "x.ckpt").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("magic"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, HelpDescribesTargets) {
  auto r = cli({"qat", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("omega_w*"), std::string::npos);
  EXPECT_NE(r.out.find("GDNSQ_SEED"), std::string::npos);
}

}  // namespace
}  // namespace gdnsq
