// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kTiny =
    " --n_layers=2 --hidden=16 --n_heads=2 --head_dim=8 --intermediate=32 --n_experts=4 --top_k=2 --vocab=64"
    " --calib_seqs=6 --calib_len=24 --eval_seqs=4 --eval_len=24 --group_size=8";

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run(const std::string& args, const std::string& env = "") {
  const fs::path log = fs::temp_directory_path() / "mixcomp_cli_log.txt";
  const std::string cmd = env + " " + MIXCOMP_CLI_PATH + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mixcomp_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST(Cli, PipelineWritesEveryArtifact) {
  const fs::path d = fresh_dir("pipeline");
  const CliResult r = run("pipeline --out_dir=" + d.string() + kTiny);
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* f : {"model.mckp", "calib.txt", "eval.txt", "stats.json", "allocation.json", "model.mcqz",
                        "policy.json", "report.json", "ppl_vs_bits.csv", "reduction_vs_protection.csv"}) {
    EXPECT_TRUE(fs::exists(d / f)) << f;
  }
  const auto rep = read_json(d / "report.json");
  EXPECT_GT(rep["perplexity"].get<double>(), 1.0);
  EXPECT_EQ(rep["policy_mode"], "protected");
  const auto alloc = read_json(d / "allocation.json");
  for (const auto& row : alloc["bits"]) {
    int sum = 0;
    for (const auto& b : row) sum += b.get<int>();
    EXPECT_EQ(sum, 10);
  }
}

TEST(Cli, RunsAreDeterministic) {
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  ASSERT_EQ(run("pipeline --seed=3 --out_dir=" + a.string() + kTiny).code, 0);
  ASSERT_EQ(run("pipeline --seed=3 --out_dir=" + b.string() + kTiny).code, 0);
  for (const char* f : {"model.mckp", "calib.txt", "stats.json", "allocation.json", "model.mcqz", "policy.json",
                        "reduction_vs_protection.csv"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  auto ra = read_json(a / "report.json"), rb = read_json(b / "report.json");
  ra.erase("wall_clock_s");
  rb.erase("wall_clock_s");
  EXPECT_EQ(ra, rb);
}

TEST(Cli, StagesRunSeparatelyAndPolicyFlagApplies) {
  const fs::path d = fresh_dir("stages");
  const std::string base = " --out_dir=" + d.string() + kTiny;
  ASSERT_EQ(run("gen-model" + base).code, 0);
  ASSERT_EQ(run("profile" + base).code, 0);
  ASSERT_EQ(run("allocate" + base + " --strategy=frequency --k 2").code, 0);
  ASSERT_EQ(run("quantize" + base).code, 0);
  ASSERT_EQ(run("eval" + base + " --policy off").code, 0);
  const auto off = read_json(d / "report.json");
  EXPECT_EQ(off["invocation_reduction"].get<double>(), 0.0);
  EXPECT_EQ(off["strategy"], "frequency");
  ASSERT_EQ(run("eval" + base + " --policy protected").code, 0);
  const auto on = read_json(d / "report.json");
  EXPECT_GT(on["invocation_reduction"].get<double>(), 0.0);
  EXPECT_LE(on["invocation_reduction"].get<double>(), 0.5);
}

TEST(Cli, ConfigFileAndEnvironment) {
  const fs::path d = fresh_dir("config");
  fs::create_directories(d);
  std::ofstream(d / "cfg.json") << R"({"n_layers": 1, "hidden": 16, "n_heads": 2, "head_dim": 8,
    "intermediate": 16, "n_experts": 4, "vocab": 32, "calib_seqs": 2, "calib_len": 8})";
  const CliResult r = run("gen-model --config " + (d / "cfg.json").string(), "MIXCOMP_OUT_DIR=" + d.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(d / "model.mckp"));
  EXPECT_EQ(run("gen-model --config " + (d / "missing.json").string()).code, 5);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("gen-model --no_such_key=1").code, 2);
  EXPECT_EQ(run("gen-model --n_layers=two").code, 2);
  const fs::path d = fresh_dir("usage");
  ASSERT_EQ(run("gen-model --out_dir=" + d.string() + kTiny).code, 0);
  ASSERT_EQ(run("profile --out_dir=" + d.string() + kTiny).code, 0);
  const CliResult r = run("allocate --k=1.3 --out_dir=" + d.string() + kTiny);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("1.25"), std::string::npos) << r.output;
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, MissingInputsExitFive) {
  const fs::path d = fresh_dir("missing");
  const CliResult r = run("profile --out_dir=" + d.string());
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.output.find("gen-model"), std::string::npos) << r.output;
  fs::create_directories(d);
  std::ofstream(d / "model.mckp") << "not a checkpoint";
  EXPECT_EQ(run("profile --out_dir=" + d.string()).code, 5);
}

TEST(Cli, InfeasibleBudgetExitsThree) {
  const fs::path d = fresh_dir("infeasible");
  const std::string base = " --out_dir=" + d.string() + kTiny + " --n_experts=2 --k=2";
  ASSERT_EQ(run("gen-model" + base).code, 0);
  ASSERT_EQ(run("profile" + base).code, 0);
  const CliResult r = run("allocate" + base);
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_EQ(run("allocate" + base + " --floors=false").code, 0);
}

TEST(Cli, DigestMismatchIsRefusedUnlessForced) {
  const fs::path a = fresh_dir("digest_a"), b = fresh_dir("digest_b");
  ASSERT_EQ(run("pipeline --seed=1 --out_dir=" + a.string() + kTiny).code, 0);
  ASSERT_EQ(run("gen-model --seed=2 --out_dir=" + b.string() + kTiny).code, 0);
  fs::copy_file(a / "allocation.json", b / "allocation.json");
  const CliResult r = run("quantize --out_dir=" + b.string() + kTiny);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("--force"), std::string::npos) << r.output;
  EXPECT_EQ(run("quantize --force --out_dir=" + b.string() + kTiny).code, 0);
}
