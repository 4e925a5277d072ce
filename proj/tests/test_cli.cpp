#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "blockrank/cli.hpp"

using namespace blockrank;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

bool has_file_with_prefix(const fs::path& dir, const std::string& prefix) {
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().rfind(prefix, 0) == 0) return true;
  return false;
}

const std::vector<std::string> kSmallModel{"--model.d_model", "16",         "--train.total_steps", "4",
                                           "--train.warmup_steps", "1",     "--train.batch_size",  "2",
                                           "--layout.chunk_len", "24",      "--train.eval_every",  "2"};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() / "blockrank_cli";
    fs::remove_all(root);
    fs::create_directories(root);
  }
  fs::path root;
};

}  // namespace

TEST_F(Cli, Pipeline) {
  const auto data = (root / "data").string();
  auto r = run({"gen-data", "--n", "24", "--n-eval", "6", "--N", "4", "--task.doc_len", "8", "--task.query_span_len",
                "3", "--out", data});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root / "data" / "data.jsonl"));
  EXPECT_TRUE(fs::exists(root / "data" / "eval.jsonl"));

  const auto run_dir = (root / "run").string();
  std::vector<std::string> train_args{"train", "--data", data, "--eval-data", data, "--out", run_dir};
  train_args.insert(train_args.end(), kSmallModel.begin(), kSmallModel.end());
  r = run(train_args);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"config.json", "vocab.json", "train_log.jsonl", "model.ckpt", "ckpt_step2.ckpt"})
    EXPECT_TRUE(fs::exists(root / "run" / f)) << f;
  const auto snapshot = read_json(root / "run" / "config.json");
  EXPECT_EQ(snapshot["config"]["model"]["d_model"], 16);
  EXPECT_EQ(snapshot["config"]["train"]["total_steps"], 4);
  {
    std::ifstream log(root / "run" / "train_log.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
      const auto j = nlohmann::json::parse(line);
      for (const char* k : {"step", "lr", "ntp", "aux", "total", "grad_norm"}) EXPECT_TRUE(j.contains(k)) << k;
      ++lines;
    }
    EXPECT_EQ(lines, 4);
  }

  const auto eval_dir = root / "eval";
  r = run({"eval", "--ckpt", run_dir, "--out", eval_dir.string(), "--method", "attention"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has_file_with_prefix(eval_dir, "metrics_"));
  EXPECT_TRUE(has_file_with_prefix(eval_dir, "predictions_"));

  r = run({"eval", "--ckpt", run_dir, "--out", (root / "eval_beam").string(), "--method", "beam", "--beam", "3",
           "--limit", "2"});
  ASSERT_EQ(r.code, 0) << r.err;

  const auto bench_dir = root / "bench";
  r = run({"bench", "--ckpt", run_dir, "--out", bench_dir.string(), "--N", "2,4", "--repeats", "1", "--warmup", "0",
           "--methods", "attention,greedy"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has_file_with_prefix(bench_dir, "latency_"));

  const auto an_dir = root / "analyze";
  r = run({"analyze", "--ckpt", run_dir, "--out", an_dir.string(), "--mc", "50", "--n-layerwise", "4",
           "--dump-layout"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has_file_with_prefix(an_dir, "layerwise_"));
  EXPECT_TRUE(has_file_with_prefix(an_dir, "entropy_"));
  EXPECT_TRUE(has_file_with_prefix(an_dir, "segment_mass_l0_"));

  const auto ab_dir = root / "ablate";
  std::vector<std::string> ab_args{"ablate",        "--data",   data,        "--eval-data", data,
                                   "--eval-n",      "2",        "--methods", "attention",   "--loss-modes",
                                   "ntp_only,ntp_plus_aux",     "--out",     ab_dir.string()};
  ab_args.insert(ab_args.end(), kSmallModel.begin(), kSmallModel.end());
  r = run(ab_args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has_file_with_prefix(ab_dir, "ablation_"));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"gen-data", "--bogus", "1", "--out", (root / "x").string()}).code, 2);
  EXPECT_EQ(run({"gen-data", "--model.no_such_key", "1", "--out", (root / "x").string()}).code, 2);
  EXPECT_EQ(run({}).code, 2);
}

TEST_F(Cli, ConfigErrorsExitOne) {
  const auto r = run({"train", "--dry-run", "--model.n_heads", "3", "--model.d_model", "16"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("n_heads"), std::string::npos) << r.err;
  EXPECT_EQ(run({"gen-data", "--n", "0", "--out", (root / "y").string()}).code, 1);
  EXPECT_EQ(run({"train", "--data", (root / "missing.jsonl").string(), "--out", (root / "z").string()}).code, 1);
}

TEST_F(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen-data"), std::string::npos);
}

TEST_F(Cli, RefusesNonEmptyOutputWithoutForce) {
  const auto dir = (root / "gen").string();
  ASSERT_EQ(run({"gen-data", "--n", "3", "--out", dir}).code, 0);
  const auto again = run({"gen-data", "--n", "3", "--out", dir});
  EXPECT_EQ(again.code, 1);
  EXPECT_NE(again.err.find("--force"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--n", "3", "--out", dir, "--force"}).code, 0);
}

TEST_F(Cli, DryRunPrintsMergedConfig) {
  const auto cfg_path = root / "cfg.json";
  std::ofstream(cfg_path) << R"({"model": {"n_layers": 3}, "train.lambda": 0.5})";
  const auto r = run({"train", "--dry-run", "--config", cfg_path.string(), "--train.tau", "0.1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["model"]["n_layers"], 3);
  EXPECT_EQ(j["train"]["lambda"], 0.5);
  EXPECT_EQ(j["train"]["tau"], 0.1);
}

TEST_F(Cli, ReferenceScaleProfile) {
  const auto r = run({"train", "--dry-run", "--profile", "paper_scale"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["layout"]["chunk_len"], 160);
  EXPECT_EQ(j["train"]["lambda"], 0.1);
  EXPECT_EQ(j["train"]["tau"], 0.05);
}

TEST(RunConfig, SetAndRoundTrip) {
  RunConfig c;
  c.set("model.n_layers", "4");
  c.set("train.loss_mode", "aux_only");
  c.set("template.query_in_prefix", "false");
  EXPECT_EQ(c.model.n_layers, 4);
  EXPECT_EQ(c.train.loss_mode, LossMode::aux_only);
  EXPECT_FALSE(c.tmpl.query_in_prefix);
  EXPECT_THROW(c.set("model.nope", "1"), UsageError);
  EXPECT_THROW(c.set("model.n_layers", "four"), Error);
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(RunConfig::from_json({{"model", {{"bogus", 1}}}}), ConfigError);
}
