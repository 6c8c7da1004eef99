#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::json;

struct Outcome {
  int exit_code;
  std::string output;
};

Outcome run_cli(const std::string& args) {
  const std::string cmd = std::string(DAGG_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path scratch() {
  auto dir = fs::temp_directory_path() / "dagg_cli_test";
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Errors are one JSON line naming the failure class, after any warning lines.
void expect_single_line_error(const Outcome& o, int code, const std::string& kind) {
  EXPECT_EQ(o.exit_code, code) << o.output;
  ASSERT_FALSE(o.output.empty());
  ASSERT_EQ(o.output.back(), '\n');
  std::istringstream in(o.output);
  std::vector<Json> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(Json::parse(line));
  for (std::size_t i = 0; i + 1 < lines.size(); ++i) EXPECT_TRUE(lines[i].contains("warning")) << o.output;
  EXPECT_EQ(lines.back()["error"], kind);
  EXPECT_TRUE(lines.back()["message"].is_string());
}

TEST(Cli, UsageAndConfigErrors) {
  const auto dir = scratch();
  expect_single_line_error(run_cli("run"), 2, "UsageError");
  expect_single_line_error(run_cli("bogus"), 2, "UsageError");
  expect_single_line_error(run_cli("grid --config x --jobs 0"), 2, "UsageError");
  expect_single_line_error(run_cli("run --config " + (dir / "missing.json").string()), 1, "IoError");
  write(dir / "broken.json", "{\"dataset\": ");
  expect_single_line_error(run_cli("run --config " + (dir / "broken.json").string()), 1, "ParseError");
  write(dir / "typo.json", R"({"dataset": {}, "paths": [{"id": "st", "kind": "st"}], "epochz": 1})");
  auto typo = run_cli("run --config " + (dir / "typo.json").string());
  expect_single_line_error(typo, 1, "ValidationError");
  EXPECT_NE(typo.output.find("epochz"), std::string::npos);
  expect_single_line_error(run_cli("inspect " + (dir / "typo.json").string()), 1, "BadMagic");
}

TEST(Cli, CsvGridWithOverrides) {
  const auto dir = scratch();
  std::string csv = "x0,x1,label\n";
  for (int i = 0; i < 120; ++i) {
    const int label = i % 3;
    csv += std::to_string(label + 0.1 * (i % 7)) + "," + std::to_string(-label + 0.05 * (i % 5)) + "," +
           std::to_string(label) + "\n";
  }
  write(dir / "rows.csv", csv);
  const std::string cfg = R"({"dataset": {"kind": "csv", "path": ")" + (dir / "rows.csv").string() +
                          R"(", "input_dim": 2, "classes": 3},
    "teacher": {"model": {"kind": "mlp", "hidden": [16]}, "pretrain": {"epochs": 3}},
    "student": {"kind": "mlp", "hidden": [4]},
    "paths": [{"id": "st", "kind": "st"}, {"id": "h", "kind": "l2_logit"}],
    "aggregation": {"strategy": ["equal", "adaptive"], "alpha": 1.5},
    "epochs": 2, "seed": [5, 6, 7], "output_dir": "unused"})";
  write(dir / "cfg.json", cfg);
  const auto out = dir / "out";
  fs::remove_all(out);
  const std::string base = "grid --config " + (dir / "cfg.json").string() + " --out " + out.string();

  // The header line is rejected unless --csv-header is given; alpha 1.5 needs --unsafe-alpha.
  expect_single_line_error(run_cli(base + " --unsafe-alpha"), 1, "NonNumericField");
  expect_single_line_error(run_cli(base + " --csv-header"), 1, "ValidationError");
  auto ok = run_cli(base + " --csv-header --unsafe-alpha --seed 9 --jobs 2");
  ASSERT_EQ(ok.exit_code, 0) << ok.output;
  EXPECT_NE(ok.output.find("\"warning\""), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "equal-seed9" / "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(out / "adaptive-seed9" / "weights.csv"));
  EXPECT_FALSE(fs::exists(out / "equal-seed5"));
  EXPECT_TRUE(fs::exists(out / "config.json"));
  EXPECT_EQ(slurp(out / "results.csv").substr(0, 32), "strategy,seed,top1_err,top1_agr\n");

  auto inspect = run_cli("inspect " + (out / "teacher" / "teacher.ckpt").string());
  ASSERT_EQ(inspect.exit_code, 0) << inspect.output;
  EXPECT_NE(inspect.output.find("[2,16]"), std::string::npos) << inspect.output;

  // Reusing the saved teacher gives the same numbers as pretraining in-process.
  auto resolved = Json::parse(slurp(out / "config.json"));
  resolved["teacher"]["checkpoint"] = (out / "teacher" / "teacher.ckpt").string();
  resolved["dataset"]["header"] = true;
  resolved["output_dir"] = (dir / "reuse").string();
  write(dir / "reuse.json", resolved.dump());
  auto reuse = run_cli("run --unsafe-alpha --config " + (dir / "reuse.json").string());
  ASSERT_EQ(reuse.exit_code, 0) << reuse.output;
  EXPECT_EQ(slurp(dir / "reuse" / "results.csv"), slurp(out / "results.csv"));
  EXPECT_EQ(slurp(dir / "reuse" / "adaptive-seed9" / "metrics.jsonl"), slurp(out / "adaptive-seed9" / "metrics.jsonl"));
}

TEST(Cli, PretrainWritesCheckpoint) {
  const auto dir = scratch();
  write(dir / "pre.json", R"({"dataset": {"kind": "synthetic", "generator": "gaussian_blobs", "classes": 3, "n": 300},
    "teacher": {"model": {"kind": "mlp", "hidden": [8]}, "pretrain": {"epochs": 2}},
    "student": {"kind": "mlp"}, "aggregation": {"strategy": "student"}})");
  auto o = run_cli("pretrain --config " + (dir / "pre.json").string() + " --out " + (dir / "pre").string());
  ASSERT_EQ(o.exit_code, 0) << o.output;
  auto j = Json::parse(o.output);
  EXPECT_TRUE(fs::exists(j["checkpoint"].get<std::string>()));
  EXPECT_TRUE(fs::exists(dir / "pre" / "teacher" / "teacher_metrics.json"));
}

}  // namespace
