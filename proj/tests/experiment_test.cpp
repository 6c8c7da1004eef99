#include <gtest/gtest.h>

#include <sstream>

#include "dagg/experiment.hpp"
#include "support/corpus.hpp"

namespace dagg {
namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

class ExperimentTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "dagg_experiment_test";
    fs::remove_all(root_);
    auto corpus = testing::make_pattern_corpus(240, 4, 8, 0.08, 0.3, 11);
    write_idx(root_ / "img.idx", root_ / "lab.idx", corpus.images, corpus.labels);
  }

  static std::string config_text(const fs::path& out, const std::string& strategies, const std::string& extra = "") {
    return R"({"dataset": {"kind": "idx", "images": ")" + (root_ / "img.idx").string() + R"(", "labels": ")" +
           (root_ / "lab.idx").string() + R"(", "classes": 4},
      "teacher": {"model": {"width": 2}, "pretrain": {"epochs": 3, "batch_size": 32,
                  "optimizer": {"lr": 0.05}}},
      "student": {"width": 1},
      "paths": [{"id": "at", "kind": "at", "student_tap": ["b1", "b2", "b3"]}, {"id": "st", "kind": "st"}],
      "aggregation": {"strategy": )" + strategies + extra + R"(},
      "optimizer": {"lr": 0.05}, "epochs": 2, "batch_size": 32, "seed": [0, 1], "sim_every": 3,
      "output_dir": ")" + out.string() + R"("})";
  }

  static inline fs::path root_;
};

TEST_F(ExperimentTest, GridWritesLogsAndResults) {
  const auto out = root_ / "grid";
  auto cfg = parse_config(config_text(out, R"(["student", "equal", "adaptive"])"));
  auto ctx = prepare(cfg);
  EXPECT_TRUE(fs::exists(out / "teacher" / "teacher.ckpt"));
  EXPECT_TRUE(fs::exists(out / "teacher" / "teacher_metrics.json"));
  EXPECT_EQ(ctx.data.train.size() + ctx.data.val.size(), 240u);
  EXPECT_EQ(ctx.data.val.size(), 48u);
  auto runs = run_grid(ctx);
  ASSERT_EQ(runs.size(), 6u);

  const auto results = lines_of(slurp(out / "results.csv"));
  ASSERT_EQ(results.size(), 7u);
  EXPECT_EQ(results[0], "strategy,seed,top1_err,top1_agr");
  for (const auto& r : runs) {
    const auto dir = out / r.run_id;
    const auto metrics = lines_of(slurp(dir / "metrics.jsonl"));
    ASSERT_EQ(metrics.size(), 3u);
    auto first = Json::parse(metrics[0]);
    for (const char* key : {"epoch", "top1_err", "top1_agreement_err", "main_loss", "per_path_losses", "v"}) {
      EXPECT_TRUE(first.contains(key)) << key;
    }
    auto last = Json::parse(metrics.back());
    EXPECT_EQ(last["top1_err"].get<double>(), r.top1_err);
    // Every number in results.csv appears verbatim in the final metrics line.
    const std::string row = r.strategy + "," + std::to_string(r.seed) + "," + fmt(r.top1_err) + "," + fmt(r.top1_agr);
    EXPECT_NE(std::find(results.begin(), results.end(), row), results.end()) << row;
    EXPECT_NE(metrics.back().find(fmt(r.top1_err)), std::string::npos);
    EXPECT_NE(metrics.back().find(fmt(r.top1_agr)), std::string::npos);

    const auto weights = lines_of(slurp(dir / "weights.csv"));
    EXPECT_EQ(weights[0], "iter,path_id,v,z");
    const std::size_t iters = 2 * ((ctx.data.train.size() + 31) / 32);
    const std::size_t k = r.strategy == "student" ? 0 : 2;
    EXPECT_EQ(weights.size(), 1 + iters * k);
    if (r.strategy == "adaptive") {
      for (std::size_t i = 1; i < weights.size(); ++i) {
        std::stringstream ss(weights[i]);
        std::string it, id, v, z;
        std::getline(ss, it, ',');
        std::getline(ss, id, ',');
        std::getline(ss, v, ',');
        std::getline(ss, z, ',');
        EXPECT_GT(std::stod(v), 0.0);
        EXPECT_FALSE(z.empty());
      }
    } else if (k > 0) {
      EXPECT_EQ(weights[1].back(), ',');
    }
    EXPECT_EQ(lines_of(slurp(dir / "timing.csv")).size(), 3u);
    if (k == 2) EXPECT_GT(lines_of(slurp(dir / "similarity.csv")).size(), 1u);
  }
}

TEST_F(ExperimentTest, RerunIsBitwiseIdenticalAndJobsDoNotMatter) {
  const auto a = root_ / "rerun-a", b = root_ / "rerun-b";
  auto ca = parse_config(config_text(a, R"(["multiobjective", "fixed"])", R"(, "fixed_v": [100, 0.5])"));
  auto cb = parse_config(config_text(b, R"(["multiobjective", "fixed"])", R"(, "fixed_v": [100, 0.5])"));
  auto xa = prepare(ca);
  run_grid(xa, 1);
  auto xb = prepare(cb);
  run_grid(xb, 3);
  EXPECT_EQ(slurp(a / "teacher" / "teacher.ckpt"), slurp(b / "teacher" / "teacher.ckpt"));
  EXPECT_EQ(slurp(a / "results.csv"), slurp(b / "results.csv"));
  for (const char* run : {"multiobjective-seed0", "multiobjective-seed1", "fixed-seed0", "fixed-seed1"}) {
    EXPECT_EQ(slurp(a / run / "metrics.jsonl"), slurp(b / run / "metrics.jsonl")) << run;
    EXPECT_EQ(slurp(a / run / "weights.csv"), slurp(b / run / "weights.csv")) << run;
  }
}

TEST_F(ExperimentTest, SixStrategiesThreeSeeds) {
  const auto out = root_ / "six";
  auto text = config_text(out, R"(["student", "single", "fixed", "equal", "multiobjective", "adaptive"])",
                          R"(, "fixed_v": [100, 0.5])");
  text.replace(text.find(R"("epochs": 2)"), 11, R"("epochs": 1)");
  text.replace(text.find(R"("seed": [0, 1])"), 14, R"("seed": [0, 1, 2])");
  auto cfg = parse_config(text);
  auto ctx = prepare(cfg);
  auto runs = run_grid(ctx, 2);
  ASSERT_EQ(runs.size(), 18u);
  std::size_t dirs = 0;
  for (const auto& entry : fs::directory_iterator(out)) {
    if (entry.is_directory() && entry.path().filename() != "teacher") ++dirs;
  }
  EXPECT_EQ(dirs, 18u);
  EXPECT_EQ(lines_of(slurp(out / "results.csv")).size(), 19u);
  // "single" distills through the first declared path only.
  const auto weights = lines_of(slurp(out / "single-seed0" / "weights.csv"));
  ASSERT_GT(weights.size(), 1u);
  EXPECT_EQ(weights[1].substr(0, 5), "0,at,");
  EXPECT_EQ(weights.size(), 1 + (ctx.data.train.size() + 31) / 32);
}

TEST_F(ExperimentTest, InterruptedRunKeepsCompletedEpochs) {
  const auto out = root_ / "interrupt";
  auto cfg = parse_config(config_text(out, R"("adaptive")"));
  auto ctx = prepare(cfg);
  auto stop_after_first = [](std::size_t epoch) {
    if (epoch == 0) throw std::runtime_error("interrupted");
  };
  EXPECT_THROW(run_single(ctx, "adaptive", 0, stop_after_first), std::runtime_error);
  const auto lines = lines_of(slurp(out / "adaptive-seed0" / "metrics.jsonl"));
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_EQ(Json::parse(lines[0])["epoch"], 0);
}

TEST_F(ExperimentTest, CheckpointReloadMatchesPretrained) {
  const auto out = root_ / "reload";
  auto cfg = parse_config(config_text(out, R"("student")"));
  auto ctx = prepare(cfg);
  auto reloaded = load_teacher(cfg, ctx.data, out / "teacher" / "teacher.ckpt");
  EXPECT_EQ(reloaded.val.top1_err, ctx.teacher.val.top1_err);
  EXPECT_EQ(reloaded.val.main_loss, ctx.teacher.val.main_loss);
  for (const auto& p : reloaded.net.parameters()) EXPECT_FALSE(p.value.requires_grad()) << p.name;
  // Errors are percentages; a pretrained teacher beats chance (75) and its own initialization.
  auto record = Json::parse(slurp(out / "teacher" / "teacher_metrics.json"));
  EXPECT_LT(ctx.teacher.val.top1_err, 75.0);
  EXPECT_LT(ctx.teacher.val.top1_err, record["untrained_top1_err"].get<double>());
}

TEST_F(ExperimentTest, BadTapFailsBeforeTraining) {
  const auto out = root_ / "badtap";
  auto text = config_text(out, R"("equal")");
  text.replace(text.find("\"b3\""), 4, "\"b9\"");
  auto cfg = parse_config(text);
  try {
    auto ctx = prepare(cfg);
    run_grid(ctx);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownTap);
  }
  EXPECT_FALSE(fs::exists(out / "equal-seed0" / "metrics.jsonl"));
}

TEST_F(ExperimentTest, MlpOnImagesFlattens) {
  const auto out = root_ / "mlp";
  auto text = config_text(out, R"(["equal"])");
  text.replace(text.find(R"("model": {"width": 2})"), 21, R"("model": {"kind": "mlp", "hidden": [16]})");
  text.replace(text.find(R"("student": {"width": 1})"), 23, R"("student": {"kind": "mlp", "hidden": [8]})");
  text.replace(text.find(R"({"id": "at", "kind": "at", "student_tap": ["b1", "b2", "b3"]}, )"), 63, "");
  auto cfg = parse_config(text);
  auto ctx = prepare(cfg);
  EXPECT_EQ(ctx.data.train.inputs.rank(), 2u);
  EXPECT_EQ(run_grid(ctx).size(), 2u);
}

}  // namespace
}  // namespace dagg
