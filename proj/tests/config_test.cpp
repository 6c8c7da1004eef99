#include <gtest/gtest.h>

#include "dagg/config.hpp"

namespace dagg {
namespace {

const char* kMinimal = R"({"dataset": {"kind": "synthetic"}, "paths": [{"id": "st", "kind": "st"}]})";

Error error_of(std::string_view text, ParseOptions opts = {}) {
  try {
    parse_config(text, opts);
  } catch (const Error& e) {
    return e;
  }
  ADD_FAILURE() << "no error for " << text;
  return Error(ErrorCode::IoError, "");
}

TEST(ParseConfig, MinimalDefaults) {
  auto c = parse_config(kMinimal);
  EXPECT_EQ(c.dataset.generator, "two_spirals");
  EXPECT_EQ(c.dataset.classes, 2u);
  EXPECT_EQ(c.strategies, (std::vector<std::string>{"equal"}));
  EXPECT_EQ(c.aggregation.alpha, 1.0);
  EXPECT_EQ(c.epochs, 30u);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0}));
  EXPECT_EQ(c.teacher.model.width, 4u);
  EXPECT_TRUE(c.warnings.empty());
}

TEST(ParseConfig, UnknownKeyNamed) {
  auto e = error_of(R"({"dataset": {"kind": "synthetic", "nosie": 0.1}})");
  EXPECT_EQ(e.code(), ErrorCode::ValidationError);
  EXPECT_NE(std::string(e.what()).find("dataset.nosie"), std::string::npos);
  EXPECT_NE(std::string(error_of(R"({"dataset": {}, "paths": [], "aggregation": {"strategy": "student"}, "epoch": 3})").what()).find("'epoch'"), std::string::npos);
}

TEST(ParseConfig, FixedNeedsWeights) {
  const std::string base = R"({"dataset": {}, "paths": [{"id": "st", "kind": "st"}], "aggregation": {"strategy": "fixed")";
  auto e = error_of(base + "}}");
  EXPECT_NE(std::string(e.what()).find("aggregation.fixed_v required"), std::string::npos);
  EXPECT_EQ(error_of(base + R"(, "fixed_v": [1, 2]}})").code(), ErrorCode::ValidationError);
  auto c = parse_config(base + R"(, "fixed_v": [0.5]}})");
  EXPECT_EQ(c.aggregation.fixed_v, (std::vector<double>{0.5}));
}

TEST(ParseConfig, LayerwiseCountsExpandedPaths) {
  auto c = parse_config(R"({"dataset": {}, "paths": [{"id": "at", "kind": "at", "student_tap": ["b1", "b2", "b3"]},
    {"id": "st", "kind": "st"}], "aggregation": {"strategy": ["fixed", "adaptive"], "layerwise": true,
    "fixed_v": [1, 1, 1, 1]}})");
  EXPECT_EQ(c.effective_paths().size(), 4u);
  EXPECT_EQ(c.paths[0].teacher_taps, c.paths[0].student_taps);
}

TEST(ParseConfig, AlphaRange) {
  auto c = parse_config(R"({"dataset": {}, "paths": [{"id": "st", "kind": "st"}], "aggregation": {"alpha": 1.0}})");
  EXPECT_EQ(c.aggregation.alpha, 1.0);
  EXPECT_EQ(parse_config(to_json(c).dump()).aggregation.alpha, 1.0);
  const char* big = R"({"dataset": {}, "paths": [{"id": "st", "kind": "st"}], "aggregation": {"alpha": 2.5}})";
  EXPECT_NE(std::string(error_of(big).what()).find("--unsafe-alpha"), std::string::npos);
  auto u = parse_config(big, {.unsafe_alpha = true});
  EXPECT_EQ(u.aggregation.alpha, 2.5);
  ASSERT_EQ(u.warnings.size(), 1u);
  EXPECT_EQ(error_of(R"({"dataset": {}, "paths": [{"id": "st", "kind": "st"}], "aggregation": {"alpha": -0.1}})", {.unsafe_alpha = true}).code(),
            ErrorCode::ValidationError);
}

TEST(ParseConfig, ParseErrorHasLineAndColumn) {
  auto e = error_of("{\n  \"dataset\": {,\n}");
  EXPECT_EQ(e.code(), ErrorCode::ParseError);
  EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
}

TEST(ParseConfig, RejectsBadValues) {
  EXPECT_EQ(error_of(R"({"dataset": {}, "aggregation": {"strategy": "median"}})").code(), ErrorCode::ValidationError);
  EXPECT_NE(std::string(error_of(R"({"dataset": {}, "aggregation": {"strategy": "adaptive"}})").what()).find("needs at least one"),
            std::string::npos);
  auto epochs = [](const std::string& v) {
    return std::string(error_of(R"({"dataset": {}, "paths": [{"id": "st", "kind": "st"}], "epochs": )" + v + "}").what());
  };
  EXPECT_NE(epochs("0").find("epochs must be >= 1"), std::string::npos);
  EXPECT_NE(epochs("-3").find("nonnegative integer"), std::string::npos);
  EXPECT_EQ(error_of(R"({"dataset": {"kind": "idx", "images": "/nope", "labels": "/nope"}})").code(),
            ErrorCode::ValidationError);
  EXPECT_EQ(error_of(R"({"dataset": {}, "paths": [{"id": "a", "kind": "st"}, {"id": "a", "kind": "st"}]})").code(),
            ErrorCode::ValidationError);
  EXPECT_EQ(error_of(R"({"dataset": {}, "paths": [{"id": "a", "kind": "at"}]})").code(), ErrorCode::ValidationError);
  EXPECT_EQ(error_of(R"([1, 2])").code(), ErrorCode::ValidationError);
}

TEST(ParseConfig, RoundTripThroughJson) {
  auto c = parse_config(R"({"dataset": {"kind": "synthetic", "generator": "gaussian_blobs", "classes": 3},
    "paths": [{"id": "nst", "kind": "nst", "student_tap": "b2"}, {"id": "st", "kind": "st", "temperature": 2}],
    "aggregation": {"strategy": ["student", "multiobjective"], "moo_every": 3}, "seed": [1, 2],
    "optimizer": {"lr": 0.05, "milestones": [10, 20]}})");
  auto again = parse_config(to_json(c).dump());
  EXPECT_EQ(to_json(again), to_json(c));
  EXPECT_EQ(again.paths[1].temperature, 2.0);
  EXPECT_EQ(again.aggregation.moo_every, 3u);
  EXPECT_EQ(again.seeds, (std::vector<std::uint64_t>{1, 2}));
}

}  // namespace
}  // namespace dagg
