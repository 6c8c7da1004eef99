#include <gtest/gtest.h>

#include <cmath>

#include "dagg/training.hpp"
#include "support/corpus.hpp"
#include "support/gradcheck.hpp"

namespace dagg {
namespace {

using testing::grad_check;
using testing::random_tensor;

TEST(Sgd, PlainStep) {
  auto p = Tensor::scalar(0.0, true);
  p.mutable_grad()[0] = 1.0;
  OptimizerState opt({p}, 0.0, 0.0);
  sgd_step(opt, 0.1);
  EXPECT_DOUBLE_EQ(p.item(), -0.1);
  EXPECT_EQ(p.grad()[0], 0.0);
}

TEST(Sgd, MomentumSecondDisplacement) {
  auto p = Tensor::scalar(0.0, true);
  OptimizerState opt({p}, 0.9, 0.0);
  p.mutable_grad()[0] = 1.0;
  opt.step(0.1);
  const double first = p.item();
  p.mutable_grad()[0] = 1.0;
  opt.step(0.1);
  EXPECT_NEAR((p.item() - first) / first, 1.9, 1e-12);
}

TEST(Sgd, ZeroGradientNoDecayKeepsParameter) {
  auto p = Tensor::from_data({2}, {0.3, -0.7}, true);
  OptimizerState opt({p}, 0.9, 0.0);
  opt.step(0.1);
  EXPECT_EQ(p.data()[0], 0.3);
  EXPECT_EQ(p.data()[1], -0.7);
}

TEST(Sgd, MissingGradient) {
  auto p = Tensor::scalar(1.0);
  OptimizerState opt({p}, 0.9, 0.0);
  try {
    opt.step(0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingGradient);
  }
}

TEST(LrAt, Schedules) {
  EXPECT_NEAR(lr_at(120, 0.1, {100, 150}, 0.1), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(130, 0.1, {60, 120, 160}, 0.2), 0.004, 1e-15);
  EXPECT_EQ(lr_at(10, 0.1, {60, 120}, 0.2), 0.1);
  EXPECT_NEAR(lr_at(100, 0.1, {100, 150}, 0.1), 0.01, 1e-15);
}

TEST(Top1Error, Examples) {
  auto logits = Tensor::from_data({4, 3}, {3, 1, 0, 0, 2, 1, 0, 0, 5, 1, 2, 0});
  std::vector<int> right{0, 1, 2, 1};
  EXPECT_EQ(top1_error(logits, right), 0.0);
  std::vector<int> one_wrong{0, 1, 2, 0};
  EXPECT_EQ(top1_error(logits, one_wrong), 25.0);
  std::vector<int> zeros{0, 0, 0, 0};
  EXPECT_EQ(top1_error(Tensor::zeros({4, 3}), zeros), 0.0);
}

TEST(Top1Agreement, Examples) {
  auto a = Tensor::from_data({4, 2}, {0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7});
  EXPECT_EQ(top1_agreement_error(a, a), 0.0);
  auto b = Tensor::from_data({4, 2}, {0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.7, 0.3});
  EXPECT_EQ(top1_agreement_error(a, b), 25.0);
  EXPECT_EQ(top1_agreement_error(b, a), 25.0);
  EXPECT_THROW(top1_agreement_error(a, Tensor::zeros({4, 3})), Error);
}

TEST(Top1Agreement, MatchesCountingOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(20), c = 2 + rng.below(5);
    auto probs = [&] {
      // Coarse values make ties common so the tie-break rule is exercised.
      auto x = Tensor::zeros({n, c});
      for (auto& v : x.mutable_data()) v = static_cast<double>(rng.below(4));
      return ops::softmax_rows(x);
    };
    auto s = probs(), t = probs();
    int disagree = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t as = 0, at = 0;
      for (std::size_t j = 0; j < c; ++j) {
        if (s.data()[i * c + j] > s.data()[i * c + as]) as = j;
        if (t.data()[i * c + j] > t.data()[i * c + at]) at = j;
      }
      disagree += as != at;
    }
    EXPECT_EQ(top1_agreement_error(s, t), 100.0 * disagree / static_cast<double>(n));
  }
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOnehot) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tape::active().clear();
    const std::size_t n = 1 + rng.below(6), c = 2 + rng.below(6);
    auto logits = random_tensor(rng, {n, c}, -3, 3);
    logits.set_requires_grad(true);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.below(c));
    backward(cross_entropy(logits, labels));
    auto p = ops::softmax_rows(logits.detach());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double expected = (p.data()[i * c + j] - (labels[i] == static_cast<int>(j) ? 1.0 : 0.0)) / n;
        EXPECT_NEAR(logits.grad()[i * c + j], expected, 1e-10);
      }
    }
    auto fn = [&](const std::vector<Tensor>& x) { return cross_entropy(x[0], labels); };
    EXPECT_LE(grad_check(fn, {logits.detach()}).rel_error, 1e-3);
  }
}

// Small shared fixture: 8x8 pattern images, a width-2 teacher and width-1 student.
struct Toy {
  Dataset data;
  TappedNetwork teacher;
  FeatureCache cache;

  Toy()
      : data(testing::corpus_dataset(testing::make_pattern_corpus(64, 4, 8, 0.05, 0.3, 5), 4)),
        teacher(build_convnet(2, {1, 8, 8}, 4, 3, Stream::TeacherInit)) {
    teacher.freeze();
    cache = FeatureCache::build(teacher, data, {"b1", "b2", "b3"});
  }

  static std::vector<DistillPath> paths() {
    DistillPath at{"at", PathKind::AT, {"b1", "b2", "b3"}, {"b1", "b2", "b3"}};
    DistillPath st{"st", PathKind::ST};
    return {at, st};
  }

  // Runs `steps` iterations over fixed 16-sample batches; returns flattened student parameters.
  std::vector<double> train(const AggregationConfig& agg, bool with_paths, std::size_t steps,
                            std::vector<double>* main_losses = nullptr) const {
    Tape::active().clear();
    auto student = build_convnet(1, {1, 8, 8}, 4, 7);
    OptimizerConfig opt{0.05, 0.9, 5e-4, {}, 0.1};
    Trainer trainer(student, with_paths ? paths() : std::vector<DistillPath>{}, agg, opt);
    for (std::size_t it = 0; it < steps; ++it) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < 16; ++i) idx.push_back((it * 16 + i) % data.size());
      auto [x, y] = data.gather(idx);
      auto r = trainer.step(x, y, cache.gather(idx), 0, it, it % 3 == 0);
      if (main_losses) main_losses->push_back(r.main_loss);
    }
    std::vector<double> flat;
    for (const auto& p : student.parameters()) flat.insert(flat.end(), p.value.data().begin(), p.value.data().end());
    return flat;
  }
};

const Toy& toy() {
  static const Toy instance;
  return instance;
}

TEST(TrainStep, AlphaZeroMatchesPlainTrainingBitwise) {
  const auto plain = toy().train({}, false, 12);
  for (auto s : {Strategy::Equal, Strategy::Fixed, Strategy::Multiobjective, Strategy::Adaptive}) {
    AggregationConfig agg{s, 0.0, {1000, 0.1}};
    EXPECT_EQ(toy().train(agg, true, 12), plain) << to_string(s);
  }
}

TEST(TrainStep, EqualMatchesFixedUnitWeightsBitwise) {
  AggregationConfig equal{Strategy::Equal, 1.0};
  AggregationConfig fixed{Strategy::Fixed, 1.0, {1.0, 1.0}};
  EXPECT_EQ(toy().train(equal, true, 8), toy().train(fixed, true, 8));
}

TEST(TrainStep, NoPathsIsPlainStep) {
  AggregationConfig agg{Strategy::Adaptive, 1.0};
  EXPECT_EQ(toy().train(agg, false, 5), toy().train({}, false, 5));
}

TEST(TrainStep, MainLossDecreasesForEveryStrategy) {
  for (auto s : {Strategy::Equal, Strategy::Fixed, Strategy::Multiobjective, Strategy::Adaptive}) {
    AggregationConfig agg{s, 1.0, {1000, 0.1}};
    std::vector<double> losses;
    toy().train(agg, true, 200, &losses);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 4; ++i) head += losses[i], tail += losses[losses.size() - 1 - i];
    EXPECT_LT(tail, head) << to_string(s);
  }
}

TEST(TrainStep, TeacherUntouched) {
  auto before = toy().teacher.export_parameters();
  auto cached = toy().cache.gather(std::vector<std::size_t>{0, 1, 2});
  AggregationConfig agg{Strategy::Adaptive, 1.0};
  toy().train(agg, true, 10);
  auto after = toy().teacher.export_parameters();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].values, after[i].values);
  auto live = toy().teacher.forward(toy().data.gather(std::vector<std::size_t>{0, 1, 2}).first);
  for (const auto& [name, t] : cached.taps) {
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), live.at(name).data().begin())) << name;
  }
}

TEST(TrainStep, AdaptiveMovesZTowardLogLoss) {
  Tape::active().clear();
  auto student = build_convnet(1, {1, 8, 8}, 4, 7);
  AggregationConfig agg{Strategy::Adaptive, 1.0};
  Trainer trainer(student, Toy::paths(), agg, {0.05, 0.0, 0.0, {}, 0.1});
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  auto [x, y] = toy().data.gather(idx);
  auto r = trainer.step(x, y, toy().cache.gather(idx), 0, 0);
  for (std::size_t i = 0; i < r.z.size(); ++i) {
    // Starting at z = 0, z moves toward ln(loss): up when loss > 1, down when loss < 1.
    if (r.per_path[i] > 1.0) EXPECT_GT(r.z[i], 0.0);
    if (r.per_path[i] < 1.0) EXPECT_LT(r.z[i], 0.0);
    EXPECT_GT(r.v[i], 0.0);
  }
}

TEST(TrainStep, MultiobjectiveDirectionDescendsEveryPath) {
  Tape::active().clear();
  auto student = build_convnet(1, {1, 8, 8}, 4, 11);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  auto [x, y] = toy().data.gather(idx);
  auto teacher = toy().cache.gather(idx);
  auto paths = Toy::paths();
  std::vector<Tensor> params;
  for (const auto& p : student.parameters()) params.push_back(p.value);

  auto path_values = [&] {
    NoGradGuard guard;
    auto sb = student.forward(x);
    std::vector<double> out;
    for (const auto& p : paths) out.push_back(path_loss(p, sb, teacher).item());
    return out;
  };
  std::vector<std::vector<double>> rows;
  for (const auto& p : paths) {
    Tape::active().clear();
    for (auto& t : params) t.zero_grad();
    backward(path_loss(p, student.forward(x), teacher));
    std::vector<double> row;
    for (const auto& t : params) row.insert(row.end(), t.grad().begin(), t.grad().end());
    rows.push_back(row);
  }
  auto point = frank_wolfe_minnorm(gram_of(rows));
  const auto before = path_values();
  std::size_t offset = 0;
  for (auto& t : params) {
    auto data = t.mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      double dir = 0.0;
      for (std::size_t i = 0; i < rows.size(); ++i) dir += point.weights[i] * rows[i][offset + j];
      data[j] -= 1e-5 * dir;
    }
    offset += data.size();
  }
  const auto after = path_values();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_LE(after[i], before[i] + 1e-9) << paths[i].id;
}

TEST(TrainStep, SimilarityIsCosineMatrix) {
  Tape::active().clear();
  auto student = build_convnet(1, {1, 8, 8}, 4, 7);
  Trainer trainer(student, Toy::paths(), {}, {});
  std::vector<std::size_t> idx{0, 1, 2, 3};
  auto [x, y] = toy().data.gather(idx);
  auto r = trainer.step(x, y, toy().cache.gather(idx), 0, 0, true);
  ASSERT_TRUE(r.similarity.has_value());
  const auto& sim = *r.similarity;
  EXPECT_NEAR(sim[0][0], 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(sim[0][1], sim[1][0]);
  EXPECT_LE(std::abs(sim[0][1]), 1.0 + 1e-12);
}

TEST(Evaluate, AgreementAndDeterminism) {
  const auto& t = toy();
  auto self = evaluate(t.teacher, t.data, &t.cache.logits);
  ASSERT_TRUE(self.top1_agreement_err.has_value());
  EXPECT_EQ(*self.top1_agreement_err, 0.0);
  auto again = evaluate(t.teacher, t.data, &t.cache.logits);
  EXPECT_EQ(self.top1_err, again.top1_err);
  EXPECT_EQ(self.main_loss, again.main_loss);
  EXPECT_FALSE(evaluate(t.teacher, t.data).top1_agreement_err.has_value());
  auto one = evaluate(t.teacher, t.data.slice(0, 1, "val"));
  EXPECT_TRUE(one.top1_err == 0.0 || one.top1_err == 100.0);
}

}  // namespace
}  // namespace dagg
