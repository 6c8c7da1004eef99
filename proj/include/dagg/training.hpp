#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dagg/aggregation.hpp"
#include "dagg/data.hpp"
#include "dagg/distill.hpp"
#include "dagg/minnorm.hpp"
#include "dagg/models.hpp"

namespace dagg {

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::size_t> milestones;
  double factor = 0.1;
};

// initial_lr * factor^(number of milestones <= epoch)
inline double lr_at(std::size_t epoch, double initial_lr, const std::vector<std::size_t>& milestones, double factor) {
  double lr = initial_lr;
  for (std::size_t m : milestones) {
    if (m <= epoch) lr *= factor;
  }
  return lr;
}

inline double lr_at(std::size_t epoch, const OptimizerConfig& config) {
  return lr_at(epoch, config.lr, config.milestones, config.factor);
}

// SGD with momentum and L2 weight decay over a fixed parameter list.
class OptimizerState {
 public:
  OptimizerState(std::vector<Tensor> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
  }

  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& velocity() const { return velocity_; }

  // velocity = momentum * velocity + grad + weight_decay * param; param -= lr * velocity; grads zeroed.
  void step(double lr) {
    if (!(lr > 0.0)) fail(ErrorCode::ValidationError, "learning rate must be positive");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad() || params_[i].grad().size() != params_[i].numel()) {
        fail(ErrorCode::MissingGradient, "parameter " + std::to_string(i) + " has no gradient buffer");
      }
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      auto data = p.mutable_data();
      auto grad = p.mutable_grad();
      auto& vel = velocity_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        vel[j] = momentum_ * vel[j] + grad[j] + weight_decay_ * data[j];
        data[j] -= lr * vel[j];
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

inline void sgd_step(OptimizerState& state, double lr) { state.step(lr); }

// Mean cross-entropy of softmax(logits) against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return ops::scale(ops::sum(ops::pick(ops::log_softmax_rows(logits), labels)),
                    -1.0 / static_cast<double>(logits.dim(0)));
}

// Row argmax with ties going to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& x) {
  if (x.rank() != 2) fail(ErrorCode::ShapeMismatch, "argmax_rows expects [N,C]");
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<std::size_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 1; j < c; ++j) {
      if (x.data()[i * c + j] > x.data()[i * c + out[i]]) out[i] = j;
    }
  }
  return out;
}

inline double top1_error(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    fail(ErrorCode::ShapeMismatch, "top1_error: logits and labels disagree");
  }
  const auto pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == static_cast<std::size_t>(labels[i]);
  return 100.0 * static_cast<double>(pred.size() - correct) / static_cast<double>(labels.size());
}

inline double top1_agreement_error(const Tensor& student_probs, const Tensor& teacher_probs) {
  if (student_probs.shape() != teacher_probs.shape() || student_probs.rank() != 2 || student_probs.dim(0) == 0) {
    fail(ErrorCode::ShapeMismatch, "top1_agreement_error: " + shape_str(student_probs.shape()) + " vs " +
                                       shape_str(teacher_probs.shape()));
  }
  const auto s = argmax_rows(student_probs), t = argmax_rows(teacher_probs);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < s.size(); ++i) agree += s[i] == t[i];
  return 100.0 * static_cast<double>(s.size() - agree) / static_cast<double>(s.size());
}

struct EvalMetrics {
  double top1_err = 0.0;
  std::optional<double> top1_agreement_err;
  double main_loss = 0.0;
};

// Forward passes without recording. teacher_logits, when given, must hold the
// teacher's logits for every sample of the dataset in order.
inline EvalMetrics evaluate(const TappedNetwork& student, const Dataset& data, const Tensor* teacher_logits = nullptr,
                            std::size_t batch_size = 256) {
  if (data.size() == 0) fail(ErrorCode::EmptyDataset, "evaluate on an empty dataset");
  NoGradGuard guard;
  const std::size_t n = data.size(), c = student.classes();
  std::vector<double> logits;
  logits.reserve(n * c);
  double loss_sum = 0.0;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    auto [x, y] = data.gather(idx);
    auto out = student.forward(x).logits;
    loss_sum += cross_entropy(out, y).item() * static_cast<double>(end - begin);
    logits.insert(logits.end(), out.data().begin(), out.data().end());
  }
  auto all = Tensor::from_data({n, c}, std::move(logits));
  EvalMetrics m{top1_error(all, data.labels), std::nullopt, loss_sum / static_cast<double>(n)};
  if (teacher_logits) {
    m.top1_agreement_err = top1_agreement_error(ops::softmax_rows(all), ops::softmax_rows(*teacher_logits));
  }
  return m;
}

// Teacher features for a whole dataset, restricted to the named taps.
struct FeatureCache {
  std::map<std::string, Tensor> taps;
  Tensor logits;

  static FeatureCache build(const TappedNetwork& teacher, const Dataset& data, const std::vector<std::string>& names,
                            std::size_t batch_size = 256) {
    NoGradGuard guard;
    std::map<std::string, std::vector<double>> buffers;
    std::map<std::string, Shape> shapes;
    std::vector<double> logits;
    for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
      const std::size_t end = std::min(data.size(), begin + batch_size);
      std::vector<std::size_t> idx;
      for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
      auto bundle = teacher.forward(data.gather(idx).first);
      for (const auto& name : names) {
        if (name == "logits") continue;
        const Tensor& t = bundle.at(name);
        buffers[name].insert(buffers[name].end(), t.data().begin(), t.data().end());
        shapes[name] = Shape(t.shape().begin() + 1, t.shape().end());
      }
      logits.insert(logits.end(), bundle.logits.data().begin(), bundle.logits.data().end());
    }
    FeatureCache cache;
    for (auto& [name, values] : buffers) {
      Shape shape = shapes[name];
      shape.insert(shape.begin(), data.size());
      cache.taps[name] = Tensor::from_data(std::move(shape), std::move(values));
    }
    cache.logits = Tensor::from_data({data.size(), teacher.classes()}, std::move(logits));
    return cache;
  }

  FeatureBundle gather(std::span<const std::size_t> indices) const {
    FeatureBundle out;
    auto pick_rows = [&](const Tensor& t) {
      const std::size_t d = t.numel() / t.dim(0);
      std::vector<double> values(indices.size() * d);
      for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d,
                    values.begin() + static_cast<std::ptrdiff_t>(i * d));
      }
      Shape shape = t.shape();
      shape[0] = indices.size();
      return Tensor::from_data(std::move(shape), std::move(values));
    };
    for (const auto& [name, t] : taps) out.taps[name] = pick_rows(t);
    out.logits = pick_rows(logits);
    return out;
  }
};

inline EvalMetrics evaluate(const TappedNetwork& student, const TappedNetwork& teacher, const Dataset& data,
                            std::size_t batch_size = 256) {
  auto cache = FeatureCache::build(teacher, data, {}, batch_size);
  return evaluate(student, data, &cache.logits, batch_size);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

struct StepResult {
  double main_loss = 0.0;
  std::vector<double> per_path;
  std::vector<double> v;
  std::vector<double> z;  // Adaptive only
  bool degenerate = false;
  bool solver_converged = true;
  std::optional<std::vector<std::vector<double>>> similarity;  // pairwise cosine of path gradients
};

// One student's training state: network, distillation paths with their
// adapters, weighting state and optimizers.
class Trainer {
 public:
  Trainer(TappedNetwork& student, std::vector<DistillPath> paths, const AggregationConfig& agg,
          const OptimizerConfig& opt)
      : student_(student),
        paths_(std::move(paths)),
        agg_config_(agg),
        opt_config_(opt),
        state_(agg, paths_.size()),
        net_opt_(trainables(), opt.momentum, opt.weight_decay),
        z_opt_(state_.strategy() == Strategy::Adaptive ? std::vector<Tensor>{state_.z()} : std::vector<Tensor>{},
               opt.momentum, 0.0) {
    for (const auto& p : paths_) p.validate();
  }

  const std::vector<DistillPath>& paths() const { return paths_; }
  const AggregationState& aggregation() const { return state_; }
  const OptimizerState& optimizer() const { return net_opt_; }

  // Student parameters followed by adapter kernels, in a fixed order.
  std::vector<Tensor> trainables() const {
    std::vector<Tensor> out;
    for (const auto& p : student_.parameters()) out.push_back(p.value);
    for (const auto& path : paths_) {
      for (const auto& a : path.adapter_parameters()) out.push_back(a);
    }
    return out;
  }

  // iteration counts from 0 over the whole run; want_similarity requests the
  // pairwise cosine matrix of the per-path gradients for logging.
  StepResult step(const Tensor& batch, std::span<const int> labels, const FeatureBundle& teacher,
                  std::size_t epoch, std::size_t iteration, bool want_similarity = false) {
    Tape& tape = Tape::active();
    tape.clear();
    auto sb = student_.forward(batch);
    std::vector<Tensor> per_path;
    for (const auto& p : paths_) per_path.push_back(path_loss(p, sb, teacher));
    auto losses = StepLosses::make(cross_entropy(sb.logits, labels), std::move(per_path));

    StepResult result;
    const std::size_t k = paths_.size();
    const bool moo = state_.strategy() == Strategy::Multiobjective && k > 0;
    const bool solve = moo && iteration % std::max<std::size_t>(agg_config_.moo_every, 1) == 0;
    bool skip_distill = false;
    if (solve || (want_similarity && k >= 2)) {
      auto rows = path_gradient_rows(losses);
      if (want_similarity && k >= 2) {
        std::vector<std::vector<double>> sim(k, std::vector<double>(k, 1.0));
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) sim[i][j] = cosine(rows[i], rows[j]);
        result.similarity = std::move(sim);
      }
      if (solve) {
        SimplexPoint point;
        try {
          point = frank_wolfe_minnorm(gram_of(rows));
        } catch (const NotConverged& e) {
          point = e.last();
          result.solver_converged = false;
        }
        result.degenerate = point.degenerate;
        skip_distill = point.degenerate;
        state_.set_solver_weights(point);
      }
    }
    net_opt_.zero_grad();
    z_opt_.zero_grad();

    Tensor objective = skip_distill ? losses.main : state_.objective(losses);
    tape.backward(objective);

    const double lr = lr_at(epoch, opt_config_);
    net_opt_.step(lr);
    if (state_.strategy() == Strategy::Adaptive && k > 0) {
      const double z_lr = agg_config_.z_lr ? lr_at(epoch, *agg_config_.z_lr, opt_config_.milestones,
                                                   opt_config_.factor)
                                           : lr;
      z_opt_.step(z_lr);
    }
    result.main_loss = losses.main.item();
    result.per_path = losses.per_path_detached;
    result.v = state_.v();
    if (state_.strategy() == Strategy::Adaptive) result.z = state_.z_values();
    return result;
  }

 private:
  // One retained backward pass per path; rows hold d(loss_i)/d(trainables),
  // zero where a path does not reach a parameter.
  std::vector<std::vector<double>> path_gradient_rows(const StepLosses& losses) {
    Tape& tape = Tape::active();
    std::vector<std::vector<double>> rows;
    const auto params = net_opt_.params();
    for (const auto& loss : losses.per_path) {
      net_opt_.zero_grad();
      tape.backward(loss, true);
      std::vector<double> row;
      for (const auto& p : params) row.insert(row.end(), p.grad().begin(), p.grad().end());
      rows.push_back(std::move(row));
    }
    net_opt_.zero_grad();
    return rows;
  }

  TappedNetwork& student_;
  std::vector<DistillPath> paths_;
  AggregationConfig agg_config_;
  OptimizerConfig opt_config_;
  AggregationState state_;
  OptimizerState net_opt_;
  OptimizerState z_opt_;
};

}  // namespace dagg
