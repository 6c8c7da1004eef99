#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dagg/distill.hpp"
#include "dagg/minnorm.hpp"
#include "dagg/ops.hpp"

namespace dagg {

enum class Strategy { Equal, Fixed, Multiobjective, Adaptive };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Equal: return "equal";
    case Strategy::Fixed: return "fixed";
    case Strategy::Multiobjective: return "multiobjective";
    case Strategy::Adaptive: return "adaptive";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view name) {
  for (auto s : {Strategy::Equal, Strategy::Fixed, Strategy::Multiobjective, Strategy::Adaptive}) {
    if (to_string(s) == name) return s;
  }
  return std::nullopt;
}

inline constexpr double kDefaultAlpha = 1.0;

struct StepLosses {
  Tensor main;
  std::vector<Tensor> per_path;
  std::vector<double> per_path_detached;

  static StepLosses make(Tensor main, std::vector<Tensor> per_path) {
    StepLosses out{std::move(main), std::move(per_path), {}};
    for (const auto& l : out.per_path) out.per_path_detached.push_back(l.item());
    return out;
  }
  std::size_t paths() const { return per_path.size(); }
};

// main + alpha * sum_i v_i * loss_i. With no paths the main loss is returned as is.
inline Tensor fixed_objective(const StepLosses& losses, const std::vector<double>& v, double alpha) {
  if (v.size() != losses.paths()) {
    fail(ErrorCode::WeightLengthMismatch, std::to_string(v.size()) + " weights for " +
                                              std::to_string(losses.paths()) + " paths");
  }
  if (losses.per_path.empty()) return losses.main;
  auto weights = Tensor::from_data({v.size()}, v);
  auto distill = ops::sum(ops::mul(weights, ops::stack(losses.per_path)));
  return ops::add(losses.main, ops::scale(distill, alpha));
}

inline Tensor equal_objective(const StepLosses& losses, double alpha) {
  return fixed_objective(losses, std::vector<double>(losses.paths(), 1.0), alpha);
}

inline Tensor moo_objective(const StepLosses& losses, const SimplexPoint& solver_weights, double alpha) {
  return fixed_objective(losses, solver_weights.weights, alpha);
}

// main + alpha * (sum_i exp(-z_i) * loss_i + sum_i z_i), differentiable in z.
inline Tensor adaptive_objective(const StepLosses& losses, const Tensor& z, double alpha) {
  if (z.numel() != losses.paths()) {
    fail(ErrorCode::WeightLengthMismatch, std::to_string(z.numel()) + " proxies for " +
                                              std::to_string(losses.paths()) + " paths");
  }
  if (losses.per_path.empty()) return losses.main;
  auto v = ops::exp(ops::neg(z));
  auto distill = ops::add(ops::sum(ops::mul(v, ops::stack(losses.per_path))), ops::sum(z));
  return ops::add(losses.main, ops::scale(distill, alpha));
}

// Closed-form derivative of the adaptive objective in z: alpha * (1 - exp(-z_i) * loss_i).
inline std::vector<double> adaptive_z_gradient(const std::vector<double>& z, const std::vector<double>& losses,
                                               double alpha) {
  if (z.size() != losses.size()) fail(ErrorCode::WeightLengthMismatch, "z and losses differ in length");
  std::vector<double> g(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) g[i] = alpha * (1.0 - std::exp(-z[i]) * losses[i]);
  return g;
}

// Splits every multi-tap feature-level path into one path per tap pair.
inline std::vector<DistillPath> expand_layerwise(const std::vector<DistillPath>& paths) {
  std::vector<DistillPath> out;
  for (const auto& p : paths) {
    if (p.logit_level() || p.student_taps.size() <= 1) {
      out.push_back(p);
      continue;
    }
    for (std::size_t i = 0; i < p.student_taps.size(); ++i) {
      DistillPath single = p;
      single.id = p.id + ":" + p.student_taps[i];
      single.student_taps = {p.student_taps[i]};
      single.teacher_taps = {p.teacher_taps[i]};
      single.adapters.clear();
      if (i < p.adapters.size()) single.adapters.push_back(p.adapters[i]);
      out.push_back(std::move(single));
    }
  }
  return out;
}

struct AggregationConfig {
  Strategy strategy = Strategy::Equal;
  double alpha = kDefaultAlpha;
  std::vector<double> fixed_v;
  bool layerwise = false;
  std::optional<double> z_lr;
  std::size_t moo_every = 1;
};

// Per-run weighting state for K paths.
class AggregationState {
 public:
  AggregationState(const AggregationConfig& config, std::size_t paths)
      : strategy_(config.strategy), alpha_(config.alpha), v_(paths, 1.0) {
    switch (strategy_) {
      case Strategy::Fixed:
        if (config.fixed_v.size() != paths) {
          fail(ErrorCode::WeightLengthMismatch, "fixed_v has " + std::to_string(config.fixed_v.size()) +
                                                    " entries for " + std::to_string(paths) + " paths");
        }
        for (double x : config.fixed_v) {
          if (!(x >= 0.0)) fail(ErrorCode::ValidationError, "fixed_v entries must be nonnegative");
        }
        v_ = config.fixed_v;
        break;
      case Strategy::Multiobjective:
        if (paths > 0) v_.assign(paths, 1.0 / static_cast<double>(paths));
        break;
      case Strategy::Adaptive:
        z_ = Tensor::zeros({paths}, true);
        break;
      case Strategy::Equal: break;
    }
  }

  Strategy strategy() const { return strategy_; }
  double alpha() const { return alpha_; }
  std::size_t paths() const { return v_.size(); }

  // Current path weights; Adaptive derives them from z.
  std::vector<double> v() const {
    if (strategy_ != Strategy::Adaptive) return v_;
    std::vector<double> out;
    for (double z : z_.data()) out.push_back(std::exp(-z));
    return out;
  }

  // Trainable proxies (Adaptive only; undefined otherwise).
  const Tensor& z() const { return z_; }
  std::vector<double> z_values() const { return {z_.data().begin(), z_.data().end()}; }

  void set_solver_weights(const SimplexPoint& point) {
    if (point.weights.size() != v_.size()) fail(ErrorCode::WeightLengthMismatch, "solver returned wrong K");
    v_ = point.weights;
  }

  Tensor objective(const StepLosses& losses) const {
    if (strategy_ == Strategy::Adaptive) return adaptive_objective(losses, z_, alpha_);
    return fixed_objective(losses, v_, alpha_);
  }

 private:
  Strategy strategy_;
  double alpha_;
  std::vector<double> v_;
  Tensor z_;
};

}  // namespace dagg
