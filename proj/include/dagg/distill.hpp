#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dagg/models.hpp"
#include "dagg/ops.hpp"
#include "dagg/rng.hpp"

namespace dagg {

enum class PathKind { ST, AT, NST, L2Logit };

inline std::string_view to_string(PathKind kind) {
  switch (kind) {
    case PathKind::ST: return "ST";
    case PathKind::AT: return "AT";
    case PathKind::NST: return "NST";
    case PathKind::L2Logit: return "L2Logit";
  }
  return "?";
}

inline constexpr double kNormEps = 1e-12;
inline constexpr double kDefaultTemperature = 4.0;

// Bias-free 1x1 convolution mapping student channels onto teacher channels.
struct AdaptationLayer {
  Tensor kernel;  // [D_T, D_S, 1, 1]

  static AdaptationLayer create(std::size_t student_channels, std::size_t teacher_channels, Rng& rng) {
    AdaptationLayer layer{kaiming_uniform(rng, {teacher_channels, student_channels, 1, 1}, student_channels)};
    layer.kernel.set_requires_grad(true);
    return layer;
  }

  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t out_channels() const { return kernel.dim(0); }

  Tensor apply(const Tensor& features) const { return ops::conv2d(features, kernel, 1, 0); }
};

// One distillation path. Feature-level kinds may span several tap pairs; the
// path loss is the sum over its pairs.
struct DistillPath {
  std::string id;
  PathKind kind = PathKind::ST;
  std::vector<std::string> student_taps{"logits"};
  std::vector<std::string> teacher_taps{"logits"};
  std::vector<std::optional<AdaptationLayer>> adapters;  // NST only, one slot per pair
  double temperature = kDefaultTemperature;
  bool at_squared = true;

  bool logit_level() const { return kind == PathKind::ST || kind == PathKind::L2Logit; }

  void validate() const {
    if (student_taps.empty() || student_taps.size() != teacher_taps.size()) {
      fail(ErrorCode::ValidationError, "path '" + id + "': student/teacher tap lists must pair up");
    }
    if (logit_level()) {
      if (student_taps != std::vector<std::string>{"logits"} || teacher_taps != std::vector<std::string>{"logits"}) {
        fail(ErrorCode::ValidationError, "path '" + id + "': " + std::string(to_string(kind)) + " works on logits only");
      }
      for (const auto& a : adapters) {
        if (a) fail(ErrorCode::ValidationError, "path '" + id + "': logit paths take no adapter");
      }
    }
    if (kind == PathKind::ST && !(temperature > 0.0)) {
      fail(ErrorCode::ValidationError, "path '" + id + "': temperature must be positive");
    }
  }

  std::vector<Tensor> adapter_parameters() const {
    std::vector<Tensor> out;
    for (const auto& a : adapters) {
      if (a) out.push_back(a->kernel);
    }
    return out;
  }
};

namespace detail {

inline void require_same(const Tensor& s, const Tensor& t, std::string_view what) {
  if (s.shape() != t.shape()) {
    fail(ErrorCode::ShapeMismatch, std::string(what) + ": student " + shape_str(s.shape()) + " vs teacher " +
                                       shape_str(t.shape()));
  }
}

inline void require_spatial_match(const Tensor& s, const Tensor& t, std::string_view what) {
  if (s.rank() != 4 || t.rank() != 4 || s.dim(0) != t.dim(0) || s.dim(2) != t.dim(2) || s.dim(3) != t.dim(3)) {
    fail(ErrorCode::ShapeMismatch, std::string(what) + ": student " + shape_str(s.shape()) + " vs teacher " +
                                       shape_str(t.shape()));
  }
}

// Teacher values never carry gradient.
inline Tensor constant(const Tensor& t) { return Tape::active().tracks(t) ? t.detach() : t; }

}  // namespace detail

// Mean over the batch of -tau^2 * sum_i q_i^T log q_i^S, q = softmax(z / tau).
inline Tensor soft_target_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  detail::require_same(student_logits, teacher_logits, "soft_target_loss");
  if (student_logits.rank() != 2) fail(ErrorCode::ShapeMismatch, "soft_target_loss expects [N,C] logits");
  if (!(temperature > 0.0)) fail(ErrorCode::ValidationError, "temperature must be positive");
  Tensor teacher_q;
  {
    NoGradGuard guard;
    teacher_q = ops::softmax_rows(ops::scale(teacher_logits, 1.0 / temperature));
  }
  auto log_q = ops::log_softmax_rows(ops::scale(student_logits, 1.0 / temperature));
  const double n = static_cast<double>(student_logits.dim(0));
  return ops::scale(ops::sum(ops::mul(teacher_q, log_q)), -temperature * temperature / n);
}

// A = sum_d F_d^2 over the channel axis: [N,D,H,W] -> [N,H,W].
inline Tensor attention_map(const Tensor& features) {
  if (features.rank() != 4) fail(ErrorCode::ShapeMismatch, "attention_map expects [N,D,H,W]");
  return ops::sum_axis1(ops::square(features));
}

// Distance between L2-normalized vectorized attention maps, averaged over the
// batch. Squared by default; `squared = false` gives the plain L2 distance.
inline Tensor attention_transfer_loss(const Tensor& student_feats, const Tensor& teacher_feats, bool squared = true) {
  detail::require_spatial_match(student_feats, teacher_feats, "attention_transfer_loss");
  const std::size_t n = student_feats.dim(0), hw = student_feats.dim(2) * student_feats.dim(3);
  Tensor teacher_vec;
  {
    NoGradGuard guard;
    teacher_vec = ops::l2_normalize_rows(ops::reshape(attention_map(teacher_feats), {n, hw}), kNormEps);
  }
  auto student_vec = ops::l2_normalize_rows(ops::reshape(attention_map(student_feats), {n, hw}), kNormEps);
  auto diff = ops::sub(student_vec, teacher_vec);
  if (squared) return ops::scale(ops::sum(ops::square(diff)), 1.0 / static_cast<double>(n));
  return ops::mean(ops::row_norms(diff));
}

// G(F) = F^T F for one sample laid out as [channels, positions].
inline Tensor gram(const Tensor& features) {
  if (features.rank() != 2) fail(ErrorCode::ShapeMismatch, "gram expects [D, HW]");
  return ops::matmul(ops::transpose(features), features);
}

namespace detail {

// [N,D,H,W] -> per-sample Gram matrices [N,HW,HW] of the channel-normalized map.
inline Tensor normalized_gram(const Tensor& features) {
  const std::size_t n = features.dim(0), d = features.dim(1), hw = features.dim(2) * features.dim(3);
  auto positions_by_channel = ops::transpose12(ops::reshape(features, {n, d, hw}));  // [N,HW,D]
  auto normalized = ops::l2_normalize_rows(positions_by_channel, kNormEps);
  return ops::bmm_nt(normalized, normalized);
}

}  // namespace detail

// Mean over the batch of ||G[F^T] - G[adapter(F^S)]||_F with both maps
// normalized across channels at every spatial position.
inline Tensor nst_loss(const Tensor& student_feats, const Tensor& teacher_feats,
                       const AdaptationLayer* adapter = nullptr) {
  detail::require_spatial_match(student_feats, teacher_feats, "nst_loss");
  Tensor adapted = student_feats;
  if (adapter) {
    if (adapter->in_channels() != student_feats.dim(1) || adapter->out_channels() != teacher_feats.dim(1)) {
      fail(ErrorCode::ShapeMismatch, "nst_loss: adapter maps " + std::to_string(adapter->in_channels()) + "->" +
                                         std::to_string(adapter->out_channels()) + " channels");
    }
    adapted = adapter->apply(student_feats);
  } else if (student_feats.dim(1) != teacher_feats.dim(1)) {
    fail(ErrorCode::AdapterMissing, "nst_loss: student has " + std::to_string(student_feats.dim(1)) +
                                        " channels, teacher " + std::to_string(teacher_feats.dim(1)));
  }
  const std::size_t n = student_feats.dim(0), hw = student_feats.dim(2) * student_feats.dim(3);
  Tensor teacher_gram;
  {
    NoGradGuard guard;
    teacher_gram = detail::normalized_gram(teacher_feats);
  }
  auto diff = ops::sub(detail::normalized_gram(adapted), teacher_gram);
  return ops::mean(ops::row_norms(ops::reshape(diff, {n, hw * hw})));
}

// Mean over the batch of ||z^T - z^S||_2.
inline Tensor l2_logit_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  detail::require_same(student_logits, teacher_logits, "l2_logit_loss");
  if (student_logits.rank() != 2) fail(ErrorCode::ShapeMismatch, "l2_logit_loss expects [N,C] logits");
  return ops::mean(ops::row_norms(ops::sub(teacher_logits, student_logits)));
}

inline Tensor path_loss(const DistillPath& path, const FeatureBundle& student, const FeatureBundle& teacher) {
  path.validate();
  Tensor total;
  for (std::size_t i = 0; i < path.student_taps.size(); ++i) {
    const Tensor& s = student.at(path.student_taps[i]);
    const Tensor t = detail::constant(teacher.at(path.teacher_taps[i]));
    Tensor term;
    switch (path.kind) {
      case PathKind::ST: term = soft_target_loss(s, t, path.temperature); break;
      case PathKind::AT: term = attention_transfer_loss(s, t, path.at_squared); break;
      case PathKind::NST: {
        const AdaptationLayer* adapter =
            i < path.adapters.size() && path.adapters[i] ? &*path.adapters[i] : nullptr;
        term = nst_loss(s, t, adapter);
        break;
      }
      case PathKind::L2Logit: term = l2_logit_loss(s, t); break;
    }
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

}  // namespace dagg
