#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dagg/error.hpp"

namespace dagg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

namespace detail {

inline constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized like data iff requires_grad
  bool requires_grad = false;
  // Set for values produced by a recorded op.
  const Tape* tape = nullptr;
  std::uint64_t generation = 0;
  std::size_t node = kNoNode;
};

}  // namespace detail

// Dense row-major float64 array. Copies share storage; detach() gives an
// independent value.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      fail(ErrorCode::ShapeMismatch, "shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                                         " values, got " + std::to_string(values.size()));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
    return Tensor(std::move(impl));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) { return from_data({}, {value}, requires_grad); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access; used by optimizers and initializers outside any tape.
  std::span<double> mutable_data() { return impl_->data; }
  double item() const {
    if (numel() != 1) fail(ErrorCode::NotScalar, "item() on shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
  bool has_grad() const noexcept { return requires_grad(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

  // Turns this leaf into a trainable (or frozen) parameter in place.
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
      impl_->grad.assign(impl_->data.size(), 0.0);
    } else {
      impl_->grad.clear();
      impl_->grad.shrink_to_fit();
    }
  }

  bool is_leaf() const noexcept { return impl_->node == detail::kNoNode; }

  // Same values, no tape lineage, no gradient.
  Tensor detach() const { return from_data(impl_->shape, impl_->data, false); }

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const noexcept { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Append-only record of differentiable ops for one thread. Backward walks the
// nodes in reverse append order, visiting each exactly once.
class Tape {
 public:
  // grad_in[i] is empty when input i takes no gradient; otherwise the callee
  // must accumulate (+=) into it.
  using BackwardFn = std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

  struct Node {
    std::string_view op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::size_t out_numel = 0;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  static bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
  }

  // True when `t` takes part in differentiation through this tape.
  bool tracks(const Tensor& t) const {
    const auto& impl = t.impl();
    return impl->requires_grad || (impl->tape == this && impl->generation == generation_);
  }

  bool owns(const Tensor& t) const {
    const auto& impl = t.impl();
    return impl->tape == this && impl->generation == generation_ && impl->node != detail::kNoNode;
  }

  // Records `output = op(inputs)` when gradient mode is on and some input is
  // tracked. Returns the output either way.
  Tensor record(std::string_view op, std::initializer_list<Tensor> inputs, Tensor output, BackwardFn backward) {
    return record(op, std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(output), std::move(backward));
  }

  Tensor record(std::string_view op, std::span<const Tensor> inputs, Tensor output, BackwardFn backward) {
    if (!grad_mode()) return output;
    bool any = false;
    for (const auto& in : inputs) any = any || tracks(in);
    if (!any) return output;
    Node node;
    node.op = op;
    node.out_numel = output.numel();
    node.backward = std::move(backward);
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) node.inputs.push_back(in.impl());
    auto& impl = *output.impl();
    impl.tape = this;
    impl.generation = generation_;
    impl.node = nodes_.size();
    nodes_.push_back(std::move(node));
    return output;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t last_visit_count() const noexcept { return last_visits_; }
  std::string_view op_at(std::size_t i) const { return nodes_.at(i).op; }

  // Accumulates d(loss)/d(leaf) into every tracked leaf's grad buffer. The
  // tape is cleared afterwards unless `retain` is set, which allows several
  // backward passes over one forward graph.
  void backward(const Tensor& loss, bool retain = false) {
    if (!loss.impl()) fail(ErrorCode::DetachedValue, "backward on an empty tensor");
    if (loss.numel() != 1) fail(ErrorCode::NotScalar, "backward needs a scalar, got " + shape_str(loss.shape()));
    if (!owns(loss)) fail(ErrorCode::DetachedValue, "loss is not recorded on this tape");
    std::vector<std::vector<double>> grads(nodes_.size());
    grads[loss.impl()->node].assign(1, 1.0);
    std::vector<std::span<double>> grad_in;
    std::size_t visits = 0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      ++visits;
      if (grads[i].empty()) continue;
      Node& node = nodes_[i];
      grad_in.assign(node.inputs.size(), std::span<double>{});
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        detail::TensorImpl& in = *node.inputs[k];
        if (in.requires_grad) {
          grad_in[k] = in.grad;
        } else if (in.tape == this && in.generation == generation_ && in.node != detail::kNoNode) {
          auto& g = grads[in.node];
          if (g.empty()) g.assign(nodes_[in.node].out_numel, 0.0);
          grad_in[k] = g;
        }
      }
      node.backward(grads[i], grad_in);
      grads[i].clear();
      grads[i].shrink_to_fit();
    }
    last_visits_ = visits;
    if (!retain) clear();
  }

  void clear() {
    nodes_.clear();
    ++generation_;
  }

 private:
  std::vector<Node> nodes_;
  std::uint64_t generation_ = 1;
  std::size_t last_visits_ = 0;
};

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::grad_mode()) { Tape::grad_mode() = false; }
  ~NoGradGuard() { Tape::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline void backward(const Tensor& loss, Tape& tape = Tape::active()) { tape.backward(loss, false); }

}  // namespace dagg
