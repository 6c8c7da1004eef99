#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dagg/checkpoint.hpp"
#include "dagg/ops.hpp"
#include "dagg/rng.hpp"

namespace dagg {

enum class LayerKind { Conv, Relu, AvgPool2, Flatten, Linear };

struct LayerSpec {
  LayerKind kind;
  std::size_t in = 0;   // conv: input channels; linear: fan-in
  std::size_t out = 0;  // conv: output channels; linear: fan-out
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                        std::size_t pad = 0) {
    return {LayerKind::Conv, in, out, kernel, stride, pad};
  }
  static LayerSpec relu() { return {LayerKind::Relu}; }
  static LayerSpec avgpool2() { return {LayerKind::AvgPool2}; }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }
  static LayerSpec linear(std::size_t in, std::size_t out) { return {LayerKind::Linear, in, out}; }
};

inline std::string_view layer_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::AvgPool2: return "avgpool2";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Linear: return "linear";
  }
  return "?";
}

// Tapped activations plus logits for one batch.
struct FeatureBundle {
  std::map<std::string, Tensor> taps;
  Tensor logits;

  // "logits" names the output; anything else must be a declared tap.
  const Tensor& at(const std::string& name) const {
    if (name == "logits") return logits;
    auto it = taps.find(name);
    if (it == taps.end()) fail(ErrorCode::UnknownTap, "no tap named '" + name + "'");
    return it->second;
  }

  std::size_t batch() const { return logits.dim(0); }
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Kaiming-uniform (ReLU gain) weights, zero biases.
inline Tensor kaiming_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(values));
}

class TappedNetwork {
 public:
  TappedNetwork(std::vector<LayerSpec> layers, Shape input_shape, std::size_t classes,
                std::vector<std::pair<std::string, std::size_t>> taps, Rng& init)
      : specs_(std::move(layers)), input_shape_(std::move(input_shape)), classes_(classes), taps_(std::move(taps)) {
    for (const auto& [name, index] : taps_) {
      if (index >= specs_.size()) fail(ErrorCode::BadShape, "tap '" + name + "' points past the last layer");
      if (name == "logits") fail(ErrorCode::BadShape, "'logits' is reserved");
    }
    validate_shapes();
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto& s = specs_[i];
      Layer layer;
      if (s.kind == LayerKind::Conv) {
        layer.weight = kaiming_uniform(init, {s.out, s.in, s.kernel, s.kernel}, s.in * s.kernel * s.kernel);
        layer.bias = Tensor::zeros({s.out});
      } else if (s.kind == LayerKind::Linear) {
        // Stored [in, out] so forward is x * W.
        layer.weight = kaiming_uniform(init, {s.in, s.out}, s.in);
        layer.bias = Tensor::zeros({s.out});
      }
      layers_.push_back(std::move(layer));
    }
    set_trainable(true);
  }

  const Shape& input_shape() const { return input_shape_; }
  std::size_t classes() const { return classes_; }
  const std::vector<LayerSpec>& layers() const { return specs_; }
  const std::vector<std::pair<std::string, std::size_t>>& taps() const { return taps_; }
  bool frozen() const { return frozen_; }

  // Frozen networks expose no requires_grad parameters and record nothing.
  void freeze() {
    frozen_ = true;
    set_trainable(false);
  }

  // Canonical order: layer index, then weight before bias.
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (!layers_[i].weight.defined()) continue;
      const std::string prefix = std::to_string(i) + "." + std::string(layer_name(specs_[i].kind));
      out.push_back({prefix + ".weight", layers_[i].weight});
      out.push_back({prefix + ".bias", layers_[i].bias});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value.numel();
    return n;
  }

  std::vector<NamedArray> export_parameters() const {
    std::vector<NamedArray> out;
    for (const auto& p : parameters()) {
      out.push_back({p.name, p.value.shape(), {p.value.data().begin(), p.value.data().end()}});
    }
    return out;
  }

  // Copies values in by name; every parameter must be present with its shape.
  void load_parameters(const std::vector<NamedArray>& records) {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    for (auto& p : parameters()) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) fail(ErrorCode::UnknownParameter, "checkpoint lacks '" + p.name + "'");
      if (it->second->shape != p.value.shape()) {
        fail(ErrorCode::ShapeMismatch, "'" + p.name + "' is " + shape_str(it->second->shape) + ", network expects " +
                                           shape_str(p.value.shape()));
      }
      std::copy(it->second->values.begin(), it->second->values.end(), p.value.mutable_data().begin());
    }
    if (by_name.size() != parameters().size()) {
      fail(ErrorCode::UnknownParameter, "checkpoint has parameters this network does not declare");
    }
  }

  FeatureBundle forward(const Tensor& batch) const {
    Shape expected{0};
    expected.insert(expected.end(), input_shape_.begin(), input_shape_.end());
    expected[0] = batch.rank() > 0 ? batch.dim(0) : 0;
    if (batch.shape() != expected || expected[0] == 0) {
      fail(ErrorCode::ShapeMismatch, "batch " + shape_str(batch.shape()) + " does not match input " +
                                         shape_str(input_shape_));
    }
    if (frozen_) {
      NoGradGuard guard;
      return run(batch);
    }
    return run(batch);
  }

  // Per-sample shape of every tap, in declaration order.
  std::map<std::string, Shape> tap_shapes() const {
    Shape probe{1};
    probe.insert(probe.end(), input_shape_.begin(), input_shape_.end());
    NoGradGuard guard;
    auto bundle = run(Tensor::zeros(probe));
    std::map<std::string, Shape> out;
    for (const auto& [name, t] : bundle.taps) out[name] = Shape(t.shape().begin() + 1, t.shape().end());
    return out;
  }

 private:
  struct Layer {
    Tensor weight;
    Tensor bias;
  };

  void set_trainable(bool on) {
    for (auto& l : layers_) {
      if (!l.weight.defined()) continue;
      l.weight.set_requires_grad(on);
      l.bias.set_requires_grad(on);
    }
  }

  FeatureBundle run(const Tensor& batch) const {
    FeatureBundle bundle;
    Tensor x = batch;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto& s = specs_[i];
      switch (s.kind) {
        case LayerKind::Conv:
          x = ops::add_channel_bias(ops::conv2d(x, layers_[i].weight, s.stride, s.pad), layers_[i].bias);
          break;
        case LayerKind::Relu: x = ops::relu(x); break;
        case LayerKind::AvgPool2: x = ops::avgpool2(x); break;
        case LayerKind::Flatten: x = ops::flatten(x); break;
        case LayerKind::Linear: x = ops::add_row_bias(ops::matmul(x, layers_[i].weight), layers_[i].bias); break;
      }
      for (const auto& [name, index] : taps_) {
        if (index == i) bundle.taps[name] = x;
      }
    }
    bundle.logits = x;
    return bundle;
  }

  void validate_shapes() const {
    Shape shape = input_shape_;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto& s = specs_[i];
      const std::string where = "layer " + std::to_string(i) + " (" + std::string(layer_name(s.kind)) + ")";
      switch (s.kind) {
        case LayerKind::Conv: {
          if (shape.size() != 3 || shape[0] != s.in) fail(ErrorCode::BadShape, where + " input " + shape_str(shape));
          if (s.kernel == 0 || s.stride == 0 || shape[1] + 2 * s.pad < s.kernel || shape[2] + 2 * s.pad < s.kernel) {
            fail(ErrorCode::BadShape, where + " kernel does not fit input " + shape_str(shape));
          }
          shape = {s.out, (shape[1] + 2 * s.pad - s.kernel) / s.stride + 1,
                   (shape[2] + 2 * s.pad - s.kernel) / s.stride + 1};
          break;
        }
        case LayerKind::Relu: break;
        case LayerKind::AvgPool2:
          if (shape.size() != 3 || shape[1] < 2 || shape[2] < 2) fail(ErrorCode::BadShape, where + " input " + shape_str(shape));
          shape = {shape[0], shape[1] / 2, shape[2] / 2};
          break;
        case LayerKind::Flatten: shape = {shape_numel(shape)}; break;
        case LayerKind::Linear:
          if (shape.size() != 1 || shape[0] != s.in) fail(ErrorCode::BadShape, where + " input " + shape_str(shape));
          shape = {s.out};
          break;
      }
    }
    if (shape != Shape{classes_}) {
      fail(ErrorCode::BadShape, "network output " + shape_str(shape) + " does not match " + std::to_string(classes_) +
                                    " classes");
    }
  }

  std::vector<LayerSpec> specs_;
  std::vector<Layer> layers_;
  Shape input_shape_;
  std::size_t classes_;
  std::vector<std::pair<std::string, std::size_t>> taps_;
  bool frozen_ = false;
};

// Channel widths of the three conv stages at width multiplier 1.
inline constexpr std::array<std::size_t, 3> kConvnetBaseChannels = {8, 8, 16};

// conv3x3 -> relu -> avgpool2 [b1] -> conv3x3 -> relu -> avgpool2 [b2] ->
// conv3x3 -> relu [b3] -> flatten -> linear. Convs are same-padded.
inline TappedNetwork build_convnet(std::size_t width_multiplier, const std::array<std::size_t, 3>& input_chw,
                                   std::size_t classes, std::uint64_t seed, Stream stream = Stream::StudentInit) {
  const auto [c, h, w] = input_chw;
  if (width_multiplier == 0 || classes == 0 || c == 0) fail(ErrorCode::BadShape, "convnet sizes must be positive");
  if (h < 8 || w < 8) fail(ErrorCode::BadShape, "convnet input must be at least 8x8, got " + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t c1 = kConvnetBaseChannels[0] * width_multiplier;
  const std::size_t c2 = kConvnetBaseChannels[1] * width_multiplier;
  const std::size_t c3 = kConvnetBaseChannels[2] * width_multiplier;
  const std::size_t fh = h / 4, fw = w / 4;
  std::vector<LayerSpec> layers{
      LayerSpec::conv(c, c1, 3, 1, 1), LayerSpec::relu(), LayerSpec::avgpool2(),
      LayerSpec::conv(c1, c2, 3, 1, 1), LayerSpec::relu(), LayerSpec::avgpool2(),
      LayerSpec::conv(c2, c3, 3, 1, 1), LayerSpec::relu(),
      LayerSpec::flatten(),             LayerSpec::linear(c3 * fh * fw, classes),
  };
  Rng rng = Rng::derive(seed, stream);
  return TappedNetwork(std::move(layers), {c, h, w}, classes, {{"b1", 2}, {"b2", 5}, {"b3", 7}}, rng);
}

// linear -> relu per hidden width [h1, h2, ...] -> linear head.
inline TappedNetwork build_mlp(const std::vector<std::size_t>& hidden, std::size_t input_dim, std::size_t classes,
                               std::uint64_t seed, Stream stream = Stream::StudentInit) {
  if (hidden.empty()) fail(ErrorCode::BadShape, "mlp needs at least one hidden layer");
  std::vector<LayerSpec> layers;
  std::vector<std::pair<std::string, std::size_t>> taps;
  std::size_t fan_in = input_dim;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (hidden[i] == 0) fail(ErrorCode::BadShape, "hidden width must be positive");
    layers.push_back(LayerSpec::linear(fan_in, hidden[i]));
    layers.push_back(LayerSpec::relu());
    taps.emplace_back("h" + std::to_string(i + 1), layers.size() - 1);
    fan_in = hidden[i];
  }
  layers.push_back(LayerSpec::linear(fan_in, classes));
  Rng rng = Rng::derive(seed, stream);
  return TappedNetwork(std::move(layers), {input_dim}, classes, std::move(taps), rng);
}

}  // namespace dagg
