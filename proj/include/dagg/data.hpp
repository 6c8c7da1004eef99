#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dagg/checkpoint.hpp"
#include "dagg/error.hpp"
#include "dagg/rng.hpp"
#include "dagg/tensor.hpp"

namespace dagg {

struct Dataset {
  Tensor inputs;            // [N, ...]
  std::vector<int> labels;  // N labels in [0, classes)
  std::size_t classes = 0;
  std::string split = "train";

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }
  std::size_t sample_numel() const { return size() == 0 ? 0 : inputs.numel() / size(); }

  // Copies the listed samples, in order, into a fresh batch tensor.
  std::pair<Tensor, std::vector<int>> gather(std::span<const std::size_t> indices) const {
    const std::size_t d = sample_numel();
    std::vector<double> values(indices.size() * d);
    std::vector<int> y(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(inputs.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d,
                  values.begin() + static_cast<std::ptrdiff_t>(i * d));
      y[i] = labels[indices[i]];
    }
    Shape shape = sample_shape();
    shape.insert(shape.begin(), indices.size());
    return {Tensor::from_data(std::move(shape), std::move(values)), std::move(y)};
  }

  Dataset slice(std::size_t begin, std::size_t end, std::string tag) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    auto [x, y] = gather(idx);
    return {std::move(x), std::move(y), classes, std::move(tag)};
  }
};

inline void check_labels(const std::vector<int>& labels, std::size_t classes, const std::string& source) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      fail(ErrorCode::LabelRange, source + ": label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                                      " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// ---- IDX (big-endian) ----

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxImages {
  std::size_t n = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // n * rows * cols, row-major
};

namespace detail {

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<unsigned char>(v >> shift));
}

inline void require_bytes(const std::vector<unsigned char>& b, std::size_t n, const std::string& source) {
  if (b.size() < n) {
    fail(ErrorCode::TruncatedFile, source + ": expected at least " + std::to_string(n) + " bytes, found " +
                                       std::to_string(b.size()));
  }
}

}  // namespace detail

inline IdxImages read_idx_images(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  const std::string src = path.string();
  detail::require_bytes(b, 16, src);
  if (detail::be32(b, 0) != kIdxImagesMagic) fail(ErrorCode::BadMagic, src + ": not an IDX image file");
  IdxImages img{detail::be32(b, 4), detail::be32(b, 8), detail::be32(b, 12), {}};
  const std::size_t count = img.n * img.rows * img.cols;
  detail::require_bytes(b, 16 + count, src);
  img.pixels.assign(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(count));
  return img;
}

inline std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  const std::string src = path.string();
  detail::require_bytes(b, 8, src);
  if (detail::be32(b, 0) != kIdxLabelsMagic) fail(ErrorCode::BadMagic, src + ": not an IDX label file");
  const std::size_t n = detail::be32(b, 4);
  detail::require_bytes(b, 8 + n, src);
  return {b.begin() + 8, b.begin() + 8 + static_cast<std::ptrdiff_t>(n)};
}

inline void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                      const IdxImages& images, const std::vector<std::uint8_t>& labels) {
  if (images.pixels.size() != images.n * images.rows * images.cols) {
    fail(ErrorCode::CountMismatch, "write_idx: pixel buffer does not match dimensions");
  }
  std::vector<unsigned char> out;
  detail::put_be32(out, kIdxImagesMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(images.n));
  detail::put_be32(out, static_cast<std::uint32_t>(images.rows));
  detail::put_be32(out, static_cast<std::uint32_t>(images.cols));
  out.insert(out.end(), images.pixels.begin(), images.pixels.end());
  detail::write_file(images_path, out);
  out.clear();
  detail::put_be32(out, kIdxLabelsMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  detail::write_file(labels_path, out);
}

// Images become [N,1,H,W] with pixels scaled to [0,1].
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t classes) {
  auto img = read_idx_images(images_path);
  auto lab = read_idx_labels(labels_path);
  if (img.n != lab.size()) {
    fail(ErrorCode::CountMismatch, images_path.string() + " has " + std::to_string(img.n) + " images, " +
                                       labels_path.string() + " has " + std::to_string(lab.size()) + " labels");
  }
  if (img.n == 0) fail(ErrorCode::EmptyDataset, images_path.string() + ": no samples");
  std::vector<double> values(img.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = img.pixels[i] / 255.0;
  std::vector<int> labels(lab.begin(), lab.end());
  check_labels(labels, classes, labels_path.string());
  return {Tensor::from_data({img.n, 1, img.rows, img.cols}, std::move(values)), std::move(labels), classes};
}

// ---- CSV: input_dim numbers then an integer label per row ----

inline Dataset parse_csv(std::string_view text, std::size_t input_dim, std::size_t classes, bool header,
                         const std::string& source = "csv") {
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t row = 0;
  std::size_t pos = 0;
  bool skip = header;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (skip) {
      skip = false;
      continue;
    }
    if (line.empty()) continue;
    ++row;
    std::vector<std::string_view> fields;
    for (std::size_t start = 0;;) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (fields.size() != input_dim + 1) {
      fail(ErrorCode::RowArity, source + ": row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                                    " fields, expected " + std::to_string(input_dim + 1));
    }
    auto trim = [](std::string_view f) {
      while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
      while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.remove_suffix(1);
      return f;
    };
    auto bad = [&](std::size_t col) {
      fail(ErrorCode::NonNumericField, source + ": row " + std::to_string(row) + " field " + std::to_string(col + 1) +
                                           " is not numeric");
    };
    for (std::size_t c = 0; c < input_dim; ++c) {
      const auto f = trim(fields[c]);
      double v = 0.0;
      auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || p != f.data() + f.size() || f.empty() || !std::isfinite(v)) bad(c);
      values.push_back(v);
    }
    const auto f = trim(fields[input_dim]);
    int label = 0;
    auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), label);
    if (ec != std::errc() || p != f.data() + f.size() || f.empty()) bad(input_dim);
    labels.push_back(label);
  }
  if (labels.empty()) fail(ErrorCode::EmptyDataset, source + ": no data rows");
  check_labels(labels, classes, source);
  const std::size_t n = labels.size();
  return {Tensor::from_data({n, input_dim}, std::move(values)), std::move(labels), classes};
}

inline Dataset load_csv(const std::filesystem::path& path, std::size_t input_dim, std::size_t classes,
                        bool header = false) {
  const auto bytes = detail::read_file(path);
  return parse_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), input_dim, classes,
                   header, path.string());
}

// ---- Synthetic 2-D sets ----

enum class SyntheticKind { TwoSpirals, GaussianBlobs };

// Balanced, deterministic in seed. Labels cycle 0..classes-1 so class counts
// differ by at most one.
inline Dataset gen_synthetic(SyntheticKind kind, std::size_t n, double noise, std::uint64_t seed,
                             std::size_t classes = 2) {
  if (n < 2) fail(ErrorCode::ValidationError, "synthetic dataset needs n >= 2");
  if (kind == SyntheticKind::TwoSpirals) classes = 2;
  if (classes < 2) fail(ErrorCode::ValidationError, "synthetic dataset needs >= 2 classes");
  Rng rng = Rng::derive(seed, Stream::Synthetic);
  std::vector<double> x(2 * n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    y[i] = label;
    double px = 0.0, py = 0.0;
    if (kind == SyntheticKind::TwoSpirals) {
      const double t = 0.25 + 2.75 * rng.uniform();  // turns of the arm
      const double r = t / 3.0;
      const double angle = 2.0 * std::numbers::pi * t + (label == 0 ? 0.0 : std::numbers::pi);
      px = r * std::cos(angle);
      py = r * std::sin(angle);
    } else {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(label) / static_cast<double>(classes);
      px = 2.0 * std::cos(angle);
      py = 2.0 * std::sin(angle);
    }
    x[2 * i] = px + noise * rng.normal();
    x[2 * i + 1] = py + noise * rng.normal();
  }
  return {Tensor::from_data({n, 2}, std::move(x)), std::move(y), classes};
}

}  // namespace dagg
