#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dagg/error.hpp"
#include "dagg/tensor.hpp"

// Binary parameter checkpoint:
//   "DAGG" | u32 version | { u32 name_len | name bytes | u32 rank | u32 dim * rank | f64 * numel }*
// All integers and floats little-endian. Records run to end of file.
namespace dagg {

inline constexpr char kCheckpointMagic[4] = {'D', 'A', 'G', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_f64(std::vector<unsigned char>& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorCode::TruncatedFile, source_ + ": needed " + std::to_string(n) + " bytes at offset " +
                                         std::to_string(pos_) + ", file has " + std::to_string(bytes_.size()));
    }
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const std::vector<NamedArray>& params) {
  std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  for (const auto& p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p.values) detail::put_f64(out, v);
  }
  return out;
}

inline std::vector<NamedArray> decode_checkpoint(const std::vector<unsigned char>& bytes,
                                                 const std::string& source = "checkpoint") {
  detail::ByteReader in(bytes, source);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    fail(ErrorCode::BadMagic, source + ": not a DAGG checkpoint");
  }
  in.str(4);
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorCode::BadMagic, source + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<NamedArray> params;
  while (!in.done()) {
    NamedArray p;
    p.name = in.str(in.u32());
    const std::uint32_t rank = in.u32();
    for (std::uint32_t i = 0; i < rank; ++i) p.shape.push_back(in.u32());
    const std::size_t n = shape_numel(p.shape);
    in.need(n * 8);
    p.values.resize(n);
    for (auto& v : p.values) v = in.f64();
    params.push_back(std::move(p));
  }
  return params;
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& params) {
  detail::write_file(path, encode_checkpoint(params));
}

inline std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

}  // namespace dagg
