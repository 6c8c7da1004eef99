#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace dagg {

// Fixed stream identifiers. Every stochastic consumer of a run draws from its
// own stream so that adding a consumer never shifts another one's sequence.
enum class Stream : std::uint64_t {
  StudentInit = 1,
  TeacherInit = 2,
  AdapterInit = 3,
  Shuffle = 4,
  Synthetic = 5,
  TeacherShuffle = 6,
  Corpus = 7,
};

constexpr std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** with splitmix64 seeding. Deterministic across platforms: the
// float and normal draws below avoid the implementation-defined std
// distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  // Independent generator for (seed, stream, sub-index).
  static Rng derive(std::uint64_t seed, Stream stream, std::uint64_t sub = 0) {
    std::uint64_t mix = seed;
    std::uint64_t a = splitmix64(mix);
    std::uint64_t b = static_cast<std::uint64_t>(stream) * 0xd1342543de82ef95ULL + sub * 0x2545f4914f6cdd1dULL;
    std::uint64_t c = a ^ splitmix64(b);
    return Rng(c);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t s_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dagg
