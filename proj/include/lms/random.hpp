#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>

#include "lms/array.hpp"

namespace lms {

/// Philox4x32-10 counter-based generator.
///
/// The 64-bit seed is the key; the 128-bit counter is split into a 64-bit
/// block index and a 64-bit stream id, so independent streams for the same seed
/// never overlap. Each block yields four 32-bit words that are consumed in order.
///
/// Derived draws are pinned for bitwise reproducibility:
///  - next_u64(): two consecutive words, first word in the high half.
///  - uniform():  (next_u64() >> 11) * 2^-53, in [0, 1).
///  - uniform_open(): ((next_u64() >> 11) + 0.5) * 2^-53, in (0, 1).
///  - normal(): Box-Muller on (u1 = uniform_open(), u2 = uniform()); the
///    cosine branch is returned first and the sine branch cached for the next call.
class Philox {
 public:
  using result_type = std::uint64_t;

  explicit Philox(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next_u64(); }

  std::uint32_t next_u32() {
    if (pos_ == 4) {
      block_ = generate_block(block_index_++);
      pos_ = 0;
    }
    return block_[pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    const std::uint64_t lo = next_u32();
    return (hi << 32) | lo;
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform_open() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  double normal() {
    if (cached_normal_) {
      const double v = *cached_normal_;
      cached_normal_.reset();
      return v;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(theta);
    return r * std::cos(theta);
  }

  RealArray normal_array(const Shape& shape) {
    RealArray out(shape);
    for (auto& v : out.data()) v = normal();
    return out;
  }

  /// Standard circular complex normal: real and imaginary parts N(0, 1/2).
  ComplexArray complex_normal_array(const Shape& shape) {
    ComplexArray out(shape);
    const double s = std::sqrt(0.5);
    for (auto& v : out.data()) {
      const double re = normal();
      const double im = normal();
      v = cdouble(s * re, s * im);
    }
    return out;
  }

  std::uint64_t seed() const { return (std::uint64_t{key_[1]} << 32) | key_[0]; }
  std::uint64_t stream() const { return stream_; }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  std::array<std::uint32_t, 4> generate_block(std::uint64_t index) const {
    return raw_block({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                      static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                     key_);
  }

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_;
  std::uint64_t block_index_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int pos_ = 4;
  std::optional<double> cached_normal_;

 public:
  /// The bare Philox4x32-10 bijection.
  static std::array<std::uint32_t, 4> raw_block(std::array<std::uint32_t, 4> ctr,
                                                std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kWeyl0;
        key[1] += kWeyl1;
      }
      const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const auto lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const auto lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }
};

}  // namespace lms
