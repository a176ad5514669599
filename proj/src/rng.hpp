#pragma once

#include <cstdint>

namespace lbsac {

// Counter-based SplitMix64 stream.
//
// The generator is pinned so that datasets and training runs can be
// reproduced from (seed, stream, counter) alone, in any language:
//
//   finalize(z): z *= 0xBF58476D1CE4E5B9 after z ^= z >> 30;
//               z *= 0x94D049BB133111EB after z ^= z >> 27;
//               return z ^ (z >> 31)
//   key(seed, stream) = finalize(finalize(seed + GOLDEN * (stream + 1)))
//   draw(i)           = finalize(key + GOLDEN * (i + 1)),  i = 0, 1, 2, ...
//
// with GOLDEN = 0x9E3779B97F4A7C15. Draws are pure functions of the
// counter, so a stream can be split across threads or resumed from a
// checkpoint without replaying it.
class RngStream {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

  RngStream() = default;
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : key_(finalize(finalize(seed + kGolden * (stream + 1)))) {}

  static std::uint64_t finalize(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() { return at(counter_++); }

  // Value of draw i without advancing the stream.
  std::uint64_t at(std::uint64_t i) const {
    return finalize(key_ + kGolden * (i + 1));
  }

  // Uniform on (0,1), strictly inside so inverse-CDF sampling never sees 0 or 1.
  double next_unit() { return unit_at(counter_++); }
  double unit_at(std::uint64_t i) const {
    return (static_cast<double>(at(i) >> 11) + 0.5) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Index in [0, n) via 128-bit multiply-shift (no modulo bias to 2^-64).
  std::uint64_t next_index(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double next_normal();  // inverse-CDF sampling, see mathfn.hpp

  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }
  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace lbsac
