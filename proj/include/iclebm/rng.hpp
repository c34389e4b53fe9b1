#pragma once
// Deterministic RNG built on the splitmix64 finalizer. Sub-streams are derived
// by hash-folding integer tags into the seed, so any draw is a pure function of
// (seed, tags..., draw index) and independent of scheduling or batch layout.

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace iclebm::rng {

inline constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

// Independent stream seed for a tag tuple.
inline std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = mix64(seed + kGamma);
  for (std::uint64_t t : tags) s = mix64(s ^ (t + kGamma + (s << 6) + (s >> 2)));
  return s;
}

class Stream {
 public:
  explicit Stream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += kGamma;
    return mix64(state_);
  }

  // Uniform on [0, 1) with 53-bit resolution.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  // Standard normal via Box-Muller; two uniforms per draw, no cached spare.
  double next_normal() {
    const double u1 = 1.0 - next_uniform();  // (0, 1], keeps log finite
    const double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Zero-mean unit normal truncated to [-2, 2] by resampling.
  double next_normal_trunc2() {
    double z = next_normal();
    while (z < -2.0 || z > 2.0) z = next_normal();
    return z;
  }

 private:
  std::uint64_t state_;
};

}  // namespace iclebm::rng
