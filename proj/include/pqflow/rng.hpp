#pragma once

#include <cstdint>
#include <string_view>

namespace pqflow {

/// splitmix64: deterministic, splittable stream generator.  Every
/// experiment derives its own independent stream from (seed, name) so
/// adding experiments never perturbs existing ones.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  /// Child stream: independent generator derived from this stream's
  /// seed and a label.
  SplitMix64 split(std::string_view label) const {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ state_;
    for (char c : label) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 0x100000001b3ULL;
    }
    return SplitMix64(h);
  }

 private:
  std::uint64_t state_;
};

}  // namespace pqflow
