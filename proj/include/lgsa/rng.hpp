// Portable counter-based random numbers.
//
// Draw k of stream s is splitmix64(s + (k + 1) * 0x9E3779B97F4A7C15): the
// SplitMix64 finalizer applied to a Weyl sequence. Uniforms take the top 53
// bits; normals use Box-Muller with the cosine branch only, so every normal
// consumes exactly two uniforms. Any implementation that follows these three
// rules regenerates the same corpora bit for bit.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace lgsa {

inline std::uint64_t splitmix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream key from a parent key and a label.
inline std::uint64_t derive_stream(std::uint64_t parent, std::uint64_t label) {
  return splitmix64(parent ^ splitmix64(label + 0x632BE59BD9B4E019ULL));
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t stream) : stream_(stream) {}

  std::uint64_t next_u64() {
    ++counter_;
    return splitmix64(stream_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates shuffle driven by CounterRng.
template <typename Vec>
void shuffle(Vec& v, CounterRng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace lgsa
