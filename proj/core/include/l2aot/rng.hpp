#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace l2aot {

// Deterministic RNG. mt19937_64 output is fixed by the standard and all
// derived draws below are built from raw bits only, so every stream is
// reproducible across platforms. Never use std::uniform_*_distribution
// (implementation-defined sequences).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), unbiased via rejection
  int64_t uniform_int(int64_t n);

  // standard normal, Box-Muller
  double normal();

  // Fisher-Yates
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  std::vector<int64_t> permutation(int64_t n);

  // Derive an independent child stream; splitmix-style mixing keeps nearby
  // (seed, stream) pairs decorrelated.
  Rng fork(uint64_t stream) { return Rng(mix(next_u64(), stream)); }

  static uint64_t mix(uint64_t a, uint64_t b);

 private:
  std::mt19937_64 eng_;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace l2aot
