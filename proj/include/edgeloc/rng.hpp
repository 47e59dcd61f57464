#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace edgeloc {

// Deterministic random source. mt19937_64 is fully specified by the standard;
// the distributions below are hand-rolled because the standard library ones
// are implementation-defined, and corpus bytes must reproduce across builds.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n), n > 0.
  std::uint64_t below(std::uint64_t n);

  /// Standard normal (Box-Muller).
  double gaussian();

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  /// Derive the seed of an independent stream (e.g. one per reference point).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace edgeloc
