#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "spngd/linalg.hpp"

namespace spngd {

// Seeded random source. The engine (mt19937_64) is fully specified by the
// standard; the distributions are hand-rolled because the standard-library
// ones are not, and every consumer of this class needs run-to-run and
// toolchain-to-toolchain reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Derives an independent stream seed from (seed, tag) so that e.g. data
  // generation and label sampling never share a stream.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag);

  std::uint64_t bits() { return engine_(); }

  // Uniform on [0,1): 53 high bits of the engine output.
  double uniform();
  double uniform(double lo, double hi);

  // Uniform integer in [0, n), n >= 1.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller on open-interval uniforms.
  double normal();
  double normal(double mean, double stddev);

  // Gamma(alpha, 1) via Marsaglia-Tsang squeeze (boosted for alpha < 1).
  double gamma(double alpha);

  // Beta(a, b) as the usual two-gamma ratio.
  double beta(double a, double b);

  // Index drawn from the categorical distribution given by `probs`
  // (nonnegative, need not be normalized).
  Index categorical(const Vector& probs);

  // In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace spngd
