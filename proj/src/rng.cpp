#include "spngd/rng.hpp"

#include <cmath>

namespace spngd {

namespace {
// splitmix64 finalizer; the classic way to spread correlated seed inputs.
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t tag) {
  // Jump the splitmix64 stream rooted at `seed` forward by `tag` and mix the
  // result; asymmetric in (seed, tag), so swapped pairs stay distinct.
  return mix64(mix64(seed) + (tag + 1) * 0x9e3779b97f4a7c15ULL);
}

double Rng::uniform() {
  return static_cast<double>(bits() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  // Multiply-shift reduction; bias is O(n / 2^64), far below any statistical
  // tolerance used here, and the mapping is deterministic.
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(bits()) * n) >> 64);
}

double Rng::normal() {
  // Box-Muller with u1 on (0,1] so the log never sees zero.
  const double u1 = (static_cast<double>(bits() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::normal(double mean, double stddev) {
  return mean + stddev * normal();
}

double Rng::gamma(double alpha) {
  if (alpha < 1.0) {
    // Gamma(a) = Gamma(a+1) * U^{1/a}.
    const double u = (static_cast<double>(bits() >> 11) + 1.0) * 0x1.0p-53;
    return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
  }
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
      return d * v;
  }
}

double Rng::beta(double a, double b) {
  const double x = gamma(a);
  const double y = gamma(b);
  return x / (x + y);
}

Index Rng::categorical(const Vector& probs) {
  const double total = probs.sum();
  double u = uniform() * total;
  for (Index i = 0; i < probs.size(); ++i) {
    u -= probs[i];
    if (u < 0.0) return i;
  }
  return probs.size() - 1;  // rounding fell off the end; last bucket
}

}  // namespace spngd
