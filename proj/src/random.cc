#include "cfltr/random.h"

#include <cmath>

namespace cfltr {

std::uint64_t SplitMix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t DeriveSeed(std::uint64_t base, std::string_view component,
                         std::uint64_t a, std::uint64_t b) {
  // FNV-1a over the component name.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : component) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t s = SplitMix64(base ^ h);
  s = SplitMix64(s ^ a);
  s = SplitMix64(s ^ (b * 0x9e3779b97f4a7c15ULL));
  return s;
}

double UniformUnit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double UniformReal(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * UniformUnit(rng);
}

std::uint64_t UniformIndex(Rng& rng, std::uint64_t n) {
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % n;
}

bool Bernoulli(Rng& rng, double p) { return UniformUnit(rng) < p; }

double StandardNormal(Rng& rng) {
  // Box-Muller; the second variate is discarded to keep draws stateless.
  double u1 = UniformUnit(rng);
  while (u1 <= 0.0) u1 = UniformUnit(rng);
  const double u2 = UniformUnit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int Binomial(Rng& rng, int n, double p) {
  if (n <= 0 || p <= 0.0) return 0;
  if (p >= 1.0) return n;
  std::binomial_distribution<int> dist(n, p);
  return dist(rng);
}

}  // namespace cfltr
