#ifndef CFLTR_RANDOM_H_
#define CFLTR_RANDOM_H_

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace cfltr {

using Rng = std::mt19937_64;

std::uint64_t SplitMix64(std::uint64_t x);

// Derives an independent stream seed from a parent seed, a component name and
// up to two indices. Used everywhere a stochastic component needs a seed so
// that no global RNG state exists.
std::uint64_t DeriveSeed(std::uint64_t base, std::string_view component,
                         std::uint64_t a = 0, std::uint64_t b = 0);

// Uniform double in [0, 1) built from the top 53 bits of one draw.
double UniformUnit(Rng& rng);

// Uniform double in [lo, hi).
double UniformReal(Rng& rng, double lo, double hi);

// Uniform integer in [0, n). n must be > 0.
std::uint64_t UniformIndex(Rng& rng, std::uint64_t n);

bool Bernoulli(Rng& rng, double p);

double StandardNormal(Rng& rng);

int Binomial(Rng& rng, int n, double p);

template <typename T>
void Shuffle(std::span<T> values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    const std::size_t j = UniformIndex(rng, i);
    std::swap(values[i - 1], values[j]);
  }
}

}  // namespace cfltr

#endif  // CFLTR_RANDOM_H_
