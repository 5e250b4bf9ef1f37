#include "mdml/rng.hpp"

#include <cmath>
#include <numeric>

namespace mdml {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::substream(std::uint64_t tag, std::uint64_t index) const {
  return Rng(splitmix64(seed_ ^ splitmix64(tag * 0x100000001B3ULL + splitmix64(index))));
}

// Draws are built from raw 64-bit words rather than std distributions so the
// stream is identical across standard library implementations.
double Rng::uniform(double lo, double hi) {
  const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

double Rng::normal() {
  // Box-Muller; one value per call keeps the stream position simple to reason about.
  double u1 = 0.0;
  do {
    u1 = uniform(0.0, 1.0);
  } while (u1 <= 0.0);
  const double u2 = uniform(0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n <= 1) return 0;
  // Lemire-style rejection to avoid modulo bias.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = engine_();
    if (r >= threshold) return static_cast<std::size_t>(r % bound);
  }
}

std::vector<std::size_t> Rng::sample_indices(std::size_t n, std::size_t k, bool* with_replacement) {
  std::vector<std::size_t> out;
  if (k <= n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    // Partial Fisher-Yates: the first k slots are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + index(n - i)]);
    out.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
    if (with_replacement) *with_replacement = false;
  } else {
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(index(n));
    if (with_replacement) *with_replacement = true;
  }
  return out;
}

}  // namespace mdml
