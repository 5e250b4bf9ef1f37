#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace mdml {

// Seeded generator with named, independent substreams.
//
// A substream is a pure function of (seed, stream tag, index): two Rng objects
// derived with the same triple produce identical draws regardless of what any
// other stream consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  Rng substream(std::uint64_t tag, std::uint64_t index = 0) const;

  double uniform(double lo, double hi);
  double normal();
  std::size_t index(std::size_t n);  // uniform in [0, n)
  std::uint64_t next_u64() { return engine_(); }

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[index(i)]);
    }
  }

  // k distinct draws from [0, n) when k <= n; otherwise draws with replacement.
  std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, bool* with_replacement);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Stream tags used across the library. Keeping them in one place guarantees
// two subsystems never share a substream by accident.
namespace stream {
inline constexpr std::uint64_t kInit = 0x11;
inline constexpr std::uint64_t kSplit = 0x22;
inline constexpr std::uint64_t kEpisode = 0x33;
inline constexpr std::uint64_t kMinibatch = 0x44;
inline constexpr std::uint64_t kBalance = 0x55;
inline constexpr std::uint64_t kSynthetic = 0x66;
inline constexpr std::uint64_t kHardness = 0x77;
inline constexpr std::uint64_t kGradcheck = 0x88;
}  // namespace stream

}  // namespace mdml
