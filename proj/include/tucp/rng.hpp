#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace tucp {

// Seeded generator with platform-independent draws. std::mt19937_64 output is
// fully specified by the standard; the std::*_distribution adaptors are not,
// so every draw here is derived from raw 64-bit words.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  // Uniform on (0, 1); safe for log().
  double uniform_open() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double gumbel();
  bool bernoulli(double p) { return uniform() < p; }

  std::vector<double> normals(std::size_t n);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  // Independent child stream; same (seed, stream) always yields the same child.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace tucp
