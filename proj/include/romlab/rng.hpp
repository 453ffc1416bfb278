#pragma once

// Deterministic random streams. Every stochastic decision in the pipeline draws
// from a stream keyed by (master seed, purpose, ordinals...), so results do not
// depend on scheduling or worker count.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace romlab {

enum class Purpose : std::uint64_t {
  mask_scores = 1,
  corruption = 2,
  init = 3,
  batch_order = 4,
  spans = 5,
  dropout = 6,
  synthetic = 7,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, Purpose purpose,
                                    std::initializer_list<std::uint64_t> parts = {}) noexcept {
  std::uint64_t h = splitmix64(master ^ 0x726F6D6C6162ull);
  h = splitmix64(h ^ static_cast<std::uint64_t>(purpose));
  for (std::uint64_t p : parts) h = splitmix64(h ^ p);
  return h;
}

// mt19937_64 is bit-exact across standard libraries; the conversions below are
// written out because std:: distributions are implementation-defined.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}
  RandomStream(std::uint64_t master, Purpose purpose, std::initializer_list<std::uint64_t> parts = {})
      : engine_(derive_seed(master, purpose, parts)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on a 2^-32 grid in [0, 1). Adding any double in [0, 1] to such a
  // value is exact when the addend is itself representable at 2^-32 resolution,
  // and rounding is monotone otherwise, so score orderings survive constant shifts.
  double uniform32() { return static_cast<double>(engine_() >> 32) * 0x1.0p-32; }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

  // Box-Muller; one value per call keeps the stream position a pure function of call count.
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace romlab
