#pragma once

// Counter-based Gaussian draws. Every variate is a pure function of
// (seed, role, t, k), so streams are independent, replayable out of order and
// identical regardless of how work is split across threads.

#include <cmath>
#include <cstdint>
#include <numbers>

#include "implicit_lqg/linalg.hpp"

namespace implicit_lqg {

enum class StreamRole : std::uint64_t {
  kInitialState = 1,
  kProcessNoise = 2,
  kSignal = 3,
  kControllerNoise = 4,
  kReceiverNoise = 5,
  kBits = 6,
  kRestart = 7,
  kBootstrap = 8,
  kInnerSeed = 9,
  kTestData = 10,
};

namespace rng {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t hash(std::uint64_t seed, StreamRole role,
                                    std::uint64_t t, std::uint64_t k) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(role));
  h = splitmix64(h ^ t);
  return splitmix64(h ^ k);
}

/// Uniform on the open interval (0, 1).
inline double uniform(std::uint64_t seed, StreamRole role, std::uint64_t t,
                      std::uint64_t k) {
  return (static_cast<double>(hash(seed, role, t, k) >> 11) + 0.5) * 0x1.0p-53;
}

inline double standard_normal(std::uint64_t seed, StreamRole role,
                              std::uint64_t t, std::uint64_t k) {
  const double u1 = uniform(seed, role, t, 2 * k);
  const double u2 = uniform(seed, role, t, 2 * k + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace rng

/// A (seed, role) pair; draws are indexed by time step and component.
class CounterStream {
 public:
  CounterStream(std::uint64_t seed, StreamRole role) : seed_(seed), role_(role) {}

  double normal(std::uint64_t t, std::uint64_t k) const {
    return rng::standard_normal(seed_, role_, t, k);
  }
  double uniform(std::uint64_t t, std::uint64_t k) const {
    return rng::uniform(seed_, role_, t, k);
  }
  std::uint64_t bits(std::uint64_t t, std::uint64_t k) const {
    return rng::hash(seed_, role_, t, k);
  }
  Vector normal_vector(std::uint64_t t, Eigen::Index dim) const {
    Vector out(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
      out(i) = normal(t, static_cast<std::uint64_t>(i));
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  StreamRole role_;
};

}  // namespace implicit_lqg
