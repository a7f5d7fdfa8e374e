#pragma once

#include <cstdint>
#include <initializer_list>

#include <boost/random/exponential_distribution.hpp>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/poisson_distribution.hpp>
#include <boost/random/uniform_01.hpp>

namespace lgabc {

/// SplitMix64 finalizer. Pinned so derived seeds are identical everywhere.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derive an independent stream seed from a master seed and a path of indices,
/// e.g. derive_seed(master, stream_tag, round, particle).
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t h = mix64(master);
  for (std::uint64_t v : path) h = mix64(h ^ mix64(v + 0x632BE59BD9B4E019ULL));
  return h;
}

/// Stream tags used with derive_seed so that different consumers of one master
/// seed never share a stream.
enum class Stream : std::uint64_t {
  observation = 1,
  pool = 2,
  training = 3,
  test = 4,
  pseudo_observation = 5,
  smc_init = 6,
  smc_move = 7,
  smc_resample = 8,
  subsample = 9,
};

inline std::uint64_t derive_seed(std::uint64_t master, Stream s, std::uint64_t i) noexcept {
  return derive_seed(master, {static_cast<std::uint64_t>(s), i});
}

/// Seeded random stream. Every distribution is Boost's header implementation,
/// so draws do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on [0, 1).
  double uniform() { return boost::random::uniform_01<double>()(engine_); }
  /// Uniform on (lo, hi].
  double uniform(double lo, double hi) { return hi - (hi - lo) * uniform(); }
  double normal(double mean, double sd) {
    return boost::random::normal_distribution<double>(mean, sd)(engine_);
  }
  double exponential(double rate) {
    return boost::random::exponential_distribution<double>(rate)(engine_);
  }
  /// Poisson draw; inversion below mean 10, transformed rejection (PTRS) above.
  long poisson(double mean) {
    if (mean <= 0.0) return 0;
    return boost::random::poisson_distribution<long, double>(mean)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }

 private:
  boost::random::mt19937_64 engine_;
};

}  // namespace lgabc
