#pragma once

#include <cstdint>
#include <limits>

namespace utiltune {

// Stream tags keep independent consumers of one seed from sharing draws.
enum class StreamTag : std::uint64_t {
  kPopulation = 1,
  kUserEmbedding = 2,
  kEnvTables = 3,
  kTraffic = 4,
  kOracle = 5,
  kAbSplit = 6,
  kAbTraffic = 7,
  kModelInit = 8,
  kShuffle = 9,
  kCalibration = 10,
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// xoshiro256** generator. Satisfies UniformRandomBitGenerator so it plugs
/// into the <random> distributions.
class Xoshiro256 {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
};

/// Counter-based sub-seeding: the stream for (seed, tag, a, b) is a pure
/// function of its coordinates, so work split across threads draws the same
/// numbers as a serial loop.
inline Xoshiro256 make_stream(std::uint64_t seed, StreamTag tag, std::uint64_t a = 0,
                              std::uint64_t b = 0) {
  std::uint64_t state = seed;
  std::uint64_t mixed = splitmix64(state);
  state = mixed ^ (static_cast<std::uint64_t>(tag) * 0xd1b54a32d192ed03ULL);
  mixed = splitmix64(state);
  state = mixed ^ (a * 0x8cb92ba72f3d8dd7ULL);
  mixed = splitmix64(state);
  state = mixed ^ (b * 0xaf251af3b0f025b5ULL);
  return Xoshiro256(splitmix64(state));
}

}  // namespace utiltune
