#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ads {

// splitmix64; used to spread user seeds and derive per-task substreams.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** with explicit, platform-independent streams. std::mt19937_64
// is bitwise deterministic too, but the std distributions are not, so all
// draws go through hand-written transforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) {
    // multiply-shift; bias is negligible for n << 2^64 and determinism is
    // what matters here
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // standard normal via Box-Muller (no cached second value, keeps the
  // stream position a pure function of draw count)
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t state_[4];
};

// Deterministic substream derivation, e.g. per-trace RNGs from
// (run seed, prompt index).
inline uint64_t derive_seed(uint64_t seed, uint64_t index) {
  uint64_t s = seed ^ 0x6a09e667f3bcc909ULL;
  splitmix64(s);
  s ^= index * 0x9e3779b97f4a7c15ULL;
  return splitmix64(s);
}

}  // namespace ads
