#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace wm {

// splitmix64: the single PRNG used everywhere in this project (init, sampling,
// batching, key material, green-list hashing). Pinned so that every artifact
// is reproducible from seeds alone, independent of the standard library.
struct SplitMix64 {
  uint64_t state = 0;

  explicit SplitMix64(uint64_t seed = 0) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1), 53-bit resolution
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

  // standard normal via Box-Muller (no cached spare: keeps the stream
  // position a pure function of the call count)
  double next_normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void fill_normal(std::span<T> out, double mean, double stddev) {
    for (auto& v : out) v = static_cast<T>(mean + stddev * next_normal());
  }

  template <typename T>
  void fill_uniform(std::span<T> out, double lo, double hi) {
    for (auto& v : out) v = static_cast<T>(lo + (hi - lo) * next_double());
  }
};

// Stateless counter-based generator: value = mix(key, counter). Used where a
// value must be addressable without sequential state (per-context hashing).
inline uint64_t counter_hash(uint64_t key, uint64_t counter) {
  uint64_t z = key + 0x9e3779b97f4a7c15ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Combine a base seed with a stream index into an independent seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) { return counter_hash(seed, stream); }

// Seeded Fisher-Yates permutation of 0..n-1.
inline std::vector<int> seeded_permutation(int n, SplitMix64& rng) {
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(i) + 1));
    int tmp = perm[i];
    perm[i] = perm[j];
    perm[j] = tmp;
  }
  return perm;
}

}  // namespace wm
