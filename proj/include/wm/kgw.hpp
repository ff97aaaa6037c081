#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "wm/model.hpp"

namespace wm {

// Green-list decoding watermark. The green list for a context is derived by
// seeding the project PRNG with (key, sum of the k previous token ids) —
// Additive-LeftHash — taking a Fisher-Yates permutation of 0..V-1 and marking
// its first round(gamma*V) entries green. k = 0 uses one fixed list.
struct KgwScheme {
  uint64_t key = 0;
  int context_width = 1;  // k >= 0
  double gamma = 0.25;
  double delta = 2.0;
  int vocab = Vocab::kSize;

  void validate() const;
  int green_count_per_context() const;

  // prev must hold exactly k tokens (empty when k = 0).
  std::vector<uint8_t> green_mask(std::span<const int> prev) const;
  std::vector<float> bias(std::span<const int> prev) const;

  // Sampling hook: slices the last k tokens from the running context;
  // positions with fewer than k previous tokens get zero bias.
  BiasFn bias_fn() const;
};

struct KgwDetection {
  int64_t green_count = 0;
  int64_t n_scored = 0;
  double p_value = 1.0;
};

// Counts green tokens at positions k..len-1 (each under its own context) and
// returns the exact binomial tail P[B > count], B ~ Bin(len-k, gamma),
// computed by direct pmf summation.
KgwDetection kgw_detect(const KgwScheme& scheme, std::span<const int> text);

}  // namespace wm
