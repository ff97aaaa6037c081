#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "wm/model.hpp"

namespace wm {

// Exponential-minimum decoding watermark: generation is a deterministic
// argmax of key/probability ratios over a length-m sequence of uniform key
// vectors; detection ranks a cumulative alignment cost against a reference
// set of unwatermarked texts.
struct KthScheme {
  uint64_t key_seed = 0;
  int m = 256;     // key sequence length
  int shifts = 1;  // s in [1, m]
  int vocab = Vocab::kSize;
  std::vector<std::vector<float>> xi;  // m vectors in [0,1]^V

  static KthScheme init(uint64_t key_seed, int m, int shifts, int vocab);

  // Evenly spaced shift offsets {i * floor(m/s) : 0 <= i < s}.
  std::vector<int> shift_set() const;

  // argmax_i xi^{((position-1+tau) mod m)}_i / p_i, 1-based position; ties
  // break to the lowest id; entries with p_i < 1e-12 are excluded.
  int select_token(std::span<const double> p, int64_t position, int tau) const;

  // Deterministic generation: prompt + max_new tokens chosen by select_token
  // on the model's temperature-1 distribution. tau picks the key shift.
  std::vector<int> generate(const CausalLM& model, std::span<const int> prompt, int max_new, int tau) const;
};

struct KthDetection {
  double d_min = 0.0;
  double p_value = 1.0;
};

// Alignment cost d = sum_t log(1 - xi^{(t)}_{x_t}) minimized over all m
// cyclic key offsets; p-value is the rank of the observed d_min within the
// same statistic on the reference texts: (1 + #{refs <= observed}) / (T+1).
double kth_alignment_cost(const KthScheme& scheme, std::span<const int> text);
KthDetection kth_detect(const KthScheme& scheme, std::span<const int> text,
                        const std::vector<std::vector<int>>& reference_null);

}  // namespace wm
