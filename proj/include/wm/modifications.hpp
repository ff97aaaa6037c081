#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"
#include "wm/corpus.hpp"
#include "wm/model.hpp"

namespace wm {

// One cell of the user-side modification grid. Exactly one kind's parameters
// are meaningful.
struct ModificationSpec {
  enum class Kind { merge, quantize, prune, finetune };
  Kind kind = Kind::merge;
  double merge_t = 0.5;       // merge
  int bits = 8;               // quantize
  double sparsity = 0.2;      // prune
  int64_t finetune_steps = 300;  // finetune
  double finetune_lr = 1e-4;
  Split finetune_split = Split::heldout;
  uint64_t seed = 0;

  std::string label() const;
  nlohmann::json to_json() const;
  static ModificationSpec from_json(const nlohmann::json& j);
};

// Per-parameter-tensor spherical interpolation between two identically
// shaped models; the angle comes from the flattened tensors and angles below
// 1e-6 fall back to linear interpolation.
CausalLM slerp_merge(const CausalLM& a, const CausalLM& b, double t);

// Per-tensor symmetric round-to-nearest quantization; all-zero tensors pass
// through unchanged.
CausalLM quantize_rtn(const CausalLM& model, int bits);

// Zeroes the rho fraction of smallest-magnitude entries across all 2-D
// weight matrices with a single global threshold; embeddings (wte, wpe) and
// 1-D tensors (layer-norm gains/biases) are exempt.
CausalLM prune_magnitude(const CausalLM& model, double rho);

// Cross-entropy fine-tuning on a raw-text split, deterministic per seed.
CausalLM finetune_raw(const CausalLM& model, const Corpus& corpus, Split split, int64_t steps, double lr,
                      uint64_t seed);

// Dispatch on the spec; never mutates the input model.
CausalLM apply_modification(const CausalLM& model, const CausalLM& merge_partner, const Corpus& corpus,
                            const ModificationSpec& spec);

}  // namespace wm
