#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wm/corpus.hpp"
#include "wm/graph.hpp"
#include "wm/tensor.hpp"

namespace wm {

struct LMConfig {
  int vocab = Vocab::kSize;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq = 256;
  double dropout = 0.0;  // kept at 0; field exists for config round-trips

  void validate() const;
  bool operator==(const LMConfig&) const = default;
};

// Decoder-only transformer: learned token + position embeddings, pre-norm
// blocks of causal attention and a 4x ReLU MLP, final layer norm, bias-free
// output projection.
struct CausalLM {
  LMConfig config;
  uint64_t init_seed = 0;
  std::vector<std::string> param_names;      // stable order, fixed at init
  std::vector<Graph::Ptr> param_tensors;     // parallel to param_names

  static CausalLM init(const LMConfig& cfg, uint64_t seed);

  Graph::Ptr param(const std::string& name) const;
  const std::vector<Graph::Ptr>& params() const { return param_tensors; }
  std::vector<Graph::Ptr> trainable_params() const;

  void set_trainable(bool on);
  int64_t num_params() const;
  // Bit-level fingerprint of all parameter values, for freeze/restore checks.
  uint64_t checksum() const;

  CausalLM clone() const;
};

// Builds the training-path forward: logits for every position, [B*T x V].
// Causal masking is enforced inside the attention op.
Graph::Ptr forward_logits(Graph& g, const CausalLM& model, const TokenBatch& batch);

// Same forward with recording off; returns a plain value tensor.
Tensor forward_logits_nograd(const CausalLM& model, const TokenBatch& batch);

// Incremental single-sequence decoder with per-layer KV cache. step() feeds
// one token and returns the next-token logits; values are a pure function of
// the fed token sequence, independent of how calls are chunked.
class InferCtx {
 public:
  explicit InferCtx(const CausalLM& model);

  // Consumes one token, returns logits over the vocabulary for the next one.
  const std::vector<float>& step(int token);

  int64_t position() const { return pos_; }
  void reset();

 private:
  struct LayerPtrs {
    const float *ln1_gain, *ln1_bias, *wq, *wk, *wv, *wo, *ln2_gain, *ln2_bias, *w1, *w2;
  };

  const CausalLM* model_;
  int64_t pos_ = 0;
  std::vector<std::vector<float>> kcache_, vcache_;  // per layer [max_seq x C]
  std::vector<float> logits_;
  std::vector<float> x_, scratch_, scratch2_, attn_;
  std::vector<LayerPtrs> layers_;
  const float *wte_ = nullptr, *wpe_ = nullptr, *lnf_gain_ = nullptr, *lnf_bias_ = nullptr, *lm_head_ = nullptr;
};

// Per-context additive logit bias; receives all tokens emitted so far
// (prompt included) and fills a V-length bias vector.
using BiasFn = std::function<void(std::span<const int> context, std::span<float> bias)>;

// Ancestral sampling with an optional logit bias. temperature 0 is argmax
// with lowest-id tie-break. Returns prompt + continuation.
std::vector<int> sample_with_bias(const CausalLM& model, std::span<const int> prompt, int max_new,
                                  double temperature, const BiasFn& bias_fn, uint64_t seed);

// Batch helper: one independent, seed-derived stream per prompt, parallel
// over prompts.
std::vector<std::vector<int>> sample_batch(const CausalLM& model, const std::vector<std::vector<int>>& prompts,
                                           int max_new, double temperature, const BiasFn& bias_fn, uint64_t seed);

// exp(mean next-token cross-entropy) of `ids` under `ref_model`.
double perplexity(const CausalLM& ref_model, std::span<const int> ids);

// Same, but only tokens at positions >= start are scored (their full prefix
// still conditions the model). perplexity(ids) == perplexity_from(ids, 1).
double perplexity_from(const CausalLM& ref_model, std::span<const int> ids, int64_t start);

// Checkpoint directory: manifest.json + params.bin (raw little-endian f32,
// row-major, concatenated in manifest order).
void save_checkpoint(const CausalLM& model, const std::string& dir);
CausalLM load_checkpoint(const std::string& dir);

}  // namespace wm
