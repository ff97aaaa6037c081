#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wm/graph.hpp"
#include "wm/model.hpp"
#include "wm/tensor.hpp"

namespace wm {

// Frozen n-gram embedder: a pseudo-random per-token table generated from the
// secret seed, mean-pooled over the n context tokens. Never receives
// gradients; identical (seed, n-gram) pairs embed bit-identically.
struct NGramEmbedder {
  uint64_t xi_seed = 0;
  int n = 1;
  int d_e = 64;
  int vocab = Vocab::kSize;
  Tensor table;  // [vocab x d_e]

  static NGramEmbedder init(uint64_t xi_seed, int n, int d_e, int vocab);

  // Mean of the n token rows; `ngram` must hold exactly n ids.
  std::vector<float> embed(std::span<const int> ngram) const;

  // contexts is `count` consecutive n-grams; returns [count x d_e].
  Tensor embed_batch(std::span<const int> contexts, int64_t count) const;

  uint64_t table_checksum() const;
};

// Trainable watermark mapping model: linear d_e -> d_h, two residual blocks
// x + W2 relu(W1 x + b1) + b2, final linear d_h -> V, tanh. Outputs lie in
// (-1, 1) elementwise.
struct MappingMLP {
  int d_e = 64;
  int d_h = 128;
  int vocab = Vocab::kSize;
  uint64_t init_seed = 0;
  std::vector<std::string> param_names;
  std::vector<Graph::Ptr> param_tensors;

  static MappingMLP init(int d_e, int d_h, int vocab, uint64_t seed);

  Graph::Ptr param(const std::string& name) const;
  const std::vector<Graph::Ptr>& params() const { return param_tensors; }
  void set_trainable(bool on);

  // features: [N x d_e] -> raw watermark logits [N x V] in (-1, 1).
  Graph::Ptr forward(Graph& g, Graph::Ptr features) const;
  Tensor forward_nograd(Tensor features) const;

  uint64_t checksum() const;
  MappingMLP clone() const;
};

struct WatermarkPolicy {
  NGramEmbedder embedder;
  MappingMLP mapper;
  double delta = 1.0;
  int n = 1;
  double epsilon = 0.2;

  // delta * mapper(embedder(context)), values in (-delta, delta).
  std::vector<float> watermark_logits(std::span<const int> context) const;

  // Additive-bias hook for sampling: sign=+1 watermarks, sign=-1 generates
  // anti-watermarked text. Contexts shorter than n get zero bias. The
  // returned closure references this policy; the policy must outlive it.
  BiasFn bias_fn(double sign) const;
};

struct DetectionResult {
  double z = 0.0;
  std::vector<double> per_position_logits;
  int64_t n_scored = 0;
  double threshold = 0.0;
  bool decision = false;
};

// Scores positions n..len-1: the raw mapper output (delta excluded) at each
// realized token given its n-gram prefix; z is the mean. Texts of length
// <= n are rejected, never given a default score.
DetectionResult detect_z(const WatermarkPolicy& policy, std::span<const int> text, double threshold = 0.0,
                         bool with_decision = false);

std::vector<double> detect_z_batch(const WatermarkPolicy& policy, const std::vector<std::vector<int>>& texts);

// Empirical (1 - target_fpr) quantile of null z-scores, higher-rank
// interpolation. Requires >= 100 null texts.
double calibrate_threshold(const WatermarkPolicy& policy, const std::vector<std::vector<int>>& null_texts,
                           double target_fpr);

// Same quantile rule over precomputed scores (shared with tpr_at_fpr).
double upper_quantile(std::vector<double> scores, double q);

void save_policy(const WatermarkPolicy& policy, const std::string& dir);
WatermarkPolicy load_policy(const std::string& dir);

}  // namespace wm
