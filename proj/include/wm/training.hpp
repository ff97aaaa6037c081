#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wm/corpus.hpp"
#include "wm/kgw.hpp"
#include "wm/kth.hpp"
#include "wm/model.hpp"
#include "wm/optim.hpp"
#include "wm/policy.hpp"

namespace wm {

struct TrainConfig {
  double lambda1 = 1.0;  // weight of the non-vanishing term inside the norm loss
  double lambda2 = 1.0;  // weight of the norm loss inside the mapper objective
  double alpha = 0.1;    // perturbation step size
  double beta = 5.0;     // perturbation-gap regularization weight
  double delta = 1.0;    // watermark strength
  double epsilon = 0.2;  // target minimum watermark-logit magnitude
  int n = 1;             // gram length
  int64_t steps = 2000;
  int batch = 8;
  int64_t seq_len = 128;
  double max_lr = 3e-4;  // shared by student and mapper, cosine decay
  double warmup_frac = 0.1;
  double grad_clip = 1.0;
  uint64_t seed = 1;
  int64_t anti_refresh = 10;  // regenerate the anti batch every K steps
  int anti_batch = 8;
  int64_t anti_len = 64;  // anti-sample length (defaults to seq_len / 2)
  int anti_prompt_len = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct StepRecord {
  int64_t step = 0;
  double l_sim = 0.0;
  double l_norm = 0.0;
  double l_mapper = 0.0;
  double l_anti_pre = 0.0;
  double l_anti_post = 0.0;  // after the temporary normalized step
  double grad_norm = 0.0;
  double mapper_grad_norm = 0.0;
  double lr = 0.0;
  bool perturbation_skipped = false;

  double vulnerability_gap() const { return l_anti_pre - l_anti_post; }
  nlohmann::json to_json() const;
};

struct TrainLog {
  std::vector<StepRecord> records;
  void write_jsonl(const std::string& path) const;
};

// Linear warmup over the first warmup_frac of steps, then cosine decay.
double lr_scale(int64_t step, int64_t total_steps, double warmup_frac);

// KL( softmax(teacher + sign*delta*M(E(prefix))) || softmax(student) ),
// averaged over all scorable positions n..L-1 of every sequence. Gradients
// flow only to the sides enabled by student_grad / mapper_grad; the teacher
// is always a constant. raw_mapper_out, when given, receives the [P x V]
// pre-delta mapper output node (the norm-loss input).
Graph::Ptr watermarked_kl(Graph& g, const CausalLM& teacher, const WatermarkPolicy& policy,
                          const CausalLM& student, const TokenBatch& batch, double sign, bool student_grad,
                          bool mapper_grad, Graph::Ptr* raw_mapper_out = nullptr);

// Value-only conveniences.
double sim_loss(const CausalLM& teacher, const WatermarkPolicy& policy, const CausalLM& student,
                const TokenBatch& batch);
double anti_loss(const CausalLM& teacher, const WatermarkPolicy& policy, const CausalLM& student,
                 const TokenBatch& batch);

// L_M = sim + lambda2 * norm.
Graph::Ptr mapping_objective(Graph& g, Graph::Ptr sim, Graph::Ptr norm, double lambda2);

// Samples anti-watermarked sequences from the teacher: bias -delta*M(E(.)),
// temperature 1. Each row is prompt + continuation of total length `len`.
TokenBatch gen_anti_batch(const CausalLM& teacher, const WatermarkPolicy& policy,
                          const std::vector<std::vector<int>>& prompts, int64_t len, uint64_t seed);

// One student update of the perturbation-aware objective: gradient =
// grad L_sim + beta * (grad L_anti(theta) - grad L_anti(theta - alpha*g^)),
// with the perturbed evaluation done under a temporary, exactly restored
// parameter shift. beta = 0 reduces to a plain L_sim step. A forgetting
// gradient with norm < 1e-12 skips the perturbation term for the step.
StepRecord fpl_step(CausalLM& student, const CausalLM& teacher, const WatermarkPolicy& policy,
                    const TokenBatch& wm_batch, const TokenBatch& anti_batch, const TrainConfig& cfg,
                    AdamWState& student_opt, double lr_scale_value);

// The alternating loop: per step, the student updates via fpl_step on a fresh
// corpus batch, then the mapper updates via L_M evaluated at the new student.
// The anti batch refreshes from the frozen teacher every cfg.anti_refresh
// steps. Aborts with a diagnostic dump on a non-finite loss.
TrainLog train_cawp(const CausalLM& teacher, CausalLM& student, WatermarkPolicy& policy, const Corpus& corpus,
                    const TrainConfig& cfg);

// ------------------------------------------------------------ pretraining

struct CeTrainConfig {
  int64_t max_steps = 3000;
  int batch = 4;
  int64_t seq_len = 256;
  double max_lr = 1e-3;
  double warmup_frac = 0.1;
  double grad_clip = 1.0;
  uint64_t seed = 7;
  Split split = Split::train;
  // Plateau stop: check val loss every val_every steps, stop after
  // `patience` checks without min_rel_improve relative improvement.
  int64_t val_every = 0;  // 0 disables early stopping
  int patience = 3;
  double min_rel_improve = 0.005;
  bool cosine = true;
};

struct CeTrainResult {
  std::vector<double> losses;
  std::vector<std::pair<int64_t, double>> val_losses;
  int64_t steps_run = 0;
};

// Next-token cross-entropy training; used for teacher pretraining, sampling
// distillation, and the fine-tuning harness.
CeTrainResult train_cross_entropy(CausalLM& model, const Corpus& corpus, const CeTrainConfig& cfg);

// ------------------------------------------------------------ distillation

// Cross-entropy fine-tuning on watermarked samples (the texts are joined
// with EOS into one stream and windowed). lr = 0 runs the passes but applies
// no update.
CeTrainResult distill_sampling(CausalLM& student, const std::vector<std::vector<int>>& wm_texts,
                               const CeTrainConfig& cfg);

// Decoding-watermark target distribution f_w applied to the teacher's
// next-token logits.
class DecodingWatermarker {
 public:
  virtual ~DecodingWatermarker() = default;
  virtual int min_context() const = 0;
  // row: the window tokens; p: 0-based index of the predicted token;
  // teacher_logits: the teacher row for that prediction.
  virtual void target_logits(std::span<const int> row, int64_t p, int64_t seq_index,
                             std::span<const float> teacher_logits, std::span<float> out) const = 0;
};

class IdentityWatermarker final : public DecodingWatermarker {
 public:
  int min_context() const override { return 0; }
  void target_logits(std::span<const int>, int64_t, int64_t, std::span<const float> teacher_logits,
                     std::span<float> out) const override {
    std::copy(teacher_logits.begin(), teacher_logits.end(), out.begin());
  }
};

class KgwWatermarker final : public DecodingWatermarker {
 public:
  explicit KgwWatermarker(KgwScheme scheme) : scheme_(std::move(scheme)) {}
  int min_context() const override { return scheme_.context_width; }
  void target_logits(std::span<const int> row, int64_t p, int64_t seq_index,
                     std::span<const float> teacher_logits, std::span<float> out) const override;

 private:
  KgwScheme scheme_;
};

class KthWatermarker final : public DecodingWatermarker {
 public:
  explicit KthWatermarker(KthScheme scheme) : scheme_(std::move(scheme)) {}
  int min_context() const override { return 0; }
  void target_logits(std::span<const int> row, int64_t p, int64_t seq_index,
                     std::span<const float> teacher_logits, std::span<float> out) const override;

 private:
  KthScheme scheme_;
};

// KL distillation of f_w(teacher logits) on raw-corpus prefixes.
CeTrainResult distill_logit(CausalLM& student, const CausalLM& teacher, const DecodingWatermarker& wmk,
                            const Corpus& corpus, const CeTrainConfig& cfg);

}  // namespace wm
