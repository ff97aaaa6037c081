#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wm/kgw.hpp"
#include "wm/kth.hpp"
#include "wm/metrics.hpp"
#include "wm/modifications.hpp"
#include "wm/policy.hpp"

namespace wm {

struct EvalReport {
  std::string run_id;
  std::string config_hash;
  std::string watermark_kind;  // detector: pro | kgw | kth
  std::optional<ModificationSpec> modification;
  double auc = 0.0;
  std::map<double, double> tpr_at;  // fpr -> tpr for {0.001, 0.01, 0.05, 0.10}
  double ppl_median_wm = 0.0;
  double ppl_median_null = 0.0;
  double score_mean_wm = 0.0;   // detector score: z (pro), -p (kgw), -d_min (kth)
  double score_mean_null = 0.0;
  std::optional<double> green_ratio_wm;
  std::optional<double> green_ratio_null;
  int n_wm = 0;
  int n_null = 0;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  static std::string csv_header();
  std::string csv_row() const;
};

// Which bias, if any, is added to the generator's logits during sampling.
enum class GenBias { none, pro, anti, kgw };

struct EvalSetup {
  const CausalLM* gen_model = nullptr;   // produces the "watermarked" class
  const CausalLM* null_model = nullptr;  // unwatermarked reference generator
  const CausalLM* ppl_ref = nullptr;     // frozen perplexity reference
  const WatermarkPolicy* policy = nullptr;
  const KgwScheme* kgw = nullptr;
  const KthScheme* kth = nullptr;
  std::string detector = "pro";  // pro | kgw | kth
  GenBias gen_bias = GenBias::none;
  const Corpus* corpus = nullptr;
  Split prompt_split = Split::val;
  int n_samples = 200;
  int prompt_len = 20;
  int gen_len = 200;
  double temperature = 1.0;
  uint64_t seed = 0;
  std::string run_id = "run";
  std::optional<ModificationSpec> modification;  // applied upstream; recorded here
};

// Temperature-1 continuations from `prompt_split` prefixes; returns full
// prompt+continuation sequences.
std::vector<std::vector<int>> generate_texts(const CausalLM& model, const Corpus& corpus, Split split,
                                             GenBias bias, const WatermarkPolicy* policy, const KgwScheme* kgw,
                                             int n, int prompt_len, int gen_len, double temperature,
                                             uint64_t seed);

// Detector scores on the continuation part of each text (prompt excluded).
std::vector<double> score_texts(const std::string& detector, const WatermarkPolicy* policy,
                                const KgwScheme* kgw, const KthScheme* kth,
                                const std::vector<std::vector<int>>& texts, int prompt_len);

std::vector<double> ppl_of_texts(const CausalLM& ref, const std::vector<std::vector<int>>& texts,
                                 int prompt_len);

// Full protocol: generate both classes, score, compute metrics, assemble the
// report. Pure function of the setup (all seeds derived from setup.seed).
EvalReport run_experiment(const EvalSetup& setup);

void write_report_json(const EvalReport& r, const std::string& path);
void write_reports_csv(const std::vector<EvalReport>& rs, const std::string& path);

std::string config_hash_of(const nlohmann::json& j);

}  // namespace wm
