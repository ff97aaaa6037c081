#include "wm/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "wm/rng.hpp"

namespace wm {

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["run_id"] = run_id;
  j["config_hash"] = config_hash;
  j["watermark_kind"] = watermark_kind;
  if (modification) j["modification"] = modification->to_json();
  j["metrics"]["auc"] = auc;
  for (const auto& [fpr, tpr] : tpr_at) j["metrics"]["tpr_at"][std::to_string(fpr)] = tpr;
  j["metrics"]["ppl_median_wm"] = ppl_median_wm;
  j["metrics"]["ppl_median_null"] = ppl_median_null;
  j["metrics"]["score_mean_wm"] = score_mean_wm;
  j["metrics"]["score_mean_null"] = score_mean_null;
  if (green_ratio_wm) j["metrics"]["green_ratio_wm"] = *green_ratio_wm;
  if (green_ratio_null) j["metrics"]["green_ratio_null"] = *green_ratio_null;
  j["n_wm"] = n_wm;
  j["n_null"] = n_null;
  j["seed"] = seed;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.run_id = j.at("run_id").get<std::string>();
  r.config_hash = j.value("config_hash", "");
  r.watermark_kind = j.at("watermark_kind").get<std::string>();
  if (j.contains("modification")) r.modification = ModificationSpec::from_json(j["modification"]);
  const auto& m = j.at("metrics");
  r.auc = m.at("auc").get<double>();
  if (m.contains("tpr_at"))
    for (const auto& [k, v] : m["tpr_at"].items()) r.tpr_at[std::stod(k)] = v.get<double>();
  r.ppl_median_wm = m.value("ppl_median_wm", 0.0);
  r.ppl_median_null = m.value("ppl_median_null", 0.0);
  r.score_mean_wm = m.value("score_mean_wm", 0.0);
  r.score_mean_null = m.value("score_mean_null", 0.0);
  if (m.contains("green_ratio_wm")) r.green_ratio_wm = m["green_ratio_wm"].get<double>();
  if (m.contains("green_ratio_null")) r.green_ratio_null = m["green_ratio_null"].get<double>();
  r.n_wm = j.value("n_wm", 0);
  r.n_null = j.value("n_null", 0);
  r.seed = j.value("seed", 0ULL);
  return r;
}

std::string EvalReport::csv_header() {
  return "run_id,detector,modification,auc,tpr_at_0.001,tpr_at_0.01,tpr_at_0.05,tpr_at_0.10,"
         "ppl_median_wm,ppl_median_null,score_mean_wm,score_mean_null,green_ratio_wm,green_ratio_null,"
         "n_wm,n_null,seed";
}

std::string EvalReport::csv_row() const {
  std::ostringstream s;
  s << run_id << ',' << watermark_kind << ',' << (modification ? modification->label() : "none") << ',' << auc;
  for (double f : {0.001, 0.01, 0.05, 0.10}) {
    s << ',';
    auto it = tpr_at.find(f);
    if (it != tpr_at.end()) s << it->second;
  }
  s << ',' << ppl_median_wm << ',' << ppl_median_null << ',' << score_mean_wm << ',' << score_mean_null << ',';
  if (green_ratio_wm) s << *green_ratio_wm;
  s << ',';
  if (green_ratio_null) s << *green_ratio_null;
  s << ',' << n_wm << ',' << n_null << ',' << seed;
  return s.str();
}

std::vector<std::vector<int>> generate_texts(const CausalLM& model, const Corpus& corpus, Split split,
                                             GenBias bias, const WatermarkPolicy* policy, const KgwScheme* kgw,
                                             int n, int prompt_len, int gen_len, double temperature,
                                             uint64_t seed) {
  const auto prompts = corpus.sample_prompts(split, n, prompt_len, mix_seed(seed, 21));
  BiasFn fn;
  switch (bias) {
    case GenBias::none: break;
    case GenBias::pro:
      if (!policy) throw std::invalid_argument("generate_texts: pro bias requires a policy");
      fn = policy->bias_fn(+1.0);
      break;
    case GenBias::anti:
      if (!policy) throw std::invalid_argument("generate_texts: anti bias requires a policy");
      fn = policy->bias_fn(-1.0);
      break;
    case GenBias::kgw:
      if (!kgw) throw std::invalid_argument("generate_texts: kgw bias requires a scheme");
      fn = kgw->bias_fn();
      break;
  }
  return sample_batch(model, prompts, gen_len, temperature, fn, mix_seed(seed, 23));
}

std::vector<double> score_texts(const std::string& detector, const WatermarkPolicy* policy,
                                const KgwScheme* kgw, const KthScheme* kth,
                                const std::vector<std::vector<int>>& texts, int prompt_len) {
  std::vector<double> scores(texts.size());
  const int64_t n = static_cast<int64_t>(texts.size());
  if (detector == "pro") {
    if (!policy) throw std::invalid_argument("score_texts: pro detector requires a policy");
#pragma omp parallel for schedule(dynamic)
    for (int64_t i = 0; i < n; ++i) {
      std::span<const int> cont(texts[static_cast<size_t>(i)].data() + prompt_len,
                                texts[static_cast<size_t>(i)].size() - static_cast<size_t>(prompt_len));
      scores[static_cast<size_t>(i)] = detect_z(*policy, cont).z;
    }
  } else if (detector == "kgw") {
    if (!kgw) throw std::invalid_argument("score_texts: kgw detector requires a scheme");
#pragma omp parallel for schedule(dynamic)
    for (int64_t i = 0; i < n; ++i) {
      std::span<const int> cont(texts[static_cast<size_t>(i)].data() + prompt_len,
                                texts[static_cast<size_t>(i)].size() - static_cast<size_t>(prompt_len));
      scores[static_cast<size_t>(i)] = -kgw_detect(*kgw, cont).p_value;
    }
  } else if (detector == "kth") {
    if (!kth) throw std::invalid_argument("score_texts: kth detector requires a scheme");
#pragma omp parallel for schedule(dynamic)
    for (int64_t i = 0; i < n; ++i) {
      std::span<const int> cont(texts[static_cast<size_t>(i)].data() + prompt_len,
                                texts[static_cast<size_t>(i)].size() - static_cast<size_t>(prompt_len));
      scores[static_cast<size_t>(i)] = -kth_alignment_cost(*kth, cont);
    }
  } else {
    throw std::invalid_argument("score_texts: unknown detector " + detector);
  }
  return scores;
}

std::vector<double> ppl_of_texts(const CausalLM& ref, const std::vector<std::vector<int>>& texts,
                                 int prompt_len) {
  std::vector<double> out(texts.size());
  const int64_t n = static_cast<int64_t>(texts.size());
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < n; ++i)
    out[static_cast<size_t>(i)] = perplexity_from(ref, texts[static_cast<size_t>(i)], prompt_len);
  return out;
}

EvalReport run_experiment(const EvalSetup& setup) {
  if (!setup.gen_model || !setup.null_model || !setup.ppl_ref || !setup.corpus)
    throw std::invalid_argument("run_experiment: missing model, reference, or corpus");
  const auto wm_texts =
      generate_texts(*setup.gen_model, *setup.corpus, setup.prompt_split, setup.gen_bias, setup.policy,
                     setup.kgw, setup.n_samples, setup.prompt_len, setup.gen_len, setup.temperature,
                     mix_seed(setup.seed, 101));
  const auto null_texts =
      generate_texts(*setup.null_model, *setup.corpus, setup.prompt_split, GenBias::none, nullptr, nullptr,
                     setup.n_samples, setup.prompt_len, setup.gen_len, setup.temperature,
                     mix_seed(setup.seed, 102));

  const auto pos = score_texts(setup.detector, setup.policy, setup.kgw, setup.kth, wm_texts, setup.prompt_len);
  const auto neg = score_texts(setup.detector, setup.policy, setup.kgw, setup.kth, null_texts, setup.prompt_len);

  EvalReport r;
  r.run_id = setup.run_id;
  r.watermark_kind = setup.detector;
  r.modification = setup.modification;
  r.seed = setup.seed;
  r.n_wm = static_cast<int>(pos.size());
  r.n_null = static_cast<int>(neg.size());
  r.auc = roc_auc(pos, neg);
  for (double f : {0.001, 0.01, 0.05, 0.10}) r.tpr_at[f] = tpr_at_fpr(pos, neg, f);
  double sp = 0, sn = 0;
  for (double v : pos) sp += v;
  for (double v : neg) sn += v;
  r.score_mean_wm = sp / static_cast<double>(pos.size());
  r.score_mean_null = sn / static_cast<double>(neg.size());
  r.ppl_median_wm = median(ppl_of_texts(*setup.ppl_ref, wm_texts, setup.prompt_len));
  r.ppl_median_null = median(ppl_of_texts(*setup.ppl_ref, null_texts, setup.prompt_len));
  if (setup.kgw) {
    auto strip = [&](const std::vector<std::vector<int>>& ts) {
      std::vector<std::vector<int>> out;
      out.reserve(ts.size());
      for (const auto& t : ts) out.emplace_back(t.begin() + setup.prompt_len, t.end());
      return out;
    };
    r.green_ratio_wm = green_ratio(*setup.kgw, strip(wm_texts));
    r.green_ratio_null = green_ratio(*setup.kgw, strip(null_texts));
  }
  nlohmann::json cfg;
  cfg["detector"] = setup.detector;
  cfg["n_samples"] = setup.n_samples;
  cfg["prompt_len"] = setup.prompt_len;
  cfg["gen_len"] = setup.gen_len;
  cfg["temperature"] = setup.temperature;
  cfg["seed"] = setup.seed;
  if (setup.modification) cfg["modification"] = setup.modification->to_json();
  r.config_hash = config_hash_of(cfg);
  return r;
}

void write_report_json(const EvalReport& r, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write report: " + path);
  f << r.to_json().dump(2) << "\n";
}

void write_reports_csv(const std::vector<EvalReport>& rs, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write csv: " + path);
  f << EvalReport::csv_header() << "\n";
  for (const auto& r : rs) f << r.csv_row() << "\n";
}

std::string config_hash_of(const nlohmann::json& j) {
  const std::string s = j.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = counter_hash(h, c);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace wm
