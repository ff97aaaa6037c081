// wm: command-line pipeline for weight-embedded text watermarking.
//
// Exit codes (also shown in --help):
//   0  success
//   2  usage error (unknown flag or subcommand, bad argument syntax)
//   3  malformed or inconsistent config
//   4  missing checkpoint, corpus, or other input artifact
//   5  invalid input data (e.g. a text too short to score)
//   1  any other runtime failure
// Failures emit one machine-readable JSON record on stderr.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "wm/corpus.hpp"
#include "wm/experiment.hpp"
#include "wm/gradcheck.hpp"
#include "wm/io.hpp"
#include "wm/kgw.hpp"
#include "wm/kth.hpp"
#include "wm/metrics.hpp"
#include "wm/model.hpp"
#include "wm/modifications.hpp"
#include "wm/policy.hpp"
#include "wm/rng.hpp"
#include "wm/textgen.hpp"
#include "wm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "wm 1.0.0";

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void emit_error(const std::string& kind, const std::string& what, int code) {
  json j;
  j["error"] = kind;
  j["what"] = what;
  j["code"] = code;
  std::cerr << j.dump() << "\n";
}

// --set a.b.c=value overrides, parsed as JSON when possible, else string
void apply_overrides(json& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + s);
    const std::string path = s.substr(0, eq);
    const std::string raw = s.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (...) {
      value = raw;
    }
    json* node = &cfg;
    size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (key.empty()) throw ConfigError("--set has an empty path segment: " + path);
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      node = &(*node)[key];
      start = dot + 1;
    }
  }
}

json load_config(const std::string& path, const std::vector<std::string>& sets) {
  json cfg = json::object();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw MissingArtifact("config file not found: " + path);
    try {
      f >> cfg;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("malformed config JSON: ") + e.what());
    }
  }
  apply_overrides(cfg, sets);
  return cfg;
}

json load_secret(const json& cfg, const std::string& flag_path) {
  std::string path = flag_path;
  if (path.empty())
    if (const char* env = std::getenv("WM_SECRET_PATH")) path = env;
  if (path.empty()) path = cfg.value("secret_path", "");
  if (path.empty()) throw ConfigError("no secret file: pass --secret, set WM_SECRET_PATH, or config secret_path");
  std::ifstream f(path);
  if (!f) throw MissingArtifact("secret file not found: " + path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("malformed secret JSON: ") + e.what());
  }
  return j;
}

wm::Corpus corpus_from_cfg(const json& cfg) {
  if (!cfg.contains("corpus")) throw ConfigError("config requires a 'corpus' section");
  const auto& c = cfg["corpus"];
  if (c.contains("manifest")) {
    const std::string path = c["manifest"].get<std::string>();
    if (!fs::exists(path)) throw MissingArtifact("corpus manifest not found: " + path);
    return wm::Corpus::load_manifest(path);
  }
  if (c.contains("synth_bytes")) {
    const auto text = wm::synth_text(c["synth_bytes"].get<uint64_t>(), c.value("seed", 0ULL));
    return wm::Corpus::from_bytes(text, c.value("train_frac", 0.8), c.value("val_frac", 0.1), c.value("seed", 0ULL));
  }
  throw ConfigError("corpus section needs 'manifest' or 'synth_bytes'");
}

wm::LMConfig model_cfg_from(const json& cfg) {
  wm::LMConfig m;
  if (cfg.contains("model")) {
    const auto& j = cfg["model"];
    m.vocab = j.value("vocab", m.vocab);
    m.d_model = j.value("d_model", m.d_model);
    m.n_layers = j.value("n_layers", m.n_layers);
    m.n_heads = j.value("n_heads", m.n_heads);
    m.max_seq = j.value("max_seq", m.max_seq);
  }
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  return m;
}

wm::CausalLM load_lm(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw MissingArtifact("checkpoint not found: " + dir);
  return wm::load_checkpoint(dir);
}

wm::WatermarkPolicy load_policy_dir(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw MissingArtifact("policy checkpoint not found: " + dir);
  return wm::load_policy(dir);
}

void write_run_manifest(const std::string& out_dir, const std::string& command, const std::string& config_path,
                        const json& resolved_cfg) {
  wm::io::ensure_dir(out_dir);
  json m;
  m["command"] = command;
  m["config_path"] = config_path;
  m["config"] = resolved_cfg;
  m["build"] = kVersion;
  m["config_hash"] = wm::config_hash_of(resolved_cfg);
  m["out_dir"] = out_dir;
  std::ofstream f(out_dir + "/run_manifest.json");
  f << m.dump(2) << "\n";
}

wm::KgwScheme kgw_from(const json& cfg, const json& secret, int vocab) {
  wm::KgwScheme s;
  s.key = secret.value("kgw_key", 0ULL);
  const auto& k = cfg.value("kgw", json::object());
  s.context_width = k.value("k", 1);
  s.gamma = k.value("gamma", 0.25);
  s.delta = k.value("delta", 2.0);
  s.vocab = vocab;
  s.validate();
  return s;
}

wm::KthScheme kth_from(const json& cfg, const json& secret, int vocab) {
  const auto& k = cfg.value("kth", json::object());
  return wm::KthScheme::init(secret.value("kth_key", 0ULL), k.value("m", 256), k.value("shifts", 1), vocab);
}

std::vector<std::vector<int>> read_texts_file(const std::string& path) {
  if (!fs::exists(path)) throw MissingArtifact("input file not found: " + path);
  std::vector<std::vector<int>> texts;
  std::ifstream f(path, std::ios::binary);
  if (path.size() > 6 && path.substr(path.size() - 6) == ".jsonl") {
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const std::exception& e) {
        throw InputError(std::string("bad JSONL line in ") + path + ": " + e.what());
      }
      texts.push_back(j.at("tokens").get<std::vector<int>>());
    }
  } else {
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (!bytes.empty()) texts.push_back(wm::Vocab::encode(bytes));
  }
  if (texts.empty()) throw InputError("insufficient length: no scorable text in " + path);
  return texts;
}

// ------------------------------------------------------------- subcommands

int cmd_pretrain(const json& cfg, const std::string& config_path, const std::string& out_dir) {
  auto corpus = corpus_from_cfg(cfg);
  auto model = wm::CausalLM::init(model_cfg_from(cfg), cfg.value("pretrain", json::object()).value("seed", 7ULL));
  model.set_trainable(true);

  wm::CeTrainConfig tc;
  const auto& p = cfg.value("pretrain", json::object());
  tc.max_steps = p.value("max_steps", 3000);
  tc.batch = p.value("batch", 4);
  tc.seq_len = p.value("seq_len", 256);
  tc.max_lr = p.value("max_lr", 1e-3);
  tc.grad_clip = p.value("grad_clip", 1.0);
  tc.seed = p.value("seed", 7ULL);
  tc.val_every = p.value("val_every", 200);
  tc.patience = p.value("patience", 3);
  tc.min_rel_improve = p.value("min_rel_improve", 0.005);

  const auto res = wm::train_cross_entropy(model, corpus, tc);
  model.set_trainable(false);
  wm::save_checkpoint(model, out_dir + "/teacher");
  write_run_manifest(out_dir, "pretrain", config_path, cfg);

  json summary;
  summary["steps_run"] = res.steps_run;
  summary["final_loss"] = res.losses.empty() ? 0.0 : res.losses.back();
  if (!res.val_losses.empty()) summary["final_val_loss"] = res.val_losses.back().second;
  wm::io::write_text_file(out_dir + "/pretrain_summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_train_pro(const json& cfg, const std::string& config_path, const std::string& teacher_dir,
                  const std::string& out_dir, const std::string& secret_flag) {
  auto corpus = corpus_from_cfg(cfg);
  auto teacher = load_lm(teacher_dir);
  teacher.set_trainable(false);
  auto student = teacher.clone();
  student.set_trainable(true);

  const auto secret = load_secret(cfg, secret_flag);
  auto tc = wm::TrainConfig::from_json(cfg.value("train", json::object()));

  wm::WatermarkPolicy policy;
  const auto& pj = cfg.value("policy", json::object());
  policy.n = tc.n;
  policy.delta = tc.delta;
  policy.epsilon = tc.epsilon;
  policy.embedder = wm::NGramEmbedder::init(secret.at("xi_seed").get<uint64_t>(), tc.n, pj.value("d_e", 64),
                                            teacher.config.vocab);
  policy.mapper =
      wm::MappingMLP::init(pj.value("d_e", 64), pj.value("d_h", 128), teacher.config.vocab, pj.value("mapper_seed", 11ULL));

  const auto log = wm::train_cawp(teacher, student, policy, corpus, tc);

  student.set_trainable(false);
  wm::save_checkpoint(student, out_dir + "/student");
  wm::save_policy(policy, out_dir + "/policy");
  log.write_jsonl(out_dir + "/trainlog.jsonl");
  write_run_manifest(out_dir, "train-pro", config_path, cfg);
  if (!log.records.empty())
    std::cout << json{{"steps", log.records.size()}, {"final_l_sim", log.records.back().l_sim}}.dump() << "\n";
  return 0;
}

int cmd_distill(const std::string& scheme, const json& cfg, const std::string& config_path,
                const std::string& teacher_dir, const std::string& out_dir, const std::string& secret_flag,
                const std::string& mode) {
  auto corpus = corpus_from_cfg(cfg);
  auto teacher = load_lm(teacher_dir);
  teacher.set_trainable(false);
  auto student = teacher.clone();
  student.set_trainable(true);
  const auto secret = load_secret(cfg, secret_flag);

  wm::CeTrainConfig tc;
  const auto& d = cfg.value("distill", json::object());
  tc.max_steps = d.value("steps", 2000);
  tc.batch = d.value("batch", 8);
  tc.seq_len = d.value("seq_len", 128);
  tc.max_lr = d.value("max_lr", 3e-4);
  tc.seed = d.value("seed", 19ULL);

  if (mode == "logit") {
    if (scheme == "kgw") {
      wm::KgwWatermarker wmk(kgw_from(cfg, secret, teacher.config.vocab));
      wm::distill_logit(student, teacher, wmk, corpus, tc);
    } else {
      wm::KthWatermarker wmk(kth_from(cfg, secret, teacher.config.vocab));
      wm::distill_logit(student, teacher, wmk, corpus, tc);
    }
  } else if (mode == "sampling") {
    const int n_texts = d.value("sample_texts", 256);
    const int text_len = d.value("sample_len", 128);
    const auto prompts = corpus.sample_prompts(wm::Split::train, n_texts, d.value("prompt_len", 20), tc.seed);
    std::vector<std::vector<int>> wm_texts;
    if (scheme == "kgw") {
      const auto s = kgw_from(cfg, secret, teacher.config.vocab);
      wm_texts = wm::sample_batch(teacher, prompts, text_len, 1.0, s.bias_fn(), wm::mix_seed(tc.seed, 3));
    } else {
      const auto s = kth_from(cfg, secret, teacher.config.vocab);
      const auto taus = s.shift_set();
      wm_texts.resize(prompts.size());
      for (size_t i = 0; i < prompts.size(); ++i)
        wm_texts[i] = s.generate(teacher, prompts[i], text_len, taus[i % taus.size()]);
    }
    wm::distill_sampling(student, wm_texts, tc);
  } else {
    throw ConfigError("distill mode must be 'logit' or 'sampling'");
  }

  student.set_trainable(false);
  wm::save_checkpoint(student, out_dir + "/student");
  write_run_manifest(out_dir, "distill-" + scheme, config_path, cfg);
  return 0;
}

int cmd_generate(const json& cfg, const std::string& config_path, const std::string& model_dir,
                 const std::string& out_file, const std::string& bias, const std::string& policy_dir,
                 const std::string& secret_flag) {
  auto corpus = corpus_from_cfg(cfg);
  auto model = load_lm(model_dir);
  const auto& g = cfg.value("generate", json::object());
  const int n = g.value("n", 16);
  const int prompt_len = g.value("prompt_len", 20);
  const int gen_len = g.value("gen_len", 200);
  const double temperature = g.value("temperature", 1.0);
  const uint64_t seed = g.value("seed", 1ULL);

  std::optional<wm::WatermarkPolicy> policy;
  wm::GenBias gb = wm::GenBias::none;
  std::optional<wm::KgwScheme> kgw;
  if (bias == "pro" || bias == "anti") {
    policy = load_policy_dir(policy_dir);
    gb = bias == "pro" ? wm::GenBias::pro : wm::GenBias::anti;
  } else if (bias == "kgw") {
    kgw = kgw_from(cfg, load_secret(cfg, secret_flag), model.config.vocab);
    gb = wm::GenBias::kgw;
  } else if (bias != "none") {
    throw ConfigError("bias must be one of none|pro|anti|kgw");
  }

  const auto texts = wm::generate_texts(model, corpus, wm::Split::val, gb, policy ? &*policy : nullptr,
                                        kgw ? &*kgw : nullptr, n, prompt_len, gen_len, temperature, seed);
  std::ofstream f(out_file);
  if (!f) throw std::runtime_error("cannot write " + out_file);
  for (const auto& t : texts) {
    json j;
    j["tokens"] = t;
    j["prompt_len"] = prompt_len;
    j["text"] = wm::Vocab::decode_lossy(t);
    // the text field is a lossy preview; raw bytes may not be valid UTF-8
    f << j.dump(-1, ' ', false, json::error_handler_t::replace) << "\n";
  }
  const auto dir = fs::path(out_file).parent_path().string();
  write_run_manifest(dir.empty() ? "." : dir, "generate", config_path, cfg);
  return 0;
}

int cmd_detect(const json& cfg, const std::string& detector, const std::string& policy_dir,
               const std::vector<std::string>& inputs, const std::string& out_file,
               const std::string& secret_flag) {
  std::ofstream out;
  std::ostream* os = &std::cout;
  if (!out_file.empty()) {
    out.open(out_file);
    if (!out) throw std::runtime_error("cannot write " + out_file);
    os = &out;
  }

  std::optional<wm::WatermarkPolicy> policy;
  std::optional<wm::KgwScheme> kgw;
  std::optional<wm::KthScheme> kth;
  std::vector<std::vector<int>> kth_refs;
  double threshold = cfg.value("detect", json::object()).value("threshold", 0.0);
  const bool with_decision = cfg.value("detect", json::object()).contains("threshold");
  if (detector == "pro") {
    policy = load_policy_dir(policy_dir);
  } else if (detector == "kgw") {
    kgw = kgw_from(cfg, load_secret(cfg, secret_flag), wm::Vocab::kSize);
  } else if (detector == "kth") {
    kth = kth_from(cfg, load_secret(cfg, secret_flag), wm::Vocab::kSize);
    const std::string ref_path = cfg.value("detect", json::object()).value("kth_reference", "");
    if (ref_path.empty()) throw ConfigError("kth detection needs detect.kth_reference (JSONL of null texts)");
    kth_refs = read_texts_file(ref_path);
  } else {
    throw ConfigError("detector must be one of pro|kgw|kth");
  }

  for (const auto& path : inputs) {
    const auto texts = read_texts_file(path);
    for (size_t i = 0; i < texts.size(); ++i) {
      json rec;
      rec["file"] = path;
      rec["index"] = i;
      try {
        if (policy) {
          const auto r = wm::detect_z(*policy, texts[i], threshold, with_decision);
          rec["z"] = r.z;
          rec["n_scored"] = r.n_scored;
          if (with_decision) {
            rec["threshold"] = r.threshold;
            rec["decision"] = r.decision;
          }
        } else if (kgw) {
          const auto r = wm::kgw_detect(*kgw, texts[i]);
          rec["green_count"] = r.green_count;
          rec["n_scored"] = r.n_scored;
          rec["p_value"] = r.p_value;
        } else {
          const auto r = wm::kth_detect(*kth, texts[i], kth_refs);
          rec["d_min"] = r.d_min;
          rec["p_value"] = r.p_value;
        }
      } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
      }
      (*os) << rec.dump() << "\n";
    }
  }
  return 0;
}

int cmd_modify(const json& cfg, const std::string& config_path, const std::string& model_dir,
               const std::string& partner_dir, const std::string& out_dir) {
  if (!cfg.contains("modification")) throw ConfigError("config requires a 'modification' section");
  const auto spec = wm::ModificationSpec::from_json(cfg["modification"]);
  auto model = load_lm(model_dir);

  wm::CausalLM partner = model;
  if (spec.kind == wm::ModificationSpec::Kind::merge) {
    if (partner_dir.empty()) throw ConfigError("merge modification needs --partner");
    partner = load_lm(partner_dir);
  }
  wm::Corpus corpus;
  if (spec.kind == wm::ModificationSpec::Kind::finetune) corpus = corpus_from_cfg(cfg);

  auto modified = wm::apply_modification(model, partner, corpus, spec);
  wm::save_checkpoint(modified, out_dir + "/model");
  write_run_manifest(out_dir, "modify", config_path, cfg);
  return 0;
}

wm::EvalReport eval_from_cfg(const json& cfg, const std::string& secret_flag, const std::string& run_id) {
  const auto& e = cfg.value("eval", json::object());
  auto corpus = corpus_from_cfg(cfg);
  auto gen_model = load_lm(e.at("gen_model").get<std::string>());
  auto null_model = load_lm(e.at("null_model").get<std::string>());
  auto ppl_ref = e.contains("ppl_ref") ? load_lm(e["ppl_ref"].get<std::string>()) : null_model;

  wm::EvalSetup setup;
  setup.gen_model = &gen_model;
  setup.null_model = &null_model;
  setup.ppl_ref = &ppl_ref;
  setup.corpus = &corpus;
  setup.detector = e.value("detector", "pro");
  setup.n_samples = e.value("n_samples", 200);
  setup.prompt_len = e.value("prompt_len", 20);
  setup.gen_len = e.value("gen_len", 200);
  setup.temperature = e.value("temperature", 1.0);
  setup.seed = e.value("seed", 1ULL);
  setup.run_id = run_id;

  std::optional<wm::WatermarkPolicy> policy;
  std::optional<wm::KgwScheme> kgw;
  std::optional<wm::KthScheme> kth;
  if (setup.detector == "pro") {
    policy = load_policy_dir(e.at("policy").get<std::string>());
    setup.policy = &*policy;
  } else if (setup.detector == "kgw") {
    kgw = kgw_from(cfg, load_secret(cfg, secret_flag), gen_model.config.vocab);
    setup.kgw = &*kgw;
  } else if (setup.detector == "kth") {
    kth = kth_from(cfg, load_secret(cfg, secret_flag), gen_model.config.vocab);
    setup.kth = &*kth;
  } else {
    throw ConfigError("eval.detector must be one of pro|kgw|kth");
  }

  const std::string bias = e.value("gen_bias", "none");
  if (bias == "pro")
    setup.gen_bias = wm::GenBias::pro;
  else if (bias == "anti")
    setup.gen_bias = wm::GenBias::anti;
  else if (bias == "kgw")
    setup.gen_bias = wm::GenBias::kgw;
  else if (bias != "none")
    throw ConfigError("eval.gen_bias must be one of none|pro|anti|kgw");

  std::optional<wm::ModificationSpec> mod;
  wm::CausalLM modified = gen_model;
  if (e.contains("modification")) {
    mod = wm::ModificationSpec::from_json(e["modification"]);
    wm::CausalLM partner = mod->kind == wm::ModificationSpec::Kind::merge
                               ? load_lm(e.at("merge_partner").get<std::string>())
                               : gen_model;
    modified = wm::apply_modification(gen_model, partner, corpus, *mod);
    setup.gen_model = &modified;
    setup.modification = mod;
  }

  return wm::run_experiment(setup);
}

int cmd_eval(const json& cfg, const std::string& config_path, const std::string& out_dir,
             const std::string& secret_flag) {
  const auto report = eval_from_cfg(cfg, secret_flag, cfg.value("eval", json::object()).value("run_id", "eval"));
  wm::io::ensure_dir(out_dir);
  wm::write_report_json(report, out_dir + "/report.json");
  wm::write_reports_csv({report}, out_dir + "/report.csv");
  write_run_manifest(out_dir, "eval", config_path, cfg);
  std::cout << report.to_json()["metrics"].dump() << "\n";
  return 0;
}

int cmd_gradcheck() {
  const auto results = wm::run_gradcheck_suite(1e-6, 1e-4, 42);
  int passed = 0;
  for (const auto& r : results) {
    std::cout << (r.pass ? "pass" : "FAIL") << "  " << r.name << "  max_err=" << r.max_err << "\n";
    passed += r.pass;
  }
  std::cout << passed << "/" << results.size() << " primitives pass\n";
  return passed == static_cast<int>(results.size()) ? 0 : 1;
}

int cmd_sweep(const json& cfg, const std::string& config_path, const std::string& out_dir,
              const std::string& secret_flag) {
  if (!cfg.contains("sweep") || !cfg["sweep"].contains("cells"))
    throw ConfigError("sweep config needs sweep.cells: an array of eval sections");
  std::vector<wm::EvalReport> reports;
  int idx = 0;
  for (const auto& cell : cfg["sweep"]["cells"]) {
    json cell_cfg = cfg;
    cell_cfg["eval"] = cell;
    cell_cfg.erase("sweep");
    const std::string run_id = cell.value("run_id", "cell" + std::to_string(idx));
    auto report = eval_from_cfg(cell_cfg, secret_flag, run_id);
    wm::io::ensure_dir(out_dir + "/" + run_id);
    wm::write_report_json(report, out_dir + "/" + run_id + "/report.json");
    reports.push_back(std::move(report));
    ++idx;
  }
  wm::write_reports_csv(reports, out_dir + "/summary.csv");
  write_run_manifest(out_dir, "sweep", config_path, cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string(kVersion) +
               " — watermark laboratory for weight-embedded text watermarks\n"
               "Exit codes: 0 ok, 2 usage, 3 bad config, 4 missing artifact, 5 bad input, 1 other"};
  app.require_subcommand(1);
  app.fallthrough();  // let global options appear after the subcommand

  std::string config_path, out_dir = "out", secret_flag;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--secret", secret_flag, "secret key file (overrides WM_SECRET_PATH)");
  app.add_option("--set", sets, "config override key.path=value (repeatable)");

  auto* pretrain = app.add_subcommand("pretrain", "train the teacher LM on the corpus train split");
  auto* train_pro = app.add_subcommand("train-pro", "co-train the watermarked student and mapping model");
  std::string teacher_dir;
  train_pro->add_option("--teacher", teacher_dir, "teacher checkpoint directory")->required();
  auto* distill_kgw = app.add_subcommand("distill-kgw", "distill a green-list decoding watermark into the student");
  auto* distill_kth = app.add_subcommand("distill-kth", "distill an exponential-minimum decoding watermark");
  std::string distill_mode = "logit";
  distill_kgw->add_option("--teacher", teacher_dir, "teacher checkpoint directory")->required();
  distill_kgw->add_option("--mode", distill_mode, "logit|sampling");
  distill_kth->add_option("--teacher", teacher_dir, "teacher checkpoint directory")->required();
  distill_kth->add_option("--mode", distill_mode, "logit|sampling");

  auto* generate = app.add_subcommand("generate", "sample continuations to a JSONL file");
  std::string model_dir, out_file = "texts.jsonl", bias = "none", policy_dir;
  generate->add_option("--model", model_dir, "model checkpoint directory")->required();
  generate->add_option("--file", out_file, "output JSONL path");
  generate->add_option("--bias", bias, "none|pro|anti|kgw");
  generate->add_option("--policy", policy_dir, "policy checkpoint (for pro/anti bias)");

  auto* detect = app.add_subcommand("detect", "score texts; one JSON line per input text");
  std::string detector = "pro";
  std::vector<std::string> detect_inputs;
  std::string detect_out;
  detect->add_option("--detector", detector, "pro|kgw|kth");
  detect->add_option("--policy", policy_dir, "policy checkpoint (pro)");
  detect->add_option("--in", detect_inputs, "input text or JSONL files")->required();
  detect->add_option("--file", detect_out, "output path (default stdout)");

  auto* modify = app.add_subcommand("modify", "apply a modification spec to a checkpoint");
  std::string partner_dir;
  modify->add_option("--model", model_dir, "model checkpoint directory")->required();
  modify->add_option("--partner", partner_dir, "merge partner checkpoint");

  auto* eval = app.add_subcommand("eval", "run the generation/detection experiment protocol");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every autodiff primitive");
  auto* sweep = app.add_subcommand("sweep", "run a grid of eval cells");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what(), 2);
    return 2;
  }

  try {
    const json cfg = load_config(config_path, sets);
    if (pretrain->parsed()) return cmd_pretrain(cfg, config_path, out_dir);
    if (train_pro->parsed()) return cmd_train_pro(cfg, config_path, teacher_dir, out_dir, secret_flag);
    if (distill_kgw->parsed())
      return cmd_distill("kgw", cfg, config_path, teacher_dir, out_dir, secret_flag, distill_mode);
    if (distill_kth->parsed())
      return cmd_distill("kth", cfg, config_path, teacher_dir, out_dir, secret_flag, distill_mode);
    if (generate->parsed())
      return cmd_generate(cfg, config_path, model_dir, out_file, bias, policy_dir, secret_flag);
    if (detect->parsed()) return cmd_detect(cfg, detector, policy_dir, detect_inputs, detect_out, secret_flag);
    if (modify->parsed()) return cmd_modify(cfg, config_path, model_dir, partner_dir, out_dir);
    if (eval->parsed()) return cmd_eval(cfg, config_path, out_dir, secret_flag);
    if (gradcheck->parsed()) return cmd_gradcheck();
    if (sweep->parsed()) return cmd_sweep(cfg, config_path, out_dir, secret_flag);
    emit_error("usage", "no subcommand", 2);
    return 2;
  } catch (const ConfigError& e) {
    emit_error("config", e.what(), 3);
    return 3;
  } catch (const MissingArtifact& e) {
    emit_error("missing_artifact", e.what(), 4);
    return 4;
  } catch (const InputError& e) {
    emit_error("input", e.what(), 5);
    return 5;
  } catch (const std::exception& e) {
    emit_error("runtime", e.what(), 1);
    return 1;
  }
}
