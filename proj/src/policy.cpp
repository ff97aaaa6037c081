#include "wm/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "wm/io.hpp"
#include "wm/rng.hpp"

namespace wm {

NGramEmbedder NGramEmbedder::init(uint64_t xi_seed, int n, int d_e, int vocab) {
  if (n < 1) throw std::invalid_argument("NGramEmbedder: n must be >= 1");
  NGramEmbedder e;
  e.xi_seed = xi_seed;
  e.n = n;
  e.d_e = d_e;
  e.vocab = vocab;
  e.table = Tensor({vocab, d_e});
  SplitMix64 rng(mix_seed(xi_seed, 0x656d6264ULL));
  rng.fill_normal<float>(e.table.data, 0.0, 1.0);
  return e;
}

std::vector<float> NGramEmbedder::embed(std::span<const int> ngram) const {
  if (static_cast<int>(ngram.size()) != n)
    throw std::invalid_argument("embed_ngram: expected exactly " + std::to_string(n) + " tokens");
  std::vector<float> out(static_cast<size_t>(d_e), 0.f);
  const float inv = 1.f / static_cast<float>(n);
  for (int tok : ngram) {
    if (tok < 0 || tok >= vocab) throw std::invalid_argument("embed_ngram: token id out of vocabulary");
    const float* row = table.data.data() + static_cast<int64_t>(tok) * d_e;
    for (int j = 0; j < d_e; ++j) out[static_cast<size_t>(j)] += row[j] * inv;
  }
  return out;
}

Tensor NGramEmbedder::embed_batch(std::span<const int> contexts, int64_t count) const {
  if (static_cast<int64_t>(contexts.size()) != count * n)
    throw std::invalid_argument("embed_batch: context buffer size mismatch");
  Tensor out({count, d_e});
  const float inv = 1.f / static_cast<float>(n);
  for (int64_t i = 0; i < count; ++i) {
    float* dst = out.data.data() + i * d_e;
    for (int g = 0; g < n; ++g) {
      const int tok = contexts[static_cast<size_t>(i * n + g)];
      if (tok < 0 || tok >= vocab) throw std::invalid_argument("embed_batch: token id out of vocabulary");
      const float* row = table.data.data() + static_cast<int64_t>(tok) * d_e;
      for (int j = 0; j < d_e; ++j) dst[j] += row[j] * inv;
    }
  }
  return out;
}

uint64_t NGramEmbedder::table_checksum() const {
  uint64_t h = 0x78695f77ULL;
  for (float v : table.data) {
    uint32_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    h = counter_hash(h, bits);
  }
  return h;
}

MappingMLP MappingMLP::init(int d_e, int d_h, int vocab, uint64_t seed) {
  MappingMLP m;
  m.d_e = d_e;
  m.d_h = d_h;
  m.vocab = vocab;
  m.init_seed = seed;
  SplitMix64 rng(mix_seed(seed, 0x6d6c70ULL));
  auto add = [&](const std::string& name, std::vector<int64_t> shape, double stddev) {
    auto p = Graph::param(std::move(shape));
    if (stddev > 0) rng.fill_normal<float>(p->data, 0.0, stddev);
    m.param_names.push_back(name);
    m.param_tensors.push_back(std::move(p));
  };
  add("in.w", {d_e, d_h}, 0.05);
  add("in.b", {d_h}, 0.0);
  for (int r = 0; r < 2; ++r) {
    const std::string p = "res" + std::to_string(r) + ".";
    add(p + "w1", {d_h, d_h}, 0.05);
    add(p + "b1", {d_h}, 0.0);
    add(p + "w2", {d_h, d_h}, 0.05);
    add(p + "b2", {d_h}, 0.0);
  }
  add("out.w", {d_h, vocab}, 0.05);
  add("out.b", {vocab}, 0.0);
  return m;
}

Graph::Ptr MappingMLP::param(const std::string& name) const {
  for (size_t i = 0; i < param_names.size(); ++i)
    if (param_names[i] == name) return param_tensors[i];
  throw std::invalid_argument("no such mapper parameter: " + name);
}

void MappingMLP::set_trainable(bool on) {
  for (auto& p : param_tensors) p->set_requires_grad(on);
}

Graph::Ptr MappingMLP::forward(Graph& g, Graph::Ptr features) const {
  auto x = g.add_rowwise(g.matmul(std::move(features), param("in.w")), param("in.b"));
  for (int r = 0; r < 2; ++r) {
    const std::string p = "res" + std::to_string(r) + ".";
    auto h = g.relu(g.add_rowwise(g.matmul(x, param(p + "w1")), param(p + "b1")));
    x = g.add(x, g.add_rowwise(g.matmul(h, param(p + "w2")), param(p + "b2")));
  }
  return g.tanh(g.add_rowwise(g.matmul(x, param("out.w")), param("out.b")));
}

Tensor MappingMLP::forward_nograd(Tensor features) const {
  Graph g;
  g.set_recording(false);
  auto out = forward(g, Graph::leaf(std::move(features)));
  return std::move(*out);
}

uint64_t MappingMLP::checksum() const {
  uint64_t h = 0x6d6170ULL;
  for (const auto& p : param_tensors)
    for (float v : p->data) {
      uint32_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h = counter_hash(h, bits);
    }
  return h;
}

MappingMLP MappingMLP::clone() const {
  MappingMLP m;
  m.d_e = d_e;
  m.d_h = d_h;
  m.vocab = vocab;
  m.init_seed = init_seed;
  m.param_names = param_names;
  for (const auto& p : param_tensors) m.param_tensors.push_back(std::make_shared<Tensor>(*p));
  return m;
}

std::vector<float> WatermarkPolicy::watermark_logits(std::span<const int> context) const {
  if (static_cast<int>(context.size()) < n)
    throw std::invalid_argument("watermark_logits: context shorter than gram length");
  auto feat = embedder.embed_batch(context.subspan(context.size() - static_cast<size_t>(n)), 1);
  Tensor raw = mapper.forward_nograd(std::move(feat));
  std::vector<float> out(raw.data.begin(), raw.data.end());
  for (auto& v : out) v *= static_cast<float>(delta);
  return out;
}

BiasFn WatermarkPolicy::bias_fn(double sign) const {
  const double scaled = sign * delta;
  return [this, scaled](std::span<const int> context, std::span<float> bias) {
    if (static_cast<int>(context.size()) < n) return;
    auto feat = embedder.embed_batch(context.subspan(context.size() - static_cast<size_t>(n)), 1);
    Tensor raw = mapper.forward_nograd(std::move(feat));
    for (size_t i = 0; i < bias.size(); ++i) bias[i] = static_cast<float>(scaled) * raw.data[i];
  };
}

DetectionResult detect_z(const WatermarkPolicy& policy, std::span<const int> text, double threshold,
                         bool with_decision) {
  const int n = policy.n;
  const int64_t len = static_cast<int64_t>(text.size());
  if (len <= n) throw std::invalid_argument("detect_z: insufficient length (need more than n tokens)");
  const int64_t scored = len - n;
  std::vector<int> contexts(static_cast<size_t>(scored * n));
  for (int64_t i = 0; i < scored; ++i)
    for (int g = 0; g < n; ++g) contexts[static_cast<size_t>(i * n + g)] = text[static_cast<size_t>(i + g)];
  Tensor feats = policy.embedder.embed_batch(contexts, scored);
  Tensor raw = policy.mapper.forward_nograd(std::move(feats));

  DetectionResult r;
  r.n_scored = scored;
  r.per_position_logits.resize(static_cast<size_t>(scored));
  double sum = 0.0;
  for (int64_t i = 0; i < scored; ++i) {
    const int realized = text[static_cast<size_t>(i + n)];
    const double v = static_cast<double>(raw.at(i, realized));
    r.per_position_logits[static_cast<size_t>(i)] = v;
    sum += v;
  }
  r.z = sum / static_cast<double>(scored);
  r.threshold = threshold;
  r.decision = with_decision && r.z > threshold;
  return r;
}

std::vector<double> detect_z_batch(const WatermarkPolicy& policy, const std::vector<std::vector<int>>& texts) {
  std::vector<double> out(texts.size());
  const int64_t n = static_cast<int64_t>(texts.size());
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = detect_z(policy, texts[static_cast<size_t>(i)]).z;
  return out;
}

double upper_quantile(std::vector<double> scores, double q) {
  if (scores.empty()) throw std::invalid_argument("upper_quantile: empty scores");
  std::sort(scores.begin(), scores.end());
  const auto n = static_cast<double>(scores.size());
  auto idx = static_cast<size_t>(std::ceil(q * (n - 1.0)));
  idx = std::min(idx, scores.size() - 1);
  return scores[idx];
}

double calibrate_threshold(const WatermarkPolicy& policy, const std::vector<std::vector<int>>& null_texts,
                           double target_fpr) {
  if (null_texts.size() < 100) throw std::invalid_argument("calibrate_threshold: need at least 100 null texts");
  if (!(target_fpr > 0.0 && target_fpr < 1.0))
    throw std::invalid_argument("calibrate_threshold: target_fpr must be in (0, 1)");
  return upper_quantile(detect_z_batch(policy, null_texts), 1.0 - target_fpr);
}

void save_policy(const WatermarkPolicy& policy, const std::string& dir) {
  nlohmann::json extra;
  extra["kind"] = "policy";
  extra["seed"] = policy.mapper.init_seed;
  extra["xi_seed"] = policy.embedder.xi_seed;
  extra["n"] = policy.n;
  extra["delta"] = policy.delta;
  extra["epsilon"] = policy.epsilon;
  extra["d_e"] = policy.embedder.d_e;
  extra["d_h"] = policy.mapper.d_h;
  extra["vocab"] = policy.mapper.vocab;
  io::save_params(dir, policy.mapper.param_names, policy.mapper.param_tensors, std::move(extra));
}

WatermarkPolicy load_policy(const std::string& dir) {
  const auto manifest = io::read_manifest(dir);
  if (manifest.value("kind", "") != "policy") throw std::invalid_argument("not a policy checkpoint: " + dir);
  WatermarkPolicy p;
  p.n = manifest.at("n").get<int>();
  p.delta = manifest.at("delta").get<double>();
  p.epsilon = manifest.at("epsilon").get<double>();
  const int d_e = manifest.at("d_e").get<int>();
  const int d_h = manifest.at("d_h").get<int>();
  const int vocab = manifest.value("vocab", static_cast<int>(Vocab::kSize));
  p.embedder = NGramEmbedder::init(manifest.at("xi_seed").get<uint64_t>(), p.n, d_e, vocab);
  p.mapper = MappingMLP::init(d_e, d_h, vocab, manifest.value("seed", 0ULL));
  io::load_params(dir, manifest, p.mapper.param_names, p.mapper.param_tensors);
  return p;
}

}  // namespace wm
