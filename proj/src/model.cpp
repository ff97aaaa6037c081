#include "wm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "wm/io.hpp"
#include "wm/kernels.hpp"
#include "wm/rng.hpp"

namespace wm {

void LMConfig::validate() const {
  if (vocab < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || max_seq < 1)
    throw std::invalid_argument("LMConfig: all dimensions must be positive");
  if (d_model % n_heads != 0) throw std::invalid_argument("LMConfig: d_model must be divisible by n_heads");
  if (dropout != 0.0) throw std::invalid_argument("LMConfig: only dropout=0 is supported");
}

static constexpr double kInitStd = 0.02;

CausalLM CausalLM::init(const LMConfig& cfg, uint64_t seed) {
  cfg.validate();
  CausalLM m;
  m.config = cfg;
  m.init_seed = seed;
  SplitMix64 rng(mix_seed(seed, 0x6c6dULL));
  const int64_t C = cfg.d_model;

  auto add_normal = [&](const std::string& name, std::vector<int64_t> shape) {
    auto p = Graph::param(std::move(shape));
    rng.fill_normal<float>(p->data, 0.0, kInitStd);
    m.param_names.push_back(name);
    m.param_tensors.push_back(std::move(p));
  };
  auto add_const = [&](const std::string& name, std::vector<int64_t> shape, float value) {
    auto p = Graph::param(std::move(shape));
    std::fill(p->data.begin(), p->data.end(), value);
    m.param_names.push_back(name);
    m.param_tensors.push_back(std::move(p));
  };

  add_normal("wte", {cfg.vocab, C});
  add_normal("wpe", {cfg.max_seq, C});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add_const(p + "ln1.gain", {C}, 1.f);
    add_const(p + "ln1.bias", {C}, 0.f);
    add_normal(p + "attn.wq", {C, C});
    add_normal(p + "attn.wk", {C, C});
    add_normal(p + "attn.wv", {C, C});
    add_normal(p + "attn.wo", {C, C});
    add_const(p + "ln2.gain", {C}, 1.f);
    add_const(p + "ln2.bias", {C}, 0.f);
    add_normal(p + "mlp.w1", {C, 4 * C});
    add_normal(p + "mlp.w2", {4 * C, C});
  }
  add_const("lnf.gain", {C}, 1.f);
  add_const("lnf.bias", {C}, 0.f);
  add_normal("lm_head", {C, cfg.vocab});  // no bias on the output projection
  return m;
}

Graph::Ptr CausalLM::param(const std::string& name) const {
  for (size_t i = 0; i < param_names.size(); ++i)
    if (param_names[i] == name) return param_tensors[i];
  throw std::invalid_argument("no such parameter: " + name);
}

std::vector<Graph::Ptr> CausalLM::trainable_params() const {
  std::vector<Graph::Ptr> out;
  for (const auto& p : param_tensors)
    if (p->requires_grad) out.push_back(p);
  return out;
}

void CausalLM::set_trainable(bool on) {
  for (auto& p : param_tensors) p->set_requires_grad(on);
}

int64_t CausalLM::num_params() const {
  int64_t n = 0;
  for (const auto& p : param_tensors) n += p->numel();
  return n;
}

uint64_t CausalLM::checksum() const {
  uint64_t h = 0x57726d6c6dULL;
  for (const auto& p : param_tensors)
    for (float v : p->data) {
      uint32_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h = counter_hash(h, bits);
    }
  return h;
}

CausalLM CausalLM::clone() const {
  CausalLM m;
  m.config = config;
  m.init_seed = init_seed;
  m.param_names = param_names;
  m.param_tensors.reserve(param_tensors.size());
  for (const auto& p : param_tensors) {
    auto q = std::make_shared<Tensor>(*p);
    m.param_tensors.push_back(std::move(q));
  }
  return m;
}

Graph::Ptr forward_logits(Graph& g, const CausalLM& model, const TokenBatch& batch) {
  const auto& cfg = model.config;
  if (batch.seq > cfg.max_seq) throw std::invalid_argument("forward_logits: sequence longer than max_seq");
  for (int id : batch.ids)
    if (id < 0 || id >= cfg.vocab) throw std::invalid_argument("forward_logits: token id out of vocabulary");

  std::vector<int64_t> tok_rows(batch.ids.begin(), batch.ids.end());
  std::vector<int64_t> pos_rows(static_cast<size_t>(batch.batch * batch.seq));
  for (int64_t b = 0; b < batch.batch; ++b)
    for (int64_t t = 0; t < batch.seq; ++t) pos_rows[static_cast<size_t>(b * batch.seq + t)] = t;

  auto x = g.add(g.gather_rows(model.param("wte"), std::move(tok_rows)),
                 g.gather_rows(model.param("wpe"), std::move(pos_rows)));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto h = g.layer_norm(x, model.param(p + "ln1.gain"), model.param(p + "ln1.bias"));
    auto q = g.matmul(h, model.param(p + "attn.wq"));
    auto k = g.matmul(h, model.param(p + "attn.wk"));
    auto v = g.matmul(h, model.param(p + "attn.wv"));
    auto a = g.attention(q, k, v, batch.batch, batch.seq, cfg.n_heads);
    x = g.add(x, g.matmul(a, model.param(p + "attn.wo")));
    auto h2 = g.layer_norm(x, model.param(p + "ln2.gain"), model.param(p + "ln2.bias"));
    auto m1 = g.relu(g.matmul(h2, model.param(p + "mlp.w1")));
    x = g.add(x, g.matmul(m1, model.param(p + "mlp.w2")));
  }
  auto xf = g.layer_norm(x, model.param("lnf.gain"), model.param("lnf.bias"));
  return g.matmul(xf, model.param("lm_head"));
}

Tensor forward_logits_nograd(const CausalLM& model, const TokenBatch& batch) {
  Graph g;
  g.set_recording(false);
  auto out = forward_logits(g, model, batch);
  return std::move(*out);
}

// ------------------------------------------------------------- inference

InferCtx::InferCtx(const CausalLM& model) : model_(&model) {
  const auto& cfg = model.config;
  kcache_.assign(static_cast<size_t>(cfg.n_layers), std::vector<float>(static_cast<size_t>(cfg.max_seq * cfg.d_model)));
  vcache_ = kcache_;
  logits_.resize(static_cast<size_t>(cfg.vocab));
  x_.resize(static_cast<size_t>(cfg.d_model));
  scratch_.resize(static_cast<size_t>(4 * cfg.d_model));
  scratch2_.resize(static_cast<size_t>(4 * cfg.d_model));
  attn_.resize(static_cast<size_t>(cfg.d_model));
  layers_.reserve(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    layers_.push_back({model.param(p + "ln1.gain")->data.data(), model.param(p + "ln1.bias")->data.data(),
                       model.param(p + "attn.wq")->data.data(), model.param(p + "attn.wk")->data.data(),
                       model.param(p + "attn.wv")->data.data(), model.param(p + "attn.wo")->data.data(),
                       model.param(p + "ln2.gain")->data.data(), model.param(p + "ln2.bias")->data.data(),
                       model.param(p + "mlp.w1")->data.data(), model.param(p + "mlp.w2")->data.data()});
  }
  wte_ = model.param("wte")->data.data();
  wpe_ = model.param("wpe")->data.data();
  lnf_gain_ = model.param("lnf.gain")->data.data();
  lnf_bias_ = model.param("lnf.bias")->data.data();
  lm_head_ = model.param("lm_head")->data.data();
}

void InferCtx::reset() {
  pos_ = 0;
}

const std::vector<float>& InferCtx::step(int token) {
  const auto& cfg = model_->config;
  if (token < 0 || token >= cfg.vocab) throw std::invalid_argument("InferCtx::step: token id out of vocabulary");
  if (pos_ >= cfg.max_seq) throw std::invalid_argument("InferCtx::step: sequence longer than max_seq");
  const int64_t C = cfg.d_model;
  const int64_t hd = C / cfg.n_heads;
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(hd)));

  for (int64_t i = 0; i < C; ++i) x_[i] = wte_[token * C + i] + wpe_[pos_ * C + i];

  float* h = scratch2_.data();
  std::vector<float> q(static_cast<size_t>(C));
  std::vector<float> w(static_cast<size_t>(pos_ + 1));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerPtrs& lp = layers_[static_cast<size_t>(l)];
    kernels::layer_norm_rows_serial(x_.data(), lp.ln1_gain, lp.ln1_bias, h, 1, C, 1e-5);
    float* krow = kcache_[static_cast<size_t>(l)].data() + pos_ * C;
    float* vrow = vcache_[static_cast<size_t>(l)].data() + pos_ * C;
    kernels::gemm_nn_serial(h, lp.wq, q.data(), 1, C, C, false);
    kernels::gemm_nn_serial(h, lp.wk, krow, 1, C, C, false);
    kernels::gemm_nn_serial(h, lp.wv, vrow, 1, C, C, false);

    const float* kc = kcache_[static_cast<size_t>(l)].data();
    const float* vc = vcache_[static_cast<size_t>(l)].data();
    for (int hh = 0; hh < cfg.n_heads; ++hh) {
      const int64_t off = hh * hd;
      for (int64_t u = 0; u <= pos_; ++u) {
        float acc = 0.f;
        for (int64_t d = 0; d < hd; ++d) acc += q[off + d] * kc[u * C + off + d];
        w[static_cast<size_t>(u)] = acc * scale;
      }
      kernels::softmax_rows_serial(w.data(), 1, pos_ + 1);
      for (int64_t d = 0; d < hd; ++d) {
        float acc = 0.f;
        for (int64_t u = 0; u <= pos_; ++u) acc += w[static_cast<size_t>(u)] * vc[u * C + off + d];
        attn_[off + d] = acc;
      }
    }
    kernels::gemm_nn_serial(attn_.data(), lp.wo, h, 1, C, C, false);
    for (int64_t i = 0; i < C; ++i) x_[i] += h[i];

    kernels::layer_norm_rows_serial(x_.data(), lp.ln2_gain, lp.ln2_bias, h, 1, C, 1e-5);
    kernels::gemm_nn_serial(h, lp.w1, scratch_.data(), 1, C, 4 * C, false);
    for (int64_t i = 0; i < 4 * C; ++i) scratch_[i] = scratch_[i] > 0.f ? scratch_[i] : 0.f;
    kernels::gemm_nn_serial(scratch_.data(), lp.w2, h, 1, 4 * C, C, false);
    for (int64_t i = 0; i < C; ++i) x_[i] += h[i];
  }
  kernels::layer_norm_rows_serial(x_.data(), lnf_gain_, lnf_bias_, h, 1, C, 1e-5);
  kernels::gemm_nn_serial(h, lm_head_, logits_.data(), 1, C, cfg.vocab, false);
  ++pos_;
  return logits_;
}

// ------------------------------------------------------------- sampling

static int sample_from_logits(std::span<const float> logits, double temperature, SplitMix64& rng) {
  const int v = static_cast<int>(logits.size());
  if (temperature <= 0.0) {
    int best = 0;
    for (int i = 1; i < v; ++i)
      if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;  // lowest id wins ties
    return best;
  }
  double mx = -1e300;
  for (float l : logits) mx = std::max(mx, static_cast<double>(l) / temperature);
  std::vector<double> p(static_cast<size_t>(v));
  double sum = 0.0;
  for (int i = 0; i < v; ++i) {
    p[static_cast<size_t>(i)] = std::exp(static_cast<double>(logits[static_cast<size_t>(i)]) / temperature - mx);
    sum += p[static_cast<size_t>(i)];
  }
  const double u = rng.next_double() * sum;
  double c = 0.0;
  for (int i = 0; i < v; ++i) {
    c += p[static_cast<size_t>(i)];
    if (u < c) return i;
  }
  return v - 1;
}

std::vector<int> sample_with_bias(const CausalLM& model, std::span<const int> prompt, int max_new,
                                  double temperature, const BiasFn& bias_fn, uint64_t seed) {
  if (temperature < 0.0) throw std::invalid_argument("sample_with_bias: temperature must be >= 0");
  if (prompt.empty()) throw std::invalid_argument("sample_with_bias: prompt must be nonempty");
  std::vector<int> out(prompt.begin(), prompt.end());
  InferCtx ctx(model);
  SplitMix64 rng(mix_seed(seed, 0x73616d70ULL));
  std::vector<float> biased(static_cast<size_t>(model.config.vocab));
  std::vector<float> bias(static_cast<size_t>(model.config.vocab));
  const std::vector<float>* logits = nullptr;
  for (size_t i = 0; i + 1 < prompt.size(); ++i) ctx.step(prompt[i]);
  logits = &ctx.step(prompt.back());
  for (int t = 0; t < max_new; ++t) {
    if (static_cast<int>(out.size()) >= model.config.max_seq) break;
    std::span<const float> use(*logits);
    if (bias_fn) {
      std::fill(bias.begin(), bias.end(), 0.f);
      bias_fn(out, bias);
      for (size_t i = 0; i < biased.size(); ++i) biased[i] = (*logits)[i] + bias[i];
      use = biased;
    }
    const int tok = sample_from_logits(use, temperature, rng);
    out.push_back(tok);
    if (t + 1 < max_new) logits = &ctx.step(tok);
  }
  return out;
}

std::vector<std::vector<int>> sample_batch(const CausalLM& model, const std::vector<std::vector<int>>& prompts,
                                           int max_new, double temperature, const BiasFn& bias_fn, uint64_t seed) {
  std::vector<std::vector<int>> out(prompts.size());
  const int64_t n = static_cast<int64_t>(prompts.size());
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < n; ++i)
    out[static_cast<size_t>(i)] = sample_with_bias(model, prompts[static_cast<size_t>(i)], max_new, temperature,
                                                   bias_fn, mix_seed(seed, static_cast<uint64_t>(i)));
  return out;
}

double perplexity_from(const CausalLM& ref_model, std::span<const int> ids, int64_t start) {
  if (ids.size() < 2) throw std::invalid_argument("perplexity: need at least 2 tokens");
  if (start < 1 || start >= static_cast<int64_t>(ids.size()))
    throw std::invalid_argument("perplexity_from: start out of range");
  InferCtx ctx(ref_model);
  const int v = ref_model.config.vocab;
  double nll = 0.0;
  for (size_t i = 0; i + 1 < ids.size(); ++i) {
    const auto& logits = ctx.step(ids[i]);
    if (static_cast<int64_t>(i) + 1 < start) continue;
    double mx = -1e300;
    for (float l : logits) mx = std::max(mx, static_cast<double>(l));
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(logits[static_cast<size_t>(j)]) - mx);
    nll -= static_cast<double>(logits[static_cast<size_t>(ids[i + 1])]) - mx - std::log(sum);
  }
  return std::exp(nll / static_cast<double>(static_cast<int64_t>(ids.size()) - start));
}

double perplexity(const CausalLM& ref_model, std::span<const int> ids) {
  return perplexity_from(ref_model, ids, 1);
}

// ------------------------------------------------------------ checkpoints

void save_checkpoint(const CausalLM& model, const std::string& dir) {
  nlohmann::json extra;
  extra["kind"] = "lm";
  extra["seed"] = model.init_seed;
  extra["config"] = {{"vocab", model.config.vocab},     {"d_model", model.config.d_model},
                     {"n_layers", model.config.n_layers}, {"n_heads", model.config.n_heads},
                     {"max_seq", model.config.max_seq},   {"dropout", model.config.dropout}};
  io::save_params(dir, model.param_names, model.param_tensors, std::move(extra));
}

CausalLM load_checkpoint(const std::string& dir) {
  const auto manifest = io::read_manifest(dir);
  if (manifest.value("kind", "") != "lm") throw std::invalid_argument("not an lm checkpoint: " + dir);
  LMConfig cfg;
  const auto& jc = manifest.at("config");
  cfg.vocab = jc.at("vocab").get<int>();
  cfg.d_model = jc.at("d_model").get<int>();
  cfg.n_layers = jc.at("n_layers").get<int>();
  cfg.n_heads = jc.at("n_heads").get<int>();
  cfg.max_seq = jc.at("max_seq").get<int>();
  cfg.dropout = jc.value("dropout", 0.0);
  CausalLM model = CausalLM::init(cfg, manifest.value("seed", 0ULL));
  io::load_params(dir, manifest, model.param_names, model.param_tensors);
  return model;
}

}  // namespace wm
