#include "wm/modifications.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "wm/training.hpp"

namespace wm {

std::string ModificationSpec::label() const {
  switch (kind) {
    case Kind::merge: return "merge_t" + std::to_string(merge_t);
    case Kind::quantize: return "quant_b" + std::to_string(bits);
    case Kind::prune: return "prune_r" + std::to_string(sparsity);
    case Kind::finetune: return "finetune_s" + std::to_string(finetune_steps);
  }
  return "?";
}

nlohmann::json ModificationSpec::to_json() const {
  nlohmann::json j;
  switch (kind) {
    case Kind::merge:
      j["kind"] = "merge";
      j["t"] = merge_t;
      break;
    case Kind::quantize:
      j["kind"] = "quantize";
      j["bits"] = bits;
      break;
    case Kind::prune:
      j["kind"] = "prune";
      j["sparsity"] = sparsity;
      break;
    case Kind::finetune:
      j["kind"] = "finetune";
      j["steps"] = finetune_steps;
      j["lr"] = finetune_lr;
      j["split"] = split_name(finetune_split);
      j["seed"] = seed;
      break;
  }
  return j;
}

ModificationSpec ModificationSpec::from_json(const nlohmann::json& j) {
  ModificationSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "merge") {
    s.kind = Kind::merge;
    s.merge_t = j.at("t").get<double>();
  } else if (kind == "quantize") {
    s.kind = Kind::quantize;
    s.bits = j.at("bits").get<int>();
  } else if (kind == "prune") {
    s.kind = Kind::prune;
    s.sparsity = j.at("sparsity").get<double>();
  } else if (kind == "finetune") {
    s.kind = Kind::finetune;
    s.finetune_steps = j.at("steps").get<int64_t>();
    s.finetune_lr = j.value("lr", 1e-4);
    s.finetune_split = split_from_name(j.value("split", "heldout"));
    s.seed = j.value("seed", 0ULL);
  } else {
    throw std::invalid_argument("unknown modification kind: " + kind);
  }
  return s;
}

CausalLM slerp_merge(const CausalLM& a, const CausalLM& b, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("slerp_merge: t must be in [0, 1]");
  if (a.param_names != b.param_names) throw std::invalid_argument("slerp_merge: architecture mismatch");
  CausalLM out = a.clone();
  for (size_t pi = 0; pi < out.param_tensors.size(); ++pi) {
    const auto& ta = a.param_tensors[pi];
    const auto& tb = b.param_tensors[pi];
    if (ta->shape != tb->shape) throw std::invalid_argument("slerp_merge: shape mismatch for " + a.param_names[pi]);
    auto& dst = out.param_tensors[pi]->data;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < dst.size(); ++i) {
      const double x = ta->data[i], y = tb->data[i];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    double wa, wb;
    if (na < 1e-30 || nb < 1e-30) {
      wa = 1.0 - t;
      wb = t;
    } else {
      const double cosw = std::clamp(dot / (na * nb), -1.0, 1.0);
      const double omega = std::acos(cosw);
      if (omega < 1e-6) {
        wa = 1.0 - t;
        wb = t;
      } else {
        const double so = std::sin(omega);
        wa = std::sin((1.0 - t) * omega) / so;
        wb = std::sin(t * omega) / so;
      }
    }
    for (size_t i = 0; i < dst.size(); ++i)
      dst[i] = static_cast<float>(wa * static_cast<double>(ta->data[i]) + wb * static_cast<double>(tb->data[i]));
  }
  return out;
}

CausalLM quantize_rtn(const CausalLM& model, int bits) {
  if (bits != 4 && bits != 8) throw std::invalid_argument("quantize_rtn: bits must be 4 or 8");
  CausalLM out = model.clone();
  const double levels = static_cast<double>((1 << (bits - 1)) - 1);
  for (auto& p : out.param_tensors) {
    float mx = 0.f;
    for (float v : p->data) mx = std::max(mx, std::abs(v));
    if (mx == 0.f) continue;  // scale would be 0: pass through
    const double scale = static_cast<double>(mx) / levels;
    for (auto& v : p->data) v = static_cast<float>(std::round(static_cast<double>(v) / scale) * scale);
  }
  return out;
}

static bool prunable(const std::string& name, const Graph::Ptr& t) {
  return t->ndim() == 2 && name != "wte" && name != "wpe";
}

CausalLM prune_magnitude(const CausalLM& model, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("prune_magnitude: rho must be in [0, 1]");
  CausalLM out = model.clone();
  std::vector<float> mags;
  for (size_t pi = 0; pi < out.param_tensors.size(); ++pi)
    if (prunable(out.param_names[pi], out.param_tensors[pi]))
      for (float v : out.param_tensors[pi]->data) mags.push_back(std::abs(v));
  auto k = static_cast<int64_t>(std::llround(rho * static_cast<double>(mags.size())));
  if (k <= 0) return out;
  k = std::min<int64_t>(k, static_cast<int64_t>(mags.size()));
  std::nth_element(mags.begin(), mags.begin() + (k - 1), mags.end());
  const float threshold = mags[static_cast<size_t>(k - 1)];

  // zero strictly-below first, then break threshold ties in deterministic
  // parameter order until exactly k entries are zeroed
  int64_t zeroed = 0;
  for (size_t pi = 0; pi < out.param_tensors.size(); ++pi) {
    if (!prunable(out.param_names[pi], out.param_tensors[pi])) continue;
    for (auto& v : out.param_tensors[pi]->data)
      if (std::abs(v) < threshold) {
        v = 0.f;
        ++zeroed;
      }
  }
  for (size_t pi = 0; pi < out.param_tensors.size() && zeroed < k; ++pi) {
    if (!prunable(out.param_names[pi], out.param_tensors[pi])) continue;
    for (auto& v : out.param_tensors[pi]->data) {
      if (zeroed >= k) break;
      if (v != 0.f && std::abs(v) == threshold) {
        v = 0.f;
        ++zeroed;
      }
    }
  }
  return out;
}

CausalLM finetune_raw(const CausalLM& model, const Corpus& corpus, Split split, int64_t steps, double lr,
                      uint64_t seed) {
  if (steps < 0) throw std::invalid_argument("finetune_raw: steps must be >= 0");
  CausalLM out = model.clone();
  if (steps == 0) return out;
  out.set_trainable(true);
  CeTrainConfig cfg;
  cfg.max_steps = steps;
  cfg.batch = 4;
  cfg.seq_len = std::min<int64_t>(128, model.config.max_seq);
  cfg.max_lr = lr;
  cfg.grad_clip = 1.0;
  cfg.seed = seed;
  cfg.split = split;
  cfg.cosine = false;  // constant lr, as a user would run a short fine-tune
  cfg.val_every = 0;
  train_cross_entropy(out, corpus, cfg);
  out.set_trainable(false);
  return out;
}

CausalLM apply_modification(const CausalLM& model, const CausalLM& merge_partner, const Corpus& corpus,
                            const ModificationSpec& spec) {
  switch (spec.kind) {
    case ModificationSpec::Kind::merge: return slerp_merge(model, merge_partner, spec.merge_t);
    case ModificationSpec::Kind::quantize: return quantize_rtn(model, spec.bits);
    case ModificationSpec::Kind::prune: return prune_magnitude(model, spec.sparsity);
    case ModificationSpec::Kind::finetune:
      return finetune_raw(model, corpus, spec.finetune_split, spec.finetune_steps, spec.finetune_lr, spec.seed);
  }
  throw std::invalid_argument("apply_modification: bad kind");
}

}  // namespace wm
