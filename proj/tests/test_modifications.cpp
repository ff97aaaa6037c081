#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "wm/modifications.hpp"
#include "wm/rng.hpp"
#include "wm/textgen.hpp"

using namespace wm;

namespace {

LMConfig tiny_cfg() {
  LMConfig c;
  c.vocab = 61;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.max_seq = 32;
  return c;
}

}  // namespace

TEST_CASE("slerp endpoints and self-merge") {
  auto a = CausalLM::init(tiny_cfg(), 1);
  auto b = CausalLM::init(tiny_cfg(), 2);

  auto at0 = slerp_merge(a, b, 0.0);
  for (size_t pi = 0; pi < a.param_tensors.size(); ++pi)
    for (size_t i = 0; i < a.param_tensors[pi]->data.size(); ++i)
      CHECK(at0.param_tensors[pi]->data[i] == a.param_tensors[pi]->data[i]);

  auto at1 = slerp_merge(a, b, 1.0);
  for (size_t pi = 0; pi < b.param_tensors.size(); ++pi)
    for (size_t i = 0; i < b.param_tensors[pi]->data.size(); ++i)
      CHECK(at1.param_tensors[pi]->data[i] == b.param_tensors[pi]->data[i]);

  for (double t : {0.0, 0.25, 0.5, 0.9, 1.0}) {
    auto self = slerp_merge(a, a, t);
    CHECK(self.checksum() == a.checksum());
  }

  CHECK_THROWS_AS((void)slerp_merge(a, b, 1.5), std::invalid_argument);
  auto other = CausalLM::init(LMConfig{.vocab = 61, .d_model = 16, .n_layers = 1, .n_heads = 4, .max_seq = 32}, 3);
  (void)other;  // same shapes, same names: architecture check is by name list
}

TEST_CASE("slerp orthogonal unit vectors at the midpoint") {
  auto a = CausalLM::init(tiny_cfg(), 4);
  auto b = a.clone();
  // zero everything, then craft one orthogonal unit pair in wte
  for (auto& p : a.param_tensors) std::fill(p->data.begin(), p->data.end(), 0.f);
  for (auto& p : b.param_tensors) std::fill(p->data.begin(), p->data.end(), 0.f);
  a.param("wte")->data[0] = 1.f;  // u = e0
  b.param("wte")->data[1] = 1.f;  // v = e1
  auto mid = slerp_merge(a, b, 0.5);
  const float inv_sqrt2 = static_cast<float>(1.0 / std::sqrt(2.0));
  CHECK(mid.param("wte")->data[0] == doctest::Approx(inv_sqrt2).epsilon(1e-6));
  CHECK(mid.param("wte")->data[1] == doctest::Approx(inv_sqrt2).epsilon(1e-6));
  for (size_t i = 2; i < 8; ++i) CHECK(mid.param("wte")->data[i] == 0.f);
}

TEST_CASE("quantize_rtn") {
  auto model = CausalLM::init(tiny_cfg(), 5);

  SUBCASE("bits restricted to 4 or 8") {
    CHECK_THROWS_AS((void)quantize_rtn(model, 16), std::invalid_argument);
  }

  SUBCASE("idempotent: grid points stay put") {
    auto q1 = quantize_rtn(model, 8);
    auto q2 = quantize_rtn(q1, 8);
    CHECK(q1.checksum() == q2.checksum());
  }

  SUBCASE("per-tensor max error bounded by scale/2") {
    for (int bits : {4, 8}) {
      auto q = quantize_rtn(model, bits);
      for (size_t pi = 0; pi < model.param_tensors.size(); ++pi) {
        float mx = 0.f;
        for (float v : model.param_tensors[pi]->data) mx = std::max(mx, std::abs(v));
        if (mx == 0.f) continue;
        const double scale = static_cast<double>(mx) / static_cast<double>((1 << (bits - 1)) - 1);
        for (size_t i = 0; i < model.param_tensors[pi]->data.size(); ++i) {
          const double err = std::abs(static_cast<double>(model.param_tensors[pi]->data[i]) -
                                      static_cast<double>(q.param_tensors[pi]->data[i]));
          CHECK(err <= scale / 2 + 1e-9);
        }
      }
    }
  }

  SUBCASE("known values at 8 bits err below one step") {
    auto m = model.clone();
    for (auto& p : m.param_tensors) std::fill(p->data.begin(), p->data.end(), 0.f);
    auto wte = m.param("wte");
    wte->data[0] = -1.f;
    wte->data[1] = 0.5f;
    wte->data[2] = 1.f;
    auto q = quantize_rtn(m, 8);
    for (int i = 0; i < 3; ++i) {
      const double err = std::abs(static_cast<double>(q.param("wte")->data[static_cast<size_t>(i)]) -
                                  static_cast<double>(wte->data[static_cast<size_t>(i)]));
      CHECK(err <= 1.0 / 254.0 + 1e-9);
    }
    // all-zero tensors passed through untouched
    for (float v : q.param("lm_head")->data) CHECK(v == 0.f);
  }
}

TEST_CASE("prune_magnitude") {
  auto model = CausalLM::init(tiny_cfg(), 6);

  SUBCASE("rho=0 unchanged, rho=1 zeroes every prunable weight") {
    CHECK(prune_magnitude(model, 0.0).checksum() == model.checksum());
    auto all = prune_magnitude(model, 1.0);
    for (size_t pi = 0; pi < all.param_tensors.size(); ++pi) {
      const auto& name = all.param_names[pi];
      const auto& t = all.param_tensors[pi];
      if (t->ndim() == 2 && name != "wte" && name != "wpe") {
        for (float v : t->data) CHECK(v == 0.f);
      }
    }
    // embeddings and layer-norm parameters exempt
    CHECK(all.param("wte")->data == model.param("wte")->data);
    CHECK(all.param("lnf.gain")->data == model.param("lnf.gain")->data);
  }

  SUBCASE("global sparsity lands within half a percent of rho") {
    for (double rho : {0.2, 0.5, 0.8}) {
      auto pruned = prune_magnitude(model, rho);
      int64_t zeros = 0, total = 0;
      for (size_t pi = 0; pi < pruned.param_tensors.size(); ++pi) {
        const auto& name = pruned.param_names[pi];
        const auto& t = pruned.param_tensors[pi];
        if (t->ndim() != 2 || name == "wte" || name == "wpe") continue;
        for (float v : t->data) {
          zeros += (v == 0.f);
          ++total;
        }
      }
      CHECK(std::abs(static_cast<double>(zeros) / static_cast<double>(total) - rho) <= 0.005);
    }
  }

  SUBCASE("known magnitudes: exactly the smallest half goes") {
    auto m = model.clone();
    // every prunable entry large, except ten known values in the first matrix
    for (size_t pi = 0; pi < m.param_tensors.size(); ++pi)
      if (m.param_tensors[pi]->ndim() == 2 && m.param_names[pi] != "wte" && m.param_names[pi] != "wpe")
        std::fill(m.param_tensors[pi]->data.begin(), m.param_tensors[pi]->data.end(), 100.f);
    auto target = m.param("layer0.attn.wq");
    const std::vector<float> known = {0.1f, -0.2f, 0.3f, -0.4f, 0.5f, -0.6f, 0.7f, -0.8f, 0.9f, -1.0f};
    std::copy(known.begin(), known.end(), target->data.begin());

    int64_t prunable_total = 0;
    for (size_t pi = 0; pi < m.param_tensors.size(); ++pi)
      if (m.param_tensors[pi]->ndim() == 2 && m.param_names[pi] != "wte" && m.param_names[pi] != "wpe")
        prunable_total += m.param_tensors[pi]->numel();

    auto pruned = prune_magnitude(m, 5.0 / static_cast<double>(prunable_total));
    auto out = pruned.param("layer0.attn.wq");
    for (int i = 0; i < 5; ++i) CHECK(out->data[static_cast<size_t>(i)] == 0.f);   // |0.1..0.5| pruned
    for (int i = 5; i < 10; ++i) CHECK(out->data[static_cast<size_t>(i)] != 0.f);  // |0.6..1.0| kept
  }
}

TEST_CASE("finetune_raw") {
  auto model = CausalLM::init(tiny_cfg(), 7);
  auto corpus = Corpus::from_bytes(synth_text(40000, 7), 0.5, 0.1, 7);

  SUBCASE("zero steps is bit-identical") {
    auto out = finetune_raw(model, corpus, Split::heldout, 0, 1e-3, 1);
    CHECK(out.checksum() == model.checksum());
  }

  SUBCASE("deterministic per seed and loss decreases") {
    // vocab must cover byte tokens for corpus training
    LMConfig cfg = tiny_cfg();
    cfg.vocab = Vocab::kSize;
    auto m = CausalLM::init(cfg, 8);
    auto a = finetune_raw(m, corpus, Split::heldout, 60, 3e-3, 2);
    auto b = finetune_raw(m, corpus, Split::heldout, 60, 3e-3, 2);
    CHECK(a.checksum() == b.checksum());
    CHECK(a.checksum() != m.checksum());

    // held-out loss after is lower than before
    BatchIterator it(corpus, Split::heldout, 24, 2, 99);
    auto ce = [&](const CausalLM& mm, TokenBatch batch) {
      Graph g;
      g.set_recording(false);
      Tensor logits = forward_logits_nograd(mm, batch);
      double total = 0;
      int64_t count = 0;
      for (int64_t bb = 0; bb < batch.batch; ++bb)
        for (int64_t t = 0; t + 1 < batch.seq; ++t) {
          std::vector<float> row(static_cast<size_t>(mm.config.vocab));
          for (int64_t v = 0; v < mm.config.vocab; ++v) row[static_cast<size_t>(v)] = logits.at(bb * batch.seq + t, v);
          double mx = -1e300, sum = 0;
          for (float v : row) mx = std::max(mx, static_cast<double>(v));
          for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
          total -= static_cast<double>(row[static_cast<size_t>(batch.ids[static_cast<size_t>(bb * batch.seq + t + 1)])]) - mx - std::log(sum);
          ++count;
        }
      return total / static_cast<double>(count);
    };
    TokenBatch probe = it.next();
    CHECK(ce(a, probe) < ce(m, probe));
  }
}

TEST_CASE("modification spec json round-trip") {
  for (const char* txt :
       {R"({"kind":"merge","t":0.3})", R"({"kind":"quantize","bits":4})", R"({"kind":"prune","sparsity":0.5})",
        R"({"kind":"finetune","steps":300,"lr":0.0001,"split":"heldout","seed":9})"}) {
    const auto j = nlohmann::json::parse(txt);
    const auto spec = ModificationSpec::from_json(j);
    const auto j2 = spec.to_json();
    CHECK(ModificationSpec::from_json(j2).to_json() == j2);
  }
  CHECK_THROWS_AS(ModificationSpec::from_json(nlohmann::json::parse(R"({"kind":"nope"})")), std::invalid_argument);
}
