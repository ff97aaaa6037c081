#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "wm/corpus.hpp"
#include "wm/metrics.hpp"
#include "wm/rng.hpp"
#include "wm/textgen.hpp"
#include "wm/training.hpp"

using namespace wm;

namespace {

LMConfig tiny_cfg(int vocab = 61) {
  LMConfig c;
  c.vocab = vocab;
  c.d_model = 32;
  c.n_layers = 1;
  c.n_heads = 4;
  c.max_seq = 64;
  return c;
}

WatermarkPolicy tiny_policy(uint64_t seed, int n, double delta, int vocab) {
  WatermarkPolicy p;
  p.n = n;
  p.delta = delta;
  p.epsilon = 0.2;
  p.embedder = NGramEmbedder::init(seed, n, 16, vocab);
  p.mapper = MappingMLP::init(16, 24, vocab, mix_seed(seed, 1));
  return p;
}

TokenBatch random_batch(int64_t B, int64_t L, int vocab, uint64_t seed) {
  TokenBatch b;
  b.batch = B;
  b.seq = L;
  b.ids.resize(static_cast<size_t>(B * L));
  SplitMix64 rng(seed);
  for (auto& id : b.ids) id = static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab)));
  return b;
}

TrainConfig tiny_train_cfg() {
  TrainConfig c;
  c.n = 1;
  c.delta = 1.0;
  c.steps = 40;
  c.batch = 2;
  c.seq_len = 24;
  c.anti_batch = 2;
  c.anti_len = 16;
  c.anti_prompt_len = 4;
  c.anti_refresh = 5;
  c.max_lr = 1e-3;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("train config invariants") {
  TrainConfig c = tiny_train_cfg();
  c.beta = 5.0;
  c.alpha = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);  // beta > 0 requires alpha > 0
  c.alpha = -0.1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_train_cfg();
  CHECK_NOTHROW(c.validate());
  // json round trip
  const auto j = c.to_json();
  const auto c2 = TrainConfig::from_json(j);
  CHECK(c2.to_json() == j);
}

TEST_CASE("sim_loss") {
  SUBCASE("delta=0 with student == teacher gives zero") {
    auto teacher = CausalLM::init(tiny_cfg(), 3);
    auto student = teacher.clone();
    auto policy = tiny_policy(4, 2, 1.0, teacher.config.vocab);
    policy.delta = 0.0;
    const auto batch = random_batch(2, 12, teacher.config.vocab, 5);
    CHECK(sim_loss(teacher, policy, student, batch) == doctest::Approx(0.0).epsilon(1e-6));
  }

  SUBCASE("always nonnegative") {
    for (uint64_t s = 0; s < 5; ++s) {
      auto teacher = CausalLM::init(tiny_cfg(), s);
      auto student = CausalLM::init(tiny_cfg(), s + 100);
      auto policy = tiny_policy(s, 1, 1.3, teacher.config.vocab);
      const auto batch = random_batch(2, 10, teacher.config.vocab, s);
      CHECK(sim_loss(teacher, policy, student, batch) >= 0.0);
    }
  }

  SUBCASE("single-position V=2 hand case against the direct KL oracle") {
    LMConfig cfg;
    cfg.vocab = 2;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq = 8;
    auto teacher = CausalLM::init(cfg, 1);
    std::fill(teacher.param("lm_head")->data.begin(), teacher.param("lm_head")->data.end(), 0.f);
    auto student = teacher.clone();

    WatermarkPolicy policy;
    policy.n = 1;
    policy.delta = 1.0;
    policy.embedder = NGramEmbedder::init(2, 1, 4, 2);
    policy.mapper = MappingMLP::init(4, 4, 2, 3);
    // constant mapper output [+0.5, -0.5] for every context
    std::fill(policy.mapper.param("out.w")->data.begin(), policy.mapper.param("out.w")->data.end(), 0.f);
    policy.mapper.param("out.b")->data = {std::atanh(0.5f), std::atanh(-0.5f)};

    TokenBatch batch;
    batch.batch = 1;
    batch.seq = 2;
    batch.ids = {0, 1};  // one scored position

    const std::vector<double> p_logits = {0.5, -0.5}, q_logits = {0.0, 0.0};
    const double expected = oracles::kl_direct(p_logits, q_logits);
    CHECK(expected == doctest::Approx(0.110944).epsilon(1e-4));  // frozen from the oracle
    CHECK(sim_loss(teacher, policy, student, batch) == doctest::Approx(expected).epsilon(1e-5));

    // anti_loss mirrors with the watermark sign flipped; by symmetry of the
    // construction the value is identical
    CHECK(anti_loss(teacher, policy, student, batch) == doctest::Approx(expected).epsilon(1e-5));
  }

  SUBCASE("sequence length must exceed the gram length") {
    auto teacher = CausalLM::init(tiny_cfg(), 3);
    auto policy = tiny_policy(4, 3, 1.0, teacher.config.vocab);
    const auto batch = random_batch(1, 3, teacher.config.vocab, 5);
    CHECK_THROWS_AS((void)sim_loss(teacher, policy, teacher, batch), std::invalid_argument);
  }
}

TEST_CASE("mapping_objective") {
  Graph g;
  auto sim = Graph::leaf(Tensor::scalar(0.3f));
  auto norm = Graph::leaf(Tensor::scalar(0.2f));
  CHECK(mapping_objective(g, sim, norm, 0.0)->data[0] == doctest::Approx(0.3));
  CHECK(mapping_objective(g, sim, norm, 1.0)->data[0] == doctest::Approx(0.5));
}

TEST_CASE("gen_anti_batch") {
  auto teacher = CausalLM::init(tiny_cfg(), 6);
  auto policy = tiny_policy(7, 1, 4.0, teacher.config.vocab);
  const std::vector<std::vector<int>> prompts(3, std::vector<int>{1, 2, 3, 4});

  SUBCASE("zero mapper reduces to unbiased teacher sampling at the same seed") {
    auto p0 = policy;
    std::fill(p0.mapper.param("out.w")->data.begin(), p0.mapper.param("out.w")->data.end(), 0.f);
    std::fill(p0.mapper.param("out.b")->data.begin(), p0.mapper.param("out.b")->data.end(), 0.f);
    const auto anti = gen_anti_batch(teacher, p0, prompts, 20, 9);
    const auto plain = sample_batch(teacher, prompts, 16, 1.0, nullptr, 9);
    for (int64_t b = 0; b < anti.batch; ++b) {
      const auto row = anti.row(b);
      CHECK(std::vector<int>(row.begin(), row.end()) == plain[static_cast<size_t>(b)]);
    }
  }

  SUBCASE("deterministic per seed") {
    const auto a = gen_anti_batch(teacher, policy, prompts, 20, 10);
    const auto b = gen_anti_batch(teacher, policy, prompts, 20, 10);
    CHECK(a.ids == b.ids);
    const auto c = gen_anti_batch(teacher, policy, prompts, 20, 11);
    CHECK(a.ids != c.ids);
  }

  SUBCASE("anti texts score below null texts") {
    // widen the mapper's per-token spread so the bias has teeth
    auto strong = policy;
    for (auto& v : strong.mapper.param("out.w")->data) v *= 20.f;
    std::vector<std::vector<int>> many_prompts(40, std::vector<int>{1, 2, 3, 4});
    const auto anti = gen_anti_batch(teacher, strong, many_prompts, 40, 12);
    const auto nulls = sample_batch(teacher, many_prompts, 36, 1.0, nullptr, 13);
    std::vector<double> z_anti, z_null;
    for (int64_t b = 0; b < anti.batch; ++b) {
      const auto row = anti.row(b);
      z_anti.push_back(detect_z(strong, std::vector<int>(row.begin(), row.end())).z);
    }
    for (const auto& t : nulls) z_null.push_back(detect_z(strong, t).z);
    CHECK(oracles::mean_of(z_anti) < oracles::mean_of(z_null));
  }
}

TEST_CASE("fpl_step") {
  auto teacher = CausalLM::init(tiny_cfg(), 20);
  auto policy = tiny_policy(21, 1, 1.0, teacher.config.vocab);
  const auto wm_batch = random_batch(2, 16, teacher.config.vocab, 22);
  const auto anti_batch = random_batch(2, 12, teacher.config.vocab, 23);

  SUBCASE("beta=0 is bit-exact to a plain sim-loss step") {
    TrainConfig cfg = tiny_train_cfg();
    cfg.beta = 0.0;
    auto s1 = teacher.clone();
    s1.set_trainable(true);
    auto s2 = teacher.clone();
    s2.set_trainable(true);
    auto opt1 = AdamWState::init(s1.trainable_params(), cfg.max_lr);
    auto opt2 = AdamWState::init(s2.trainable_params(), cfg.max_lr);

    fpl_step(s1, teacher, policy, wm_batch, anti_batch, cfg, opt1, 1.0);

    {  // the plain step, spelled out
      Graph g;
      auto loss = watermarked_kl(g, teacher, policy, s2, wm_batch, +1.0, true, false);
      for (auto& p : s2.trainable_params()) p->zero_grad();
      g.backward(loss);
      clip_grad_norm(s2.trainable_params(), cfg.grad_clip);
      opt2.step(s2.trainable_params(), 1.0);
    }
    CHECK(s1.checksum() == s2.checksum());
  }

  SUBCASE("beta>0 matches an independent replication of the update rule") {
    // replicates sim/anti/perturbed passes by hand; bit-equality of the final
    // parameters also certifies that the temporary perturbation was restored
    // exactly (any residue would shift the update base)
    TrainConfig cfg = tiny_train_cfg();
    cfg.beta = 5.0;
    cfg.alpha = 0.1;
    auto s1 = teacher.clone();
    s1.set_trainable(true);
    auto s2 = teacher.clone();
    s2.set_trainable(true);
    auto opt1 = AdamWState::init(s1.trainable_params(), cfg.max_lr);
    auto opt2 = AdamWState::init(s2.trainable_params(), cfg.max_lr);

    const auto rec = fpl_step(s1, teacher, policy, wm_batch, anti_batch, cfg, opt1, 1.0);
    CHECK(rec.l_anti_pre > 0.0);
    CHECK_FALSE(rec.perturbation_skipped);

    {
      auto params = s2.trainable_params();
      auto snap = [&] {
        std::vector<std::vector<float>> g;
        for (const auto& p : params) g.push_back(p->grad);
        return g;
      };
      Graph ga;
      auto l_sim = watermarked_kl(ga, teacher, policy, s2, wm_batch, +1.0, true, false);
      for (auto& p : params) p->zero_grad();
      ga.backward(l_sim);
      const auto g_sim = snap();

      Graph gb;
      auto l_anti = watermarked_kl(gb, teacher, policy, s2, anti_batch, -1.0, true, false);
      for (auto& p : params) p->zero_grad();
      gb.backward(l_anti);
      const auto g_anti = snap();
      double sq = 0;
      for (const auto& g : g_anti)
        for (float v : g) sq += static_cast<double>(v) * static_cast<double>(v);
      const double norm = std::sqrt(sq);

      std::vector<std::vector<float>> saved;
      for (const auto& p : params) saved.push_back(p->data);
      for (size_t pi = 0; pi < params.size(); ++pi)
        for (size_t i = 0; i < params[pi]->data.size(); ++i)
          params[pi]->data[i] = static_cast<float>(static_cast<double>(params[pi]->data[i]) -
                                                   cfg.alpha / norm * static_cast<double>(g_anti[pi][i]));
      Graph gc;
      auto l_post = watermarked_kl(gc, teacher, policy, s2, anti_batch, -1.0, true, false);
      for (auto& p : params) p->zero_grad();
      gc.backward(l_post);
      const auto g_post = snap();
      for (size_t pi = 0; pi < params.size(); ++pi) params[pi]->data = saved[pi];

      for (size_t pi = 0; pi < params.size(); ++pi)
        for (size_t i = 0; i < params[pi]->grad.size(); ++i)
          params[pi]->grad[i] =
              g_sim[pi][i] + static_cast<float>(cfg.beta) * (g_anti[pi][i] - g_post[pi][i]);
      clip_grad_norm(params, cfg.grad_clip);
      opt2.step(params, 1.0);
      CHECK(std::abs(rec.l_anti_pre - static_cast<double>(l_anti->data[0])) < 1e-9);
      CHECK(std::abs(rec.l_anti_post - static_cast<double>(l_post->data[0])) < 1e-9);
    }
    CHECK(s1.checksum() == s2.checksum());
  }

  SUBCASE("mapper is never touched by the student update") {
    TrainConfig cfg = tiny_train_cfg();
    cfg.beta = 5.0;
    auto s = teacher.clone();
    s.set_trainable(true);
    auto opt = AdamWState::init(s.trainable_params(), cfg.max_lr);
    const uint64_t mapper_before = policy.mapper.checksum();
    fpl_step(s, teacher, policy, wm_batch, anti_batch, cfg, opt, 1.0);
    CHECK(policy.mapper.checksum() == mapper_before);
  }
}

TEST_CASE("train_cawp") {
  auto corpus = Corpus::from_bytes(synth_text(60000, 30), 0.8, 0.1, 30);

  SUBCASE("steps=0 leaves the student unchanged") {
    auto teacher = CausalLM::init(tiny_cfg(Vocab::kSize), 31);
    auto student = teacher.clone();
    student.set_trainable(true);
    auto policy = tiny_policy(32, 1, 1.0, Vocab::kSize);
    TrainConfig cfg = tiny_train_cfg();
    cfg.steps = 0;
    const uint64_t before = teacher.checksum();
    const auto log = train_cawp(teacher, student, policy, corpus, cfg);
    CHECK(log.records.empty());
    CHECK(student.checksum() == before);
  }

  SUBCASE("teacher frozen, loop deterministic, vulnerability gap mostly nonnegative") {
    auto teacher = CausalLM::init(tiny_cfg(Vocab::kSize), 33);
    auto policy_a = tiny_policy(34, 1, 1.0, Vocab::kSize);
    // widen the initial watermark so the anti loss is non-degenerate at this
    // scale (a near-zero watermark leaves nothing for a normalized step to
    // descend on)
    for (auto& v : policy_a.mapper.param("out.w")->data) v *= 10.f;
    auto policy_b = tiny_policy(34, 1, 1.0, Vocab::kSize);
    for (auto& v : policy_b.mapper.param("out.w")->data) v *= 10.f;
    TrainConfig cfg = tiny_train_cfg();
    cfg.steps = 200;
    cfg.beta = 5.0;
    cfg.alpha = 0.1;

    const uint64_t teacher_before = teacher.checksum();
    const uint64_t embedder_before = policy_a.embedder.table_checksum();

    auto student_a = teacher.clone();
    student_a.set_trainable(true);
    const auto log_a = train_cawp(teacher, student_a, policy_a, corpus, cfg);

    CHECK(teacher.checksum() == teacher_before);
    CHECK(policy_a.embedder.table_checksum() == embedder_before);
    CHECK(log_a.records.size() == 200);

    int nonneg = 0, considered = 0;
    for (const auto& r : log_a.records) {
      if (r.perturbation_skipped) continue;
      ++considered;
      nonneg += (r.vulnerability_gap() >= 0.0);
    }
    CHECK(considered > 0);
    CHECK(static_cast<double>(nonneg) / considered >= 0.95);

    // identical seeds and inputs: a second run agrees on every loss to 1e-6
    auto student_b = teacher.clone();
    student_b.set_trainable(true);
    const auto log_b = train_cawp(teacher, student_b, policy_b, corpus, cfg);
    REQUIRE(log_b.records.size() == log_a.records.size());
    for (size_t i = 0; i < log_a.records.size(); ++i)
      CHECK(std::abs(log_a.records[i].l_sim - log_b.records[i].l_sim) < 1e-6);
    CHECK(student_a.checksum() == student_b.checksum());
  }
}

TEST_CASE("distill_sampling") {
  auto teacher = CausalLM::init(tiny_cfg(Vocab::kSize), 40);
  KgwScheme scheme{.key = 41, .context_width = 0, .gamma = 0.25, .delta = 3.0, .vocab = Vocab::kSize};
  const std::vector<std::vector<int>> prompts(30, std::vector<int>{Vocab::kBos});
  const auto wm_texts = sample_batch(teacher, prompts, 60, 1.0, scheme.bias_fn(), 42);

  SUBCASE("empty dataset rejected") {
    auto s = teacher.clone();
    s.set_trainable(true);
    CHECK_THROWS_AS((void)distill_sampling(s, {}, CeTrainConfig{}), std::invalid_argument);
  }

  SUBCASE("lr=0 leaves the model unchanged") {
    auto s = teacher.clone();
    s.set_trainable(true);
    CeTrainConfig cfg;
    cfg.max_steps = 3;
    cfg.batch = 2;
    cfg.seq_len = 16;
    cfg.max_lr = 0.0;
    const uint64_t before = s.checksum();
    distill_sampling(s, wm_texts, cfg);
    CHECK(s.checksum() == before);
  }

  SUBCASE("held-out watermarked loss decreases and green ratio rises") {
    auto s = teacher.clone();
    s.set_trainable(true);
    CeTrainConfig cfg;
    cfg.max_steps = 200;
    cfg.batch = 4;
    cfg.seq_len = 24;
    cfg.max_lr = 3e-3;
    cfg.seed = 43;

    const auto heldout = sample_batch(teacher, std::vector<std::vector<int>>(10, std::vector<int>{Vocab::kBos}),
                                      60, 1.0, scheme.bias_fn(), 44);
    auto heldout_ce = [&](const CausalLM& m) {
      double total = 0;
      for (const auto& t : heldout) total += std::log(perplexity(m, t));
      return total / static_cast<double>(heldout.size());
    };
    const double ce_before = heldout_ce(s);
    distill_sampling(s, wm_texts, cfg);
    const double ce_after = heldout_ce(s);
    CHECK(ce_after < ce_before);

    // the distilled student drifts green: unwatermarked < student < teacher-with-bias
    const auto student_gen = sample_batch(s, prompts, 60, 1.0, nullptr, 45);
    const auto unwm_gen = sample_batch(teacher, prompts, 60, 1.0, nullptr, 45);
    const double r_unwm = green_ratio(scheme, unwm_gen);
    const double r_student = green_ratio(scheme, student_gen);
    const double r_teacher = green_ratio(scheme, wm_texts);
    CHECK(r_unwm < r_student);
    CHECK(r_student < r_teacher);
  }
}

TEST_CASE("distill_logit") {
  auto teacher = CausalLM::init(tiny_cfg(Vocab::kSize), 50);
  auto corpus = Corpus::from_bytes(synth_text(40000, 50), 0.9, 0.05, 50);

  SUBCASE("identity watermarker with student == teacher keeps loss at zero") {
    auto s = teacher.clone();
    s.set_trainable(true);
    CeTrainConfig cfg;
    cfg.max_steps = 3;
    cfg.batch = 2;
    cfg.seq_len = 16;
    cfg.max_lr = 0.0;  // evaluate without moving
    const auto res = distill_logit(s, teacher, IdentityWatermarker{}, corpus, cfg);
    for (double l : res.losses) CHECK(l == doctest::Approx(0.0).epsilon(1e-6));
  }

  SUBCASE("losses are nonnegative") {
    auto s = CausalLM::init(tiny_cfg(Vocab::kSize), 51);
    s.set_trainable(true);
    CeTrainConfig cfg;
    cfg.max_steps = 3;
    cfg.batch = 2;
    cfg.seq_len = 16;
    cfg.max_lr = 1e-3;
    KgwScheme scheme{.key = 52, .context_width = 1, .gamma = 0.25, .delta = 1.0, .vocab = Vocab::kSize};
    const auto res = distill_logit(s, teacher, KgwWatermarker{scheme}, corpus, cfg);
    for (double l : res.losses) CHECK(l >= 0.0);
  }

  SUBCASE("delta=2 distills to higher detection AUC than delta=1 at equal steps") {
    auto eval_auc = [&](double delta) {
      KgwScheme scheme{.key = 53, .context_width = 1, .gamma = 0.25, .delta = delta, .vocab = Vocab::kSize};
      auto s = teacher.clone();
      s.set_trainable(true);
      CeTrainConfig cfg;
      cfg.max_steps = 250;
      cfg.batch = 4;
      cfg.seq_len = 32;
      cfg.max_lr = 3e-3;
      cfg.seed = 54;
      distill_logit(s, teacher, KgwWatermarker{scheme}, corpus, cfg);

      const std::vector<std::vector<int>> prompts(100, std::vector<int>{Vocab::kBos});
      const auto wm = sample_batch(s, prompts, 120, 1.0, nullptr, 55);
      const auto nulls = sample_batch(teacher, prompts, 120, 1.0, nullptr, 56);
      std::vector<double> pos, neg;
      for (const auto& t : wm) pos.push_back(-kgw_detect(scheme, t).p_value);
      for (const auto& t : nulls) neg.push_back(-kgw_detect(scheme, t).p_value);
      return roc_auc(pos, neg);
    };
    const double auc1 = eval_auc(1.0);
    const double auc2 = eval_auc(2.0);
    CHECK(auc2 > auc1);
  }
}
