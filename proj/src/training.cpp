#include "wm/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "wm/rng.hpp"

namespace wm {

void TrainConfig::validate() const {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("train config: alpha and beta must be >= 0");
  if (beta > 0.0 && alpha <= 0.0) throw std::invalid_argument("train config: beta > 0 requires alpha > 0");
  if (delta <= 0.0) throw std::invalid_argument("train config: delta must be > 0");
  if (epsilon < 0.0) throw std::invalid_argument("train config: epsilon must be >= 0");
  if (n < 1) throw std::invalid_argument("train config: n must be >= 1");
  if (seq_len <= n) throw std::invalid_argument("train config: seq_len must exceed n");
  if (anti_len <= std::max<int64_t>(n, anti_prompt_len))
    throw std::invalid_argument("train config: anti_len too short");
  if (steps < 0 || batch < 1 || anti_batch < 1 || anti_refresh < 1)
    throw std::invalid_argument("train config: bad loop sizes");
  if (max_lr <= 0.0 || grad_clip <= 0.0) throw std::invalid_argument("train config: bad lr or clip");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lambda1", lambda1},       {"lambda2", lambda2},
          {"alpha", alpha},           {"beta", beta},
          {"delta", delta},           {"epsilon", epsilon},
          {"n", n},                   {"steps", steps},
          {"batch", batch},           {"seq_len", seq_len},
          {"max_lr", max_lr},         {"warmup_frac", warmup_frac},
          {"grad_clip", grad_clip},   {"seed", seed},
          {"anti_refresh", anti_refresh}, {"anti_batch", anti_batch},
          {"anti_len", anti_len},     {"anti_prompt_len", anti_prompt_len}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.delta = j.value("delta", c.delta);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.n = j.value("n", c.n);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.max_lr = j.value("max_lr", c.max_lr);
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.anti_refresh = j.value("anti_refresh", c.anti_refresh);
  c.anti_batch = j.value("anti_batch", c.anti_batch);
  c.anti_len = j.value("anti_len", c.seq_len / 2);
  c.anti_prompt_len = j.value("anti_prompt_len", c.anti_prompt_len);
  return c;
}

nlohmann::json StepRecord::to_json() const {
  return {{"step", step},
          {"l_sim", l_sim},
          {"l_norm", l_norm},
          {"l_mapper", l_mapper},
          {"l_anti_pre", l_anti_pre},
          {"l_anti_post", l_anti_post},
          {"grad_norm", grad_norm},
          {"mapper_grad_norm", mapper_grad_norm},
          {"lr", lr},
          {"perturbation_skipped", perturbation_skipped}};
}

void TrainLog::write_jsonl(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write train log: " + path);
  for (const auto& r : records) f << r.to_json().dump() << "\n";
}

double lr_scale(int64_t step, int64_t total_steps, double warmup_frac) {
  if (total_steps <= 0) return 1.0;
  const auto warm = static_cast<int64_t>(warmup_frac * static_cast<double>(total_steps));
  if (warm > 0 && step < warm) return static_cast<double>(step + 1) / static_cast<double>(warm);
  const double progress =
      total_steps == warm ? 1.0 : static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return 0.5 * (1.0 + std::cos(3.141592653589793 * std::min(1.0, progress)));
}

// ------------------------------------------------------------- losses

namespace {

// Row indices of the logits that predict positions n..L-1 of every sequence.
std::vector<int64_t> scored_logit_rows(const TokenBatch& batch, int n) {
  std::vector<int64_t> rows;
  rows.reserve(static_cast<size_t>(batch.batch * (batch.seq - n)));
  for (int64_t b = 0; b < batch.batch; ++b)
    for (int64_t p = n; p < batch.seq; ++p) rows.push_back(b * batch.seq + p - 1);
  return rows;
}

// Flattened n-gram prefixes for those same positions.
std::vector<int> scored_contexts(const TokenBatch& batch, int n) {
  std::vector<int> ctx;
  ctx.reserve(static_cast<size_t>(batch.batch * (batch.seq - n) * n));
  for (int64_t b = 0; b < batch.batch; ++b)
    for (int64_t p = n; p < batch.seq; ++p)
      for (int g = 0; g < n; ++g) ctx.push_back(batch.ids[static_cast<size_t>(b * batch.seq + p - n + g)]);
  return ctx;
}

Tensor gather_tensor_rows(const Tensor& t, const std::vector<int64_t>& rows) {
  Tensor out({static_cast<int64_t>(rows.size()), t.cols()});
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data.begin() + rows[i] * t.cols(), t.cols(), out.data.begin() + static_cast<int64_t>(i) * t.cols());
  return out;
}

void zero_grads(const std::vector<Graph::Ptr>& params) {
  for (const auto& p : params) p->zero_grad();
}

std::vector<std::vector<float>> snapshot_grads(const std::vector<Graph::Ptr>& params) {
  std::vector<std::vector<float>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p->grad);
  return out;
}

double grad_l2(const std::vector<std::vector<float>>& grads) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (float v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(sq);
}

}  // namespace

Graph::Ptr watermarked_kl(Graph& g, const CausalLM& teacher, const WatermarkPolicy& policy,
                          const CausalLM& student, const TokenBatch& batch, double sign, bool student_grad,
                          bool mapper_grad, Graph::Ptr* raw_mapper_out) {
  const int n = policy.n;
  if (batch.seq <= n) throw std::invalid_argument("watermarked_kl: sequence length must exceed gram length");
  const auto rows = scored_logit_rows(batch, n);
  const auto contexts = scored_contexts(batch, n);
  const auto count = static_cast<int64_t>(rows.size());

  Tensor teacher_logits = forward_logits_nograd(teacher, batch);
  auto teacher_scored = Graph::constant(gather_tensor_rows(teacher_logits, rows));

  Tensor features = policy.embedder.embed_batch(contexts, count);
  Graph::Ptr mapper_raw;
  if (mapper_grad) {
    mapper_raw = policy.mapper.forward(g, Graph::constant(std::move(features)));
  } else {
    mapper_raw = Graph::constant(policy.mapper.forward_nograd(std::move(features)));
  }
  if (raw_mapper_out) *raw_mapper_out = mapper_raw;

  auto p_side = g.add_scaled(teacher_scored, mapper_raw, static_cast<float>(sign * policy.delta));

  Graph::Ptr student_scored;
  if (student_grad) {
    student_scored = g.gather_rows(forward_logits(g, student, batch), rows);
  } else {
    student_scored = Graph::constant(gather_tensor_rows(forward_logits_nograd(student, batch), rows));
  }
  return g.kl_rows_mean(p_side, student_scored);
}

double sim_loss(const CausalLM& teacher, const WatermarkPolicy& policy, const CausalLM& student,
                const TokenBatch& batch) {
  Graph g;
  g.set_recording(false);
  return static_cast<double>(watermarked_kl(g, teacher, policy, student, batch, +1.0, false, false)->data[0]);
}

double anti_loss(const CausalLM& teacher, const WatermarkPolicy& policy, const CausalLM& student,
                 const TokenBatch& batch) {
  Graph g;
  g.set_recording(false);
  return static_cast<double>(watermarked_kl(g, teacher, policy, student, batch, -1.0, false, false)->data[0]);
}

Graph::Ptr mapping_objective(Graph& g, Graph::Ptr sim, Graph::Ptr norm, double lambda2) {
  return g.add_scaled(std::move(sim), std::move(norm), static_cast<float>(lambda2));
}

TokenBatch gen_anti_batch(const CausalLM& teacher, const WatermarkPolicy& policy,
                          const std::vector<std::vector<int>>& prompts, int64_t len, uint64_t seed) {
  TokenBatch out;
  out.batch = static_cast<int64_t>(prompts.size());
  out.seq = len;
  out.ids.resize(static_cast<size_t>(out.batch * len));
  auto anti_bias = policy.bias_fn(-1.0);
  const auto rows = sample_batch(teacher, prompts, static_cast<int>(len - static_cast<int64_t>(prompts.empty() ? 0 : prompts[0].size())),
                                 1.0, anti_bias, seed);
  for (int64_t b = 0; b < out.batch; ++b) {
    const auto& row = rows[static_cast<size_t>(b)];
    if (static_cast<int64_t>(row.size()) != len)
      throw std::runtime_error("gen_anti_batch: sampled row has unexpected length");
    std::copy(row.begin(), row.end(), out.ids.begin() + b * len);
  }
  return out;
}

StepRecord fpl_step(CausalLM& student, const CausalLM& teacher, const WatermarkPolicy& policy,
                    const TokenBatch& wm_batch, const TokenBatch& anti_batch, const TrainConfig& cfg,
                    AdamWState& student_opt, double lr_scale_value) {
  StepRecord rec;
  const auto params = student.trainable_params();
  if (params.empty()) throw std::invalid_argument("fpl_step: student has no trainable parameters");

  Graph ga;
  auto l_sim = watermarked_kl(ga, teacher, policy, student, wm_batch, +1.0, true, false);
  rec.l_sim = static_cast<double>(l_sim->data[0]);
  zero_grads(params);
  ga.backward(l_sim);
  auto g_sim = snapshot_grads(params);

  if (cfg.beta > 0.0) {
    Graph gb;
    auto l_anti_pre = watermarked_kl(gb, teacher, policy, student, anti_batch, -1.0, true, false);
    rec.l_anti_pre = static_cast<double>(l_anti_pre->data[0]);
    zero_grads(params);
    gb.backward(l_anti_pre);
    auto g_anti = snapshot_grads(params);
    const double norm = grad_l2(g_anti);

    if (norm < 1e-12) {
      rec.perturbation_skipped = true;
      rec.l_anti_post = rec.l_anti_pre;
      for (size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = g_sim[pi];
    } else {
      // temporary normalized step along the forgetting gradient
      std::vector<std::vector<float>> saved;
      saved.reserve(params.size());
      for (const auto& p : params) saved.push_back(p->data);
      const double scale = cfg.alpha / norm;
      for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& d = params[pi]->data;
        const auto& gv = g_anti[pi];
        for (size_t i = 0; i < d.size(); ++i)
          d[i] = static_cast<float>(static_cast<double>(d[i]) - scale * static_cast<double>(gv[i]));
      }

      Graph gc;
      auto l_anti_post = watermarked_kl(gc, teacher, policy, student, anti_batch, -1.0, true, false);
      rec.l_anti_post = static_cast<double>(l_anti_post->data[0]);
      zero_grads(params);
      gc.backward(l_anti_post);
      auto g_anti_post = snapshot_grads(params);

      for (size_t pi = 0; pi < params.size(); ++pi) params[pi]->data = std::move(saved[pi]);

      const auto beta = static_cast<float>(cfg.beta);
      for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& dst = params[pi]->grad;
        const auto& gs = g_sim[pi];
        const auto& gp = g_anti[pi];
        const auto& gq = g_anti_post[pi];
        for (size_t i = 0; i < dst.size(); ++i) dst[i] = gs[i] + beta * (gp[i] - gq[i]);
      }
    }
  } else {
    for (size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = g_sim[pi];
  }

  rec.grad_norm = clip_grad_norm(params, cfg.grad_clip);
  student_opt.step(params, lr_scale_value);
  rec.lr = student_opt.lr * lr_scale_value;
  return rec;
}

TrainLog train_cawp(const CausalLM& teacher, CausalLM& student, WatermarkPolicy& policy, const Corpus& corpus,
                    const TrainConfig& cfg) {
  cfg.validate();
  TrainLog log;
  if (cfg.steps == 0) return log;

  auto student_params = student.trainable_params();
  if (student_params.empty()) throw std::invalid_argument("train_cawp: student is frozen");
  policy.mapper.set_trainable(true);
  auto mapper_params = policy.mapper.params();

  auto student_opt = AdamWState::init(student_params, cfg.max_lr);
  auto mapper_opt = AdamWState::init(mapper_params, cfg.max_lr);

  BatchIterator batches(corpus, Split::train, cfg.seq_len, cfg.batch, mix_seed(cfg.seed, 1));
  TokenBatch anti;

  for (int64_t step = 0; step < cfg.steps; ++step) {
    const double scale = lr_scale(step, cfg.steps, cfg.warmup_frac);
    TokenBatch wm_batch = batches.next();

    if (cfg.beta > 0.0 && step % cfg.anti_refresh == 0) {
      const auto prompts =
          corpus.sample_prompts(Split::train, cfg.anti_batch, cfg.anti_prompt_len, mix_seed(cfg.seed, 7000 + static_cast<uint64_t>(step)));
      anti = gen_anti_batch(teacher, policy, prompts, cfg.anti_len, mix_seed(cfg.seed, 9000 + static_cast<uint64_t>(step)));
    }

    StepRecord rec;
    try {
      rec = fpl_step(student, teacher, policy, wm_batch, anti, cfg, student_opt, scale);

      // mapper update at the already-updated student
      Graph gd;
      Graph::Ptr raw;
      auto l_sim_d = watermarked_kl(gd, teacher, policy, student, wm_batch, +1.0, false, true, &raw);
      auto l_norm = gd.watermark_norm_loss(raw, static_cast<float>(cfg.epsilon), static_cast<float>(cfg.lambda1));
      auto l_m = mapping_objective(gd, l_sim_d, l_norm, cfg.lambda2);
      rec.l_norm = static_cast<double>(l_norm->data[0]);
      rec.l_mapper = static_cast<double>(l_m->data[0]);
      zero_grads(mapper_params);
      gd.backward(l_m);
      rec.mapper_grad_norm = clip_grad_norm(mapper_params, cfg.grad_clip);
      mapper_opt.step(mapper_params, scale);
    } catch (const std::exception& e) {
      std::cerr << "{\"error\":\"train_cawp aborted\",\"step\":" << step << ",\"what\":\"" << e.what()
                << "\",\"batch_ids\":[";
      for (size_t i = 0; i < wm_batch.ids.size(); ++i)
        std::cerr << (i ? "," : "") << wm_batch.ids[i];
      std::cerr << "]}\n";
      throw;
    }
    rec.step = step;
    log.records.push_back(rec);
  }
  return log;
}

// ------------------------------------------------------------ pretraining

namespace {

// CE loss over one window batch: rows 0..L-2 predict tokens 1..L-1.
Graph::Ptr ce_batch_loss(Graph& g, CausalLM& model, const TokenBatch& batch) {
  auto logits = forward_logits(g, model, batch);
  std::vector<int64_t> rows;
  std::vector<int> targets;
  rows.reserve(static_cast<size_t>(batch.batch * (batch.seq - 1)));
  targets.reserve(rows.capacity());
  for (int64_t b = 0; b < batch.batch; ++b)
    for (int64_t t = 0; t + 1 < batch.seq; ++t) {
      rows.push_back(b * batch.seq + t);
      targets.push_back(batch.ids[static_cast<size_t>(b * batch.seq + t + 1)]);
    }
  return g.cross_entropy(g.gather_rows(logits, std::move(rows)), std::move(targets));
}

double eval_ce(CausalLM& model, const std::vector<TokenBatch>& batches) {
  double total = 0.0;
  for (const auto& b : batches) {
    Graph g;
    g.set_recording(false);
    total += static_cast<double>(ce_batch_loss(g, model, b)->data[0]);
  }
  return total / static_cast<double>(batches.size());
}

CeTrainResult run_ce_loop(CausalLM& model, BatchIterator& batches, const CeTrainConfig& cfg,
                          const std::vector<TokenBatch>& val_batches) {
  CeTrainResult res;
  auto params = model.trainable_params();
  if (params.empty()) throw std::invalid_argument("train_cross_entropy: model is frozen");
  AdamWState opt = cfg.max_lr > 0.0 ? AdamWState::init(params, cfg.max_lr) : AdamWState::init(params, 1.0);

  double best_val = 1e300;
  int stale = 0;
  for (int64_t step = 0; step < cfg.max_steps; ++step) {
    const double scale = cfg.cosine ? lr_scale(step, cfg.max_steps, cfg.warmup_frac) : 1.0;
    TokenBatch batch = batches.next();
    Graph g;
    auto loss = ce_batch_loss(g, model, batch);
    res.losses.push_back(static_cast<double>(loss->data[0]));
    zero_grads(params);
    g.backward(loss);
    clip_grad_norm(params, cfg.grad_clip);
    if (cfg.max_lr > 0.0) opt.step(params, scale);
    res.steps_run = step + 1;

    if (cfg.val_every > 0 && !val_batches.empty() && (step + 1) % cfg.val_every == 0) {
      const double v = eval_ce(model, val_batches);
      res.val_losses.emplace_back(step + 1, v);
      if (v < best_val * (1.0 - cfg.min_rel_improve)) {
        best_val = v;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  return res;
}

}  // namespace

CeTrainResult train_cross_entropy(CausalLM& model, const Corpus& corpus, const CeTrainConfig& cfg) {
  BatchIterator batches(corpus, cfg.split, cfg.seq_len, cfg.batch, mix_seed(cfg.seed, 11));
  std::vector<TokenBatch> val_batches;
  if (cfg.val_every > 0 && corpus.split_size(Split::val) >= cfg.batch * cfg.seq_len) {
    BatchIterator vb(corpus, Split::val, cfg.seq_len, cfg.batch, mix_seed(cfg.seed, 13));
    for (int i = 0; i < 4; ++i) val_batches.push_back(vb.next());
  }
  return run_ce_loop(model, batches, cfg, val_batches);
}

CeTrainResult distill_sampling(CausalLM& student, const std::vector<std::vector<int>>& wm_texts,
                               const CeTrainConfig& cfg) {
  if (wm_texts.empty()) throw std::invalid_argument("distill_sampling: empty dataset");
  std::vector<int> stream;
  for (const auto& t : wm_texts) {
    stream.insert(stream.end(), t.begin(), t.end());
    stream.push_back(Vocab::kEos);
  }
  Corpus c;
  c.tokens = std::move(stream);
  c.train_end = c.size();
  c.val_end = c.size();
  BatchIterator batches(c, Split::train, cfg.seq_len, cfg.batch, mix_seed(cfg.seed, 17));
  return run_ce_loop(student, batches, cfg, {});
}

void KgwWatermarker::target_logits(std::span<const int> row, int64_t p, int64_t /*seq_index*/,
                                   std::span<const float> teacher_logits, std::span<float> out) const {
  const int k = scheme_.context_width;
  const auto mask = scheme_.green_mask(row.subspan(static_cast<size_t>(p - k), static_cast<size_t>(k)));
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = teacher_logits[i] + (mask[i] ? static_cast<float>(scheme_.delta) : 0.f);
}

void KthWatermarker::target_logits(std::span<const int> /*row*/, int64_t p, int64_t seq_index,
                                   std::span<const float> teacher_logits, std::span<float> out) const {
  std::vector<double> probs(teacher_logits.size());
  double mx = -1e300;
  for (float l : teacher_logits) mx = std::max(mx, static_cast<double>(l));
  double sum = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    probs[i] = std::exp(static_cast<double>(teacher_logits[i]) - mx);
    sum += probs[i];
  }
  for (auto& v : probs) v /= sum;
  const auto taus = scheme_.shift_set();
  const int tau = taus[static_cast<size_t>(counter_hash(scheme_.key_seed, static_cast<uint64_t>(seq_index)) % taus.size())];
  const int sel = scheme_.select_token(probs, p, tau);
  // near-one-hot target in logit space
  for (auto& v : out) v = -40.f;
  out[static_cast<size_t>(sel)] = 40.f;
}

CeTrainResult distill_logit(CausalLM& student, const CausalLM& teacher, const DecodingWatermarker& wmk,
                            const Corpus& corpus, const CeTrainConfig& cfg) {
  BatchIterator batches(corpus, cfg.split, cfg.seq_len, cfg.batch, mix_seed(cfg.seed, 19));
  auto params = student.trainable_params();
  if (params.empty()) throw std::invalid_argument("distill_logit: student is frozen");
  AdamWState opt = cfg.max_lr > 0.0 ? AdamWState::init(params, cfg.max_lr) : AdamWState::init(params, 1.0);
  const int64_t p_min = std::max<int64_t>(1, wmk.min_context());

  CeTrainResult res;
  for (int64_t step = 0; step < cfg.max_steps; ++step) {
    const double scale = cfg.cosine ? lr_scale(step, cfg.max_steps, cfg.warmup_frac) : 1.0;
    TokenBatch batch = batches.next();

    Tensor teacher_logits = forward_logits_nograd(teacher, batch);
    std::vector<int64_t> rows;
    for (int64_t b = 0; b < batch.batch; ++b)
      for (int64_t p = p_min; p < batch.seq; ++p) rows.push_back(b * batch.seq + p - 1);
    Tensor targets({static_cast<int64_t>(rows.size()), teacher_logits.cols()});
    {
      int64_t i = 0;
      const int64_t v = teacher_logits.cols();
      for (int64_t b = 0; b < batch.batch; ++b)
        for (int64_t p = p_min; p < batch.seq; ++p, ++i) {
          std::span<const float> trow(teacher_logits.data.data() + rows[static_cast<size_t>(i)] * v,
                                      static_cast<size_t>(v));
          std::span<float> orow(targets.data.data() + i * v, static_cast<size_t>(v));
          wmk.target_logits(batch.row(b), p, b + batch.batch * step, trow, orow);
        }
    }

    Graph g;
    auto student_scored = g.gather_rows(forward_logits(g, student, batch), rows);
    auto loss = g.kl_rows_mean(Graph::constant(std::move(targets)), student_scored);
    res.losses.push_back(static_cast<double>(loss->data[0]));
    zero_grads(params);
    g.backward(loss);
    clip_grad_norm(params, cfg.grad_clip);
    if (cfg.max_lr > 0.0) opt.step(params, scale);
    res.steps_run = step + 1;
  }
  return res;
}

}  // namespace wm
