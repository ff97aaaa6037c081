#include "wm/kth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "wm/rng.hpp"

namespace wm {

KthScheme KthScheme::init(uint64_t key_seed, int m, int shifts, int vocab) {
  if (m < 1) throw std::invalid_argument("kth: m must be >= 1");
  if (shifts < 1 || shifts > m) throw std::invalid_argument("kth: shifts must be in [1, m]");
  KthScheme s;
  s.key_seed = key_seed;
  s.m = m;
  s.shifts = shifts;
  s.vocab = vocab;
  SplitMix64 rng(mix_seed(key_seed, 0x6b7468ULL));
  s.xi.assign(static_cast<size_t>(m), std::vector<float>(static_cast<size_t>(vocab)));
  for (auto& row : s.xi)
    for (auto& v : row) v = static_cast<float>(rng.next_double());
  return s;
}

std::vector<int> KthScheme::shift_set() const {
  std::vector<int> out;
  const int stride = m / shifts;
  for (int i = 0; i < shifts; ++i) out.push_back(i * stride);
  return out;
}

int KthScheme::select_token(std::span<const double> p, int64_t position, int tau) const {
  if (static_cast<int>(p.size()) != vocab) throw std::invalid_argument("kth select_token: bad distribution size");
  if (position < 1) throw std::invalid_argument("kth select_token: position must be >= 1");
  const auto& key = xi[static_cast<size_t>((position - 1 + tau) % m)];
  int best = -1;
  double best_ratio = -1.0;
  for (int i = 0; i < vocab; ++i) {
    const double pi = p[static_cast<size_t>(i)];
    if (pi < 1e-12) continue;
    const double ratio = static_cast<double>(key[static_cast<size_t>(i)]) / pi;
    if (ratio > best_ratio) {
      best_ratio = ratio;
      best = i;
    }
  }
  if (best < 0) throw std::invalid_argument("kth select_token: no token with positive probability");
  return best;
}

std::vector<int> KthScheme::generate(const CausalLM& model, std::span<const int> prompt, int max_new, int tau) const {
  if (prompt.empty()) throw std::invalid_argument("kth generate: prompt must be nonempty");
  std::vector<int> out(prompt.begin(), prompt.end());
  InferCtx ctx(model);
  const std::vector<float>* logits = nullptr;
  for (size_t i = 0; i + 1 < prompt.size(); ++i) ctx.step(prompt[i]);
  logits = &ctx.step(prompt.back());
  std::vector<double> p(static_cast<size_t>(vocab));
  for (int t = 0; t < max_new; ++t) {
    if (static_cast<int>(out.size()) >= model.config.max_seq) break;
    double mx = -1e300;
    for (float l : *logits) mx = std::max(mx, static_cast<double>(l));
    double sum = 0.0;
    for (int i = 0; i < vocab; ++i) {
      p[static_cast<size_t>(i)] = std::exp(static_cast<double>((*logits)[static_cast<size_t>(i)]) - mx);
      sum += p[static_cast<size_t>(i)];
    }
    for (auto& v : p) v /= sum;
    const int tok = select_token(p, static_cast<int64_t>(out.size()), tau);
    out.push_back(tok);
    if (t + 1 < max_new) logits = &ctx.step(tok);
  }
  return out;
}

double kth_alignment_cost(const KthScheme& scheme, std::span<const int> text) {
  if (text.empty()) throw std::invalid_argument("kth_alignment_cost: empty text");
  double best = 1e300;
  for (int off = 0; off < scheme.m; ++off) {
    double d = 0.0;
    for (size_t t = 0; t < text.size(); ++t) {
      double x = static_cast<double>(scheme.xi[static_cast<size_t>((off + static_cast<int>(t)) % scheme.m)]
                                              [static_cast<size_t>(text[t])]);
      x = std::min(x, 1.0 - 1e-9);
      d += std::log(1.0 - x);
    }
    best = std::min(best, d);
  }
  return best;
}

KthDetection kth_detect(const KthScheme& scheme, std::span<const int> text,
                        const std::vector<std::vector<int>>& reference_null) {
  if (reference_null.size() < 20) throw std::invalid_argument("kth_detect: need at least 20 reference texts");
  KthDetection det;
  det.d_min = kth_alignment_cost(scheme, text);
  int64_t leq = 0;
  const int64_t T = static_cast<int64_t>(reference_null.size());
#pragma omp parallel for schedule(dynamic) reduction(+ : leq)
  for (int64_t i = 0; i < T; ++i)
    if (kth_alignment_cost(scheme, reference_null[static_cast<size_t>(i)]) <= det.d_min) ++leq;
  det.p_value = static_cast<double>(1 + leq) / static_cast<double>(T + 1);
  return det;
}

}  // namespace wm
