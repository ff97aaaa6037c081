#include "wm/kgw.hpp"

#include <cmath>
#include <stdexcept>

#include "wm/rng.hpp"

namespace wm {

void KgwScheme::validate() const {
  if (context_width < 0) throw std::invalid_argument("kgw: context width must be >= 0");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("kgw: gamma must be in (0, 1)");
  if (delta < 0.0) throw std::invalid_argument("kgw: delta must be >= 0");
}

int KgwScheme::green_count_per_context() const {
  return static_cast<int>(std::lround(gamma * vocab));
}

std::vector<uint8_t> KgwScheme::green_mask(std::span<const int> prev) const {
  if (static_cast<int>(prev.size()) != context_width)
    throw std::invalid_argument("kgw: expected exactly k previous tokens");
  uint64_t id_sum = 0;
  for (int t : prev) id_sum += static_cast<uint64_t>(t);
  SplitMix64 rng(context_width == 0 ? mix_seed(key, 0x6b677730ULL) : mix_seed(key, id_sum));
  const auto perm = seeded_permutation(vocab, rng);
  std::vector<uint8_t> mask(static_cast<size_t>(vocab), 0);
  const int g = green_count_per_context();
  for (int i = 0; i < g; ++i) mask[static_cast<size_t>(perm[static_cast<size_t>(i)])] = 1;
  return mask;
}

std::vector<float> KgwScheme::bias(std::span<const int> prev) const {
  const auto mask = green_mask(prev);
  std::vector<float> b(mask.size(), 0.f);
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) b[i] = static_cast<float>(delta);
  return b;
}

BiasFn KgwScheme::bias_fn() const {
  const KgwScheme scheme = *this;
  return [scheme](std::span<const int> context, std::span<float> bias) {
    if (static_cast<int>(context.size()) < scheme.context_width) return;
    const auto mask = scheme.green_mask(context.subspan(context.size() - static_cast<size_t>(scheme.context_width)));
    for (size_t i = 0; i < bias.size(); ++i) bias[i] = mask[i] ? static_cast<float>(scheme.delta) : 0.f;
  };
}

KgwDetection kgw_detect(const KgwScheme& scheme, std::span<const int> text) {
  const int k = scheme.context_width;
  const auto len = static_cast<int64_t>(text.size());
  if (len <= k) throw std::invalid_argument("kgw_detect: text too short for context width");
  KgwDetection d;
  d.n_scored = len - k;
  for (int64_t t = k; t < len; ++t) {
    const auto mask = scheme.green_mask(text.subspan(static_cast<size_t>(t - k), static_cast<size_t>(k)));
    if (mask[static_cast<size_t>(text[static_cast<size_t>(t)])]) ++d.green_count;
  }
  // P[B > count] by direct summation: pmf(0) = (1-gamma)^N, then the ratio
  // recurrence pmf(j+1) = pmf(j) * (N-j)/(j+1) * gamma/(1-gamma).
  const int64_t N = d.n_scored;
  const double g = scheme.gamma;
  double pmf = std::pow(1.0 - g, static_cast<double>(N));
  double tail = 0.0;
  for (int64_t j = 0; j < N; ++j) {
    const double pmf_next = pmf * (static_cast<double>(N - j) / static_cast<double>(j + 1)) * (g / (1.0 - g));
    if (j + 1 > d.green_count) tail += pmf_next;
    pmf = pmf_next;
  }
  d.p_value = tail;
  return d;
}

}  // namespace wm
