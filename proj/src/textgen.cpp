#include "wm/textgen.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "wm/rng.hpp"

namespace wm {

namespace {

// Pronounceable pseudo-word lexicon built from syllables. A few thousand
// distinct words keep the byte-level conditional distributions broad; a
// handful of short function words gives the text its connective tissue.
std::vector<std::string> build_lexicon(uint64_t seed, size_t n_words) {
  static constexpr std::array<const char*, 24> onsets = {"b",  "d",  "f",  "g",  "h",  "k",  "l",  "m",
                                                         "n",  "p",  "r",  "s",  "t",  "v",  "w",  "z",
                                                         "br", "ch", "cl", "gr", "pl", "sh", "st", "tr"};
  static constexpr std::array<const char*, 12> nuclei = {"a",  "e",  "i",  "o",  "u",  "ai",
                                                         "ea", "ee", "io", "ou", "oa", "ie"};
  static constexpr std::array<const char*, 14> codas = {"", "", "", "n", "r", "s", "t", "l", "m", "d", "ck", "ng", "st", "th"};

  SplitMix64 rng(mix_seed(seed, 0x6c6578ULL));
  std::vector<std::string> words;
  words.reserve(n_words);
  while (words.size() < n_words) {
    std::string w;
    const int syllables = 1 + static_cast<int>(rng.next_below(3)) + (rng.next_below(4) == 0 ? 1 : 0);
    for (int s = 0; s < syllables; ++s) {
      w += onsets[rng.next_below(onsets.size())];
      w += nuclei[rng.next_below(nuclei.size())];
      w += codas[rng.next_below(codas.size())];
    }
    if (w.size() >= 2 && w.size() <= 14) words.push_back(std::move(w));
  }
  return words;
}

}  // namespace

std::string synth_text(uint64_t n_bytes, uint64_t seed) {
  static constexpr std::array<const char*, 12> function_words = {"the", "of", "and", "to",   "a",    "in",
                                                                 "is",  "it", "for", "with", "that", "on"};
  const auto lexicon = build_lexicon(seed, 2400);

  SplitMix64 rng(mix_seed(seed, 0x74657874ULL));
  // flattened Zipf over the lexicon: offset keeps the head from dominating
  std::vector<double> cum;
  cum.reserve(lexicon.size());
  double total = 0.0;
  for (size_t i = 0; i < lexicon.size(); ++i) {
    total += 1.0 / std::pow(static_cast<double>(i + 12), 0.85);
    cum.push_back(total);
  }
  auto draw_word = [&]() -> const std::string& {
    const double u = rng.next_double() * total;
    size_t lo = 0, hi = cum.size() - 1;
    while (lo < hi) {
      const size_t mid = (lo + hi) / 2;
      if (cum[mid] < u)
        lo = mid + 1;
      else
        hi = mid;
    }
    return lexicon[lo];
  };

  std::string out;
  out.reserve(n_bytes + 64);
  int sentence_in_para = 0;
  int para_len = 4 + static_cast<int>(rng.next_below(4));
  while (out.size() < n_bytes) {
    const int words = 5 + static_cast<int>(rng.next_below(13));
    for (int w = 0; w < words; ++w) {
      std::string word;
      // roughly every third word is a connective
      if (w > 0 && rng.next_below(3) == 0)
        word = function_words[rng.next_below(function_words.size())];
      else
        word = draw_word();
      if (w == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
      out += word;
      if (w + 1 < words) out += (rng.next_below(14) == 0) ? ", " : " ";
    }
    out += (rng.next_below(20) == 0) ? "? " : ". ";
    if (++sentence_in_para >= para_len) {
      out += "\n\n";
      sentence_in_para = 0;
      para_len = 4 + static_cast<int>(rng.next_below(4));
    }
  }
  out.resize(n_bytes);
  return out;
}

}  // namespace wm
