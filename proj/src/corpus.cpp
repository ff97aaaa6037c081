#include "wm/corpus.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "wm/rng.hpp"

namespace wm {

std::vector<int> Vocab::encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id > 255) throw std::invalid_argument("decode: id " + std::to_string(id) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::string Vocab::decode_lossy(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids)
    if (id >= 0 && id <= 255) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return out;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::heldout: return "heldout";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "heldout") return Split::heldout;
  throw std::invalid_argument("unknown split: " + name);
}

std::pair<int64_t, int64_t> Corpus::split_range(Split s) const {
  switch (s) {
    case Split::train: return {0, train_end};
    case Split::val: return {train_end, val_end};
    case Split::heldout: return {val_end, size()};
  }
  return {0, 0};
}

int64_t Corpus::split_size(Split s) const {
  auto [lo, hi] = split_range(s);
  return hi - lo;
}

static Corpus build_from_stream(std::vector<int> tokens, std::vector<Corpus::Source> sources, double train_frac,
                                double val_frac, uint64_t seed) {
  if (train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1.0 + 1e-9)
    throw std::invalid_argument("corpus: split fractions out of range");
  Corpus c;
  c.tokens = std::move(tokens);
  c.sources = std::move(sources);
  c.seed = seed;
  const auto n = static_cast<double>(c.tokens.size());
  c.train_end = static_cast<int64_t>(n * train_frac);
  c.val_end = c.train_end + static_cast<int64_t>(n * val_frac);
  return c;
}

Corpus Corpus::from_bytes(std::string_view text, double train_frac, double val_frac, uint64_t seed) {
  std::vector<int> tokens;
  tokens.reserve(text.size() + 2);
  tokens.push_back(Vocab::kBos);
  for (unsigned char ch : text) tokens.push_back(static_cast<int>(ch));
  tokens.push_back(Vocab::kEos);
  return build_from_stream(std::move(tokens), {{"<memory>", text.size()}}, train_frac, val_frac, seed);
}

Corpus Corpus::load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open corpus manifest: " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("malformed corpus manifest: ") + e.what());
  }
  if (!j.contains("files") || !j["files"].is_array() || j["files"].empty())
    throw std::invalid_argument("corpus manifest: 'files' array required");
  const double train_frac = j.value("splits", nlohmann::json::object()).value("train", 0.8);
  const double val_frac = j.value("splits", nlohmann::json::object()).value("val", 0.1);
  const uint64_t seed = j.value("seed", 0ULL);

  std::vector<int> tokens;
  std::vector<Source> sources;
  for (const auto& f : j["files"]) {
    const std::string path = f.get<std::string>();
    std::ifstream file(path, std::ios::binary);
    if (!file) throw std::runtime_error("cannot open corpus file: " + path);
    std::ostringstream ss;
    ss << file.rdbuf();
    const std::string bytes = ss.str();
    tokens.push_back(Vocab::kBos);
    for (unsigned char ch : bytes) tokens.push_back(static_cast<int>(ch));
    tokens.push_back(Vocab::kEos);
    sources.push_back({path, bytes.size()});
  }
  return build_from_stream(std::move(tokens), std::move(sources), train_frac, val_frac, seed);
}

std::vector<std::vector<int>> Corpus::sample_prompts(Split s, int count, int prompt_len, uint64_t seed_in) const {
  auto [lo, hi] = split_range(s);
  if (hi - lo < prompt_len) throw std::invalid_argument("sample_prompts: split shorter than prompt length");
  SplitMix64 rng(mix_seed(seed_in, 0x70726f6d70ULL));
  std::vector<std::vector<int>> prompts;
  prompts.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int64_t start = lo + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(hi - lo - prompt_len + 1)));
    prompts.emplace_back(tokens.begin() + start, tokens.begin() + start + prompt_len);
  }
  return prompts;
}

BatchIterator::BatchIterator(const Corpus& corpus, Split split, int64_t seq_len, int64_t batch, uint64_t seed)
    : corpus_(&corpus), seq_len_(seq_len), batch_(batch), seed_(seed) {
  auto [lo, hi] = corpus.split_range(split);
  start_ = lo;
  const int64_t n_windows = (hi - lo) / seq_len;
  if (n_windows < batch)
    throw std::invalid_argument("batch_windows: split has fewer than batch*seq_len tokens");
  order_.resize(static_cast<size_t>(n_windows));
  reshuffle();
}

void BatchIterator::reshuffle() {
  SplitMix64 rng(mix_seed(seed_, static_cast<uint64_t>(epoch_)));
  auto perm = seeded_permutation(static_cast<int>(order_.size()), rng);
  order_ = std::move(perm);
  cursor_ = 0;
}

TokenBatch BatchIterator::next() {
  TokenBatch out;
  out.batch = batch_;
  out.seq = seq_len_;
  out.ids.reserve(static_cast<size_t>(batch_ * seq_len_));
  for (int64_t b = 0; b < batch_; ++b) {
    if (cursor_ >= order_.size()) {
      ++epoch_;
      reshuffle();
    }
    const int64_t w = order_[cursor_++];
    const int64_t begin = start_ + w * seq_len_;
    out.ids.insert(out.ids.end(), corpus_->tokens.begin() + begin, corpus_->tokens.begin() + begin + seq_len_);
  }
  return out;
}

}  // namespace wm
