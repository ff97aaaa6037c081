#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace wm {

// Byte-level vocabulary: ids 0..255 are raw bytes, then BOS/EOS/PAD.
struct Vocab {
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;
  static constexpr int kPad = 258;
  static constexpr int kSize = 259;

  static std::vector<int> encode(std::string_view text);
  // Strict inverse of encode: throws on any id outside 0..255.
  static std::string decode(std::span<const int> ids);
  // Display form: special ids are dropped, bytes pass through.
  static std::string decode_lossy(std::span<const int> ids);
};

enum class Split { train, val, heldout };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

// Tokenized text stream with train/val/heldout boundaries. The heldout split
// is never seen by watermark training; it feeds the fine-tuning harness.
struct Corpus {
  struct Source {
    std::string path;
    uint64_t bytes = 0;
  };

  std::vector<int> tokens;  // BOS <file bytes> EOS per source file
  std::vector<Source> sources;
  uint64_t seed = 0;
  int64_t train_end = 0;  // [0, train_end) train
  int64_t val_end = 0;    // [train_end, val_end) val, rest heldout

  int64_t size() const { return static_cast<int64_t>(tokens.size()); }
  std::pair<int64_t, int64_t> split_range(Split s) const;
  int64_t split_size(Split s) const;

  // Manifest format: {"files": [...], "splits": {"train": f, "val": f,
  // "heldout": f}, "seed": n}. Fractions must sum to 1.
  static Corpus load_manifest(const std::string& manifest_path);
  static Corpus from_bytes(std::string_view text, double train_frac, double val_frac, uint64_t seed);

  // Fixed-length prompt prefixes sampled from a split, for generation runs.
  std::vector<std::vector<int>> sample_prompts(Split s, int count, int prompt_len, uint64_t seed) const;
};

// One B x L block of token ids.
struct TokenBatch {
  int64_t batch = 0;
  int64_t seq = 0;
  std::vector<int> ids;  // row-major [batch x seq]

  std::span<const int> row(int64_t b) const { return {ids.data() + b * seq, static_cast<size_t>(seq)}; }
};

// Deterministic window batcher: the split is cut into non-overlapping length-L
// windows, each epoch visits them in a freshly seeded permutation, and
// batches take B windows at a time. Epoch e uses mix_seed(seed, e), so the
// full block sequence is a pure function of (corpus, split, L, B, seed).
class BatchIterator {
 public:
  BatchIterator(const Corpus& corpus, Split split, int64_t seq_len, int64_t batch, uint64_t seed);

  TokenBatch next();

  int64_t windows_per_epoch() const { return static_cast<int64_t>(order_.size()); }

 private:
  void reshuffle();

  const Corpus* corpus_;
  int64_t start_ = 0;
  int64_t seq_len_ = 0;
  int64_t batch_ = 0;
  uint64_t seed_ = 0;
  int64_t epoch_ = 0;
  size_t cursor_ = 0;
  std::vector<int> order_;
};

}  // namespace wm
