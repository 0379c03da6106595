#pragma once
// Seeded synthetic text-classification corpora.
//
// Token id layout: 0 = padding, 1 = [CLS] (always the first token of a
// sample), then n_classes * keywords_per_class class keywords, then noise
// tokens up to vocab_size.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace prunefuse {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kFirstKeywordId = 2;
inline constexpr std::size_t kDefaultSeqLen = 32;

struct DatasetSpec {
  std::string name = "synthetic";
  int n_classes = 4;
  int vocab_size = 256;
  int n_train = 2048;
  int n_val = 512;
  int n_test = 512;
  double keyword_strength = 0.12;
  double noise_rate = 0.25;
  std::uint64_t seed = 0;
  int keywords_per_class = 3;
  // Sample length (including [CLS]) is uniform on [min_len, max_len].
  int min_len = 8;
  int max_len = 32;

  void validate() const;
  // Probability that a non-[CLS] position is a keyword of the sample's class.
  double keyword_probability() const { return keyword_strength * (1.0 - noise_rate); }
  int first_noise_id() const { return kFirstKeywordId + n_classes * keywords_per_class; }
  int keyword_id(int label, int k) const { return kFirstKeywordId + label * keywords_per_class + k; }
};

struct Sample {
  std::vector<int> tokens;
  int label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Corpus {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

// Deterministic in spec (seed included). Splits never share a token
// sequence and each split's class histogram is uniform within one sample.
Corpus generate_corpus(const DatasetSpec& spec);

/// Fixed-width batch: ids and mask are row-major [batch_size, seq_len].
struct TokenBatch {
  std::size_t batch_size = 0;
  std::size_t seq_len = kDefaultSeqLen;
  std::vector<int> ids;
  std::vector<int> mask;
  std::vector<int> labels;
  // Rows whose source sequence was empty (all padding).
  std::vector<bool> degenerate;

  std::size_t valid_tokens(std::size_t row) const;
};

// Pads with kPadId or truncates to the first max_len tokens.
TokenBatch tokenize_batch(std::span<const Sample> samples, std::size_t max_len = kDefaultSeqLen);

// Consecutive batches of at most batch_size over `order` (indices into samples).
std::vector<TokenBatch> make_batches(std::span<const Sample> samples, std::span<const std::size_t> order,
                                     std::size_t batch_size, std::size_t max_len = kDefaultSeqLen);
std::vector<TokenBatch> make_batches(std::span<const Sample> samples, std::size_t batch_size,
                                     std::size_t max_len = kDefaultSeqLen);

// Line-delimited records: "<label>\t<id> <id> ...".
void write_samples(std::ostream& out, std::span<const Sample> samples);
std::vector<Sample> read_samples(std::istream& in);

}  // namespace prunefuse
