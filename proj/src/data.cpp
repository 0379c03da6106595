#include "prunefuse/data.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "prunefuse/error.hpp"

namespace prunefuse {

void DatasetSpec::validate() const {
  require(n_classes >= 2 && n_classes <= 20, ErrorKind::kConfig,
          "dataset '" + name + "': n_classes must be in [2, 20], got " + std::to_string(n_classes));
  require(keywords_per_class >= 1, ErrorKind::kConfig, "dataset '" + name + "': keywords_per_class must be >= 1");
  require(vocab_size > first_noise_id(), ErrorKind::kConfig,
          "dataset '" + name + "': vocab_size " + std::to_string(vocab_size) + " leaves no noise tokens after " +
              std::to_string(first_noise_id()) + " reserved ids");
  require(keyword_strength >= 0.0 && keyword_strength <= 1.0, ErrorKind::kConfig,
          "dataset '" + name + "': keyword_strength must be in [0, 1]");
  require(noise_rate >= 0.0 && noise_rate <= 1.0, ErrorKind::kConfig, "dataset '" + name + "': noise_rate must be in [0, 1]");
  require(n_train >= 0 && n_val >= 0 && n_test >= 0, ErrorKind::kConfig, "dataset '" + name + "': split sizes must be >= 0");
  require(min_len >= 1 && min_len <= max_len, ErrorKind::kConfig, "dataset '" + name + "': need 1 <= min_len <= max_len");
}

namespace {

std::vector<Sample> draw_split(const DatasetSpec& spec, int count, std::mt19937_64& rng,
                               std::set<std::vector<int>>& seen) {
  std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> kw_dist(0, spec.keywords_per_class - 1);
  std::uniform_int_distribution<int> noise_dist(spec.first_noise_id(), spec.vocab_size - 1);
  std::bernoulli_distribution is_keyword(spec.keyword_probability());

  std::vector<Sample> out;
  out.reserve(count);
  constexpr int kMaxAttempts = 1000;
  for (int i = 0; i < count; ++i) {
    const int label = i % spec.n_classes;
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      Sample s;
      s.label = label;
      const int len = len_dist(rng);
      s.tokens.reserve(len);
      s.tokens.push_back(kClsId);
      for (int p = 1; p < len; ++p)
        s.tokens.push_back(is_keyword(rng) ? spec.keyword_id(label, kw_dist(rng)) : noise_dist(rng));
      if (seen.insert(s.tokens).second) {
        out.push_back(std::move(s));
        placed = true;
      }
    }
    require(placed, ErrorKind::kConfig,
            "dataset '" + spec.name + "': cannot draw enough distinct samples; enlarge vocab_size or max_len");
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace

Corpus generate_corpus(const DatasetSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::set<std::vector<int>> seen;
  Corpus c;
  c.train = draw_split(spec, spec.n_train, rng, seen);
  c.val = draw_split(spec, spec.n_val, rng, seen);
  c.test = draw_split(spec, spec.n_test, rng, seen);
  return c;
}

std::size_t TokenBatch::valid_tokens(std::size_t row) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < seq_len; ++t) n += mask[row * seq_len + t] != 0;
  return n;
}

TokenBatch tokenize_batch(std::span<const Sample> samples, std::size_t max_len) {
  TokenBatch b;
  b.batch_size = samples.size();
  b.seq_len = max_len;
  b.ids.assign(b.batch_size * max_len, kPadId);
  b.mask.assign(b.batch_size * max_len, 0);
  b.labels.reserve(b.batch_size);
  b.degenerate.reserve(b.batch_size);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const auto& toks = samples[r].tokens;
    const std::size_t keep = std::min(toks.size(), max_len);
    for (std::size_t t = 0; t < keep; ++t) {
      b.ids[r * max_len + t] = toks[t];
      b.mask[r * max_len + t] = 1;
    }
    b.labels.push_back(samples[r].label);
    b.degenerate.push_back(toks.empty());
  }
  return b;
}

std::vector<TokenBatch> make_batches(std::span<const Sample> samples, std::span<const std::size_t> order,
                                     std::size_t batch_size, std::size_t max_len) {
  require(batch_size > 0, ErrorKind::kInvalidArgument, "batch size must be positive");
  std::vector<TokenBatch> out;
  std::vector<Sample> chunk;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    chunk.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) chunk.push_back(samples[order[i]]);
    out.push_back(tokenize_batch(chunk, max_len));
  }
  return out;
}

std::vector<TokenBatch> make_batches(std::span<const Sample> samples, std::size_t batch_size, std::size_t max_len) {
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  return make_batches(samples, order, batch_size, max_len);
}

void write_samples(std::ostream& out, std::span<const Sample> samples) {
  for (const Sample& s : samples) {
    out << s.label << '\t';
    for (std::size_t i = 0; i < s.tokens.size(); ++i) out << (i ? " " : "") << s.tokens[i];
    out << '\n';
  }
}

std::vector<Sample> read_samples(std::istream& in) {
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    require(tab != std::string::npos, ErrorKind::kIo, "corpus line " + std::to_string(lineno) + ": missing tab separator");
    Sample s;
    std::istringstream head(line.substr(0, tab));
    require(static_cast<bool>(head >> s.label), ErrorKind::kIo, "corpus line " + std::to_string(lineno) + ": bad label");
    std::istringstream body(line.substr(tab + 1));
    int id;
    while (body >> id) s.tokens.push_back(id);
    require(body.eof(), ErrorKind::kIo, "corpus line " + std::to_string(lineno) + ": bad token id");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace prunefuse
