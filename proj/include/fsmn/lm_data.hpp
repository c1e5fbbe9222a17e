#pragma once

// Word-level language-model data: vocabulary, corpus encoding, context-window
// frames and packed mini-batches.
//
// Text format: UTF-8, one sentence per line, tokens separated by spaces or
// tabs. Vocabulary file: one token per line, line number (from 0) = id. The
// projection layer reserves one extra id, vocab.size(), for the
// start-of-sentence padding that fills the context window at a sentence head.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fsmn/batch.hpp"
#include "fsmn/errors.hpp"
#include "fsmn/random.hpp"

namespace fsmn {

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kEosToken = "</s>";

/// Splits on spaces, tabs and carriage returns.
inline std::vector<std::string_view> split_tokens(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Vocab {
 public:
  Vocab() = default;

  /// Tokens in id order; must be unique and contain the UNK token.
  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::uint32_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw FormatError("empty token at vocab id " + std::to_string(i));
      if (!index_.emplace(tokens_[i], i).second)
        throw FormatError("duplicate vocab token '" + tokens_[i] + "'");
    }
    auto it = index_.find(std::string(kUnkToken));
    if (it == index_.end()) throw FormatError("vocabulary lacks " + std::string(kUnkToken));
    unk_ = it->second;
  }

  std::size_t size() const { return tokens_.size(); }
  std::uint32_t unk_id() const { return unk_; }
  /// Start-of-sentence padding id, one past the last token.
  std::uint32_t pad_id() const { return static_cast<std::uint32_t>(tokens_.size()); }

  std::optional<std::uint32_t> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::uint32_t id(std::string_view token) const { return find(token).value_or(unk_); }
  const std::string& token(std::uint32_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(std::ostream& out) const {
    for (const auto& t : tokens_) out << t << '\n';
  }
  static Vocab load(std::istream& in) {
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      toks.push_back(line);
    }
    return Vocab(std::move(toks));
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> index_;
  std::uint32_t unk_ = 0;
};

struct TextOptions {
  /// Append an end-of-sentence token to every line.
  bool add_eos = false;
};

/// The max_size - 1 most frequent tokens, ties broken lexicographically,
/// followed by <unk>. An <unk> already present in the text is not counted.
inline Vocab build_vocab(std::string_view text, std::size_t max_size, const TextOptions& opt = {}) {
  if (max_size == 0) throw InputError("vocabulary size must be at least 1");
  std::map<std::string, std::size_t, std::less<>> counts;
  std::size_t seen = 0;
  for (auto line : split_lines(text)) {
    auto toks = split_tokens(line);
    if (toks.empty()) continue;
    for (auto t : toks) {
      ++seen;
      if (t == kUnkToken) continue;
      auto it = counts.find(t);
      if (it == counts.end()) counts.emplace(std::string(t), 1);
      else ++it->second;
    }
    if (opt.add_eos) ++counts[std::string(kEosToken)];
  }
  if (seen == 0) throw InputError("cannot build a vocabulary from an empty text");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < ranked.size() && tokens.size() + 1 < max_size; ++i)
    tokens.push_back(ranked[i].first);
  tokens.emplace_back(kUnkToken);
  return Vocab(std::move(tokens));
}

enum class Split { Train, Valid, Test };

struct Corpus {
  std::vector<std::vector<std::uint32_t>> sentences;
  Split split = Split::Train;

  std::size_t tokens() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.size();
    return n;
  }
};

/// One id sequence per non-empty line; unknown tokens map to <unk>.
inline Corpus encode_corpus(std::string_view text, const Vocab& vocab, const TextOptions& opt = {},
                            Split split = Split::Train) {
  Corpus c;
  c.split = split;
  std::optional<std::uint32_t> eos;
  if (opt.add_eos) {
    eos = vocab.find(kEosToken);
    if (!eos) throw InputError("vocabulary lacks " + std::string(kEosToken));
  }
  for (auto line : split_lines(text)) {
    auto toks = split_tokens(line);
    if (toks.empty()) continue;
    std::vector<std::uint32_t> ids;
    ids.reserve(toks.size() + 1);
    for (auto t : toks) ids.push_back(vocab.id(t));
    if (eos) ids.push_back(*eos);
    c.sentences.push_back(std::move(ids));
  }
  return c;
}

inline std::string decode(std::span<const std::uint32_t> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

struct LmFrames {
  std::vector<std::uint32_t> inputs;   // frame-major, `window` ids per frame
  std::vector<std::uint32_t> targets;  // one per frame
};

/// Next-word prediction frames: frame t sees the `window` words before
/// position t (padded with `pad_id` at the sentence head) and predicts word t.
inline LmFrames make_lm_frames(std::span<const std::uint32_t> seq, std::size_t window, std::uint32_t pad_id) {
  if (window == 0) throw InputError("context window must be at least 1");
  if (seq.empty()) throw InputError("cannot build frames for an empty sequence");
  LmFrames f;
  f.inputs.reserve(seq.size() * window);
  f.targets.assign(seq.begin(), seq.end());
  for (std::size_t t = 0; t < seq.size(); ++t)
    for (std::size_t w = 0; w < window; ++w) {
      const std::ptrdiff_t src = std::ptrdiff_t(t) - std::ptrdiff_t(window) + std::ptrdiff_t(w);
      f.inputs.push_back(src < 0 ? pad_id : seq[src]);
    }
  return f;
}

/// Pull-based stream of packed batches: K sentences at a time, in a seeded
/// shuffled order (or corpus order without a seed); the last batch may be
/// smaller.
class BatchStream {
 public:
  BatchStream(const Corpus& corpus, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
              std::size_t window, std::uint32_t pad_id)
      : corpus_(&corpus), k_(batch_size), window_(window), pad_(pad_id) {
    if (batch_size == 0) throw InputError("batch size must be at least 1");
    if (window == 0) throw InputError("context window must be at least 1");
    order_.resize(corpus.sentences.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (shuffle_seed) {
      Rng rng(*shuffle_seed);
      rng.shuffle(order_.begin(), order_.end());
    }
  }

  std::size_t batch_count() const { return (order_.size() + k_ - 1) / k_; }

  std::optional<PackedBatch> next() {
    if (pos_ >= order_.size()) return std::nullopt;
    PackedBatch b;
    b.window = window_;
    const std::size_t end = std::min(order_.size(), pos_ + k_);
    for (; pos_ < end; ++pos_) {
      const auto& seq = corpus_->sentences[order_[pos_]];
      auto f = make_lm_frames(seq, window_, pad_);
      b.lengths.push_back(seq.size());
      b.context.insert(b.context.end(), f.inputs.begin(), f.inputs.end());
      b.targets.insert(b.targets.end(), f.targets.begin(), f.targets.end());
    }
    return b;
  }

 private:
  const Corpus* corpus_;
  std::size_t k_, window_;
  std::uint32_t pad_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline BatchStream pack_minibatch(const Corpus& corpus, std::size_t batch_size,
                                  std::optional<std::uint64_t> shuffle_seed, std::size_t window,
                                  std::uint32_t pad_id) {
  return BatchStream(corpus, batch_size, shuffle_seed, window, pad_id);
}

}  // namespace fsmn
