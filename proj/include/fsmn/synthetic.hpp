#pragma once

// Deterministic synthetic word corpus with long-range structure.
//
// Every sentence draws a hidden topic. Content words come mostly from that
// topic's private word list, so the words seen many positions back tell a
// model which content words are likely next. Function words follow a
// bigram-style rule on the previous word, which a short context window can
// already capture. A model that looks further back than its input window
// should therefore reach a lower perplexity than one that cannot.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fsmn/random.hpp"

namespace fsmn {

struct SyntheticCorpusOptions {
  std::size_t topics = 30;
  std::size_t words_per_topic = 40;
  std::size_t generic_words = 200;
  std::size_t function_words = 30;
  std::size_t min_length = 12;
  std::size_t max_length = 30;
  double function_rate = 0.35;
  double on_topic_rate = 0.8;
  std::uint64_t seed = 2015;
};

struct SyntheticText {
  std::string train, valid, test;
};

namespace detail {

class ZipfSampler {
 public:
  explicit ZipfSampler(std::size_t n) : cdf_(n) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) cdf_[i] = acc += 1.0 / double(i + 1);
    for (auto& c : cdf_) c /= acc;
  }
  std::size_t draw(Rng& rng) const {
    const double u = rng.uniform01();
    std::size_t lo = 0, hi = cdf_.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (cdf_[mid] > u) hi = mid;
      else lo = mid + 1;
    }
    return lo;
  }

 private:
  std::vector<double> cdf_;
};

}  // namespace detail

inline SyntheticText generate_topic_corpus(const SyntheticCorpusOptions& opt, std::size_t train_sentences,
                                           std::size_t valid_sentences, std::size_t test_sentences) {
  Rng rng(opt.seed);
  const detail::ZipfSampler topic_zipf(opt.words_per_topic), generic_zipf(opt.generic_words),
      function_zipf(opt.function_words);
  auto topic_word = [&](std::size_t k, std::size_t i) { return "t" + std::to_string(k) + "w" + std::to_string(i); };
  auto generic_word = [](std::size_t i) { return "g" + std::to_string(i); };
  auto function_word = [](std::size_t i) { return "f" + std::to_string(i); };

  auto sentence = [&]() {
    const std::size_t topic = rng.below(opt.topics);
    const std::size_t len = opt.min_length + rng.below(opt.max_length - opt.min_length + 1);
    std::string line;
    std::size_t prev_key = 0;
    for (std::size_t t = 0; t < len; ++t) {
      std::string w;
      if (rng.uniform01() < opt.function_rate) {
        // Usually determined by the previous word.
        const std::size_t f = rng.uniform01() < 0.7 ? prev_key % opt.function_words : function_zipf.draw(rng);
        w = function_word(f);
        prev_key = 7 * f + 3;
      } else if (rng.uniform01() < opt.on_topic_rate) {
        const std::size_t i = topic_zipf.draw(rng);
        w = topic_word(topic, i);
        prev_key = 13 * i + 1;
      } else {
        const std::size_t i = generic_zipf.draw(rng);
        w = generic_word(i);
        prev_key = 5 * i + 2;
      }
      if (!line.empty()) line += ' ';
      line += w;
    }
    return line + '\n';
  };

  SyntheticText out;
  for (std::size_t i = 0; i < train_sentences; ++i) out.train += sentence();
  for (std::size_t i = 0; i < valid_sentences; ++i) out.valid += sentence();
  for (std::size_t i = 0; i < test_sentences; ++i) out.test += sentence();
  return out;
}

}  // namespace fsmn
