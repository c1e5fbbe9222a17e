#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "fsmn/lm_data.hpp"
#include "fsmn/synthetic.hpp"

using namespace fsmn;

TEST(Vocab, SmallStream) {
  auto v = build_vocab("a a b", 10);
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"a", "b", "<unk>"}));
  EXPECT_EQ(v.id("zzz"), v.unk_id());
  EXPECT_EQ(v.pad_id(), 3u);
}

TEST(Vocab, TruncationKeepsMostFrequent) {
  auto v = build_vocab("c c c a b d e\nb", 2);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"c", "<unk>"}));
  for (const char* t : {"a", "b", "d", "e"}) EXPECT_EQ(v.id(t), v.unk_id());
}

TEST(Vocab, TiesBrokenLexicographically) {
  auto v = build_vocab("q p r p r q", 3);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"p", "q", "<unk>"}));
}

TEST(Vocab, DeterministicAndRoundTrips) {
  const std::string text = "the cat sat\non the mat\nthe end";
  auto a = build_vocab(text, 100), b = build_vocab(text, 100);
  EXPECT_EQ(a, b);
  std::stringstream ss;
  a.save(ss);
  EXPECT_EQ(Vocab::load(ss), a);
}

TEST(Vocab, Errors) {
  EXPECT_THROW(build_vocab("", 10), InputError);
  EXPECT_THROW(build_vocab(" \n\t\n", 10), InputError);
  EXPECT_THROW(Vocab({"a", "a", "<unk>"}), FormatError);
  EXPECT_THROW(Vocab({"a", "b"}), FormatError);
}

TEST(Corpus, EncodeDecode) {
  auto v = build_vocab("x y z\ny z", 10);
  auto c = encode_corpus("x y\n\nz q y\n", v);
  ASSERT_EQ(c.sentences.size(), 2u);
  EXPECT_EQ(c.sentences[0], (std::vector<std::uint32_t>{*v.find("x"), *v.find("y")}));
  EXPECT_EQ(c.sentences[1][1], v.unk_id());
  EXPECT_EQ(decode(std::span<const std::uint32_t>(c.sentences[0]), v), "x y");
  EXPECT_EQ(c.tokens(), 5u);
}

TEST(Corpus, OptionalEndOfSentence) {
  TextOptions opt{true};
  auto v = build_vocab("a b\nb", 10, opt);
  ASSERT_TRUE(v.find(kEosToken));
  auto c = encode_corpus("a b\nb", v, opt);
  EXPECT_EQ(c.sentences[0].back(), *v.find(kEosToken));
  EXPECT_EQ(c.tokens(), 5u);
  EXPECT_THROW(encode_corpus("a", build_vocab("a", 5), opt), InputError);
}

TEST(Frames, WindowTwoAlignment) {
  const std::uint32_t P = 99;
  std::vector<std::uint32_t> seq{1, 2, 3};
  auto f = make_lm_frames(std::span<const std::uint32_t>(seq), 2, P);
  EXPECT_EQ(f.inputs, (std::vector<std::uint32_t>{P, P, P, 1, 1, 2}));
  EXPECT_EQ(f.targets, seq);
  auto bigram = make_lm_frames(std::span<const std::uint32_t>(seq), 1, P);
  EXPECT_EQ(bigram.inputs, (std::vector<std::uint32_t>{P, 1, 2}));
}

TEST(Frames, CountEqualsLengthForAnyWindow) {
  for (std::size_t len = 1; len <= 6; ++len)
    for (std::size_t w = 1; w <= 5; ++w) {
      std::vector<std::uint32_t> seq(len, 4);
      auto f = make_lm_frames(std::span<const std::uint32_t>(seq), w, 0);
      EXPECT_EQ(f.targets.size(), len);
      EXPECT_EQ(f.inputs.size(), len * w);
    }
  std::vector<std::uint32_t> empty;
  EXPECT_THROW(make_lm_frames(std::span<const std::uint32_t>(empty), 2, 0), InputError);
  std::vector<std::uint32_t> one{1};
  EXPECT_THROW(make_lm_frames(std::span<const std::uint32_t>(one), 0, 0), InputError);
}

namespace {
Corpus five_sentences() {
  Corpus c;
  for (std::uint32_t i = 0; i < 5; ++i) c.sentences.push_back(std::vector<std::uint32_t>(i + 1, i));
  return c;
}
}  // namespace

TEST(Batching, SizesAndBoundaries) {
  auto c = five_sentences();
  auto s = pack_minibatch(c, 2, std::nullopt, 2, 9);
  std::vector<std::size_t> sizes, frames;
  while (auto b = s.next()) {
    sizes.push_back(b->sequences());
    frames.push_back(b->frames());
    EXPECT_EQ(b->targets.size(), b->frames());
    EXPECT_EQ(b->context.size(), b->frames() * 2);
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{2, 2, 1}));
  EXPECT_EQ(frames, (std::vector<std::size_t>{3, 7, 5}));
  auto single = pack_minibatch(c, 1, std::nullopt, 1, 9);
  EXPECT_EQ(single.next()->lengths, (std::vector<std::size_t>{1}));
  EXPECT_THROW(pack_minibatch(c, 0, std::nullopt, 1, 9), InputError);
}

TEST(Batching, SeededOrderIsDeterministicAndConservesFrames) {
  auto c = five_sentences();
  auto order = [&](std::uint64_t seed) {
    std::vector<std::size_t> lens;
    std::size_t frames = 0;
    auto s = pack_minibatch(c, 2, seed, 2, 9);
    while (auto b = s.next()) {
      lens.insert(lens.end(), b->lengths.begin(), b->lengths.end());
      frames += b->frames();
    }
    EXPECT_EQ(frames, c.tokens());
    return lens;
  };
  EXPECT_EQ(order(3), order(3));
  std::set<std::vector<std::size_t>> seen;
  for (std::uint64_t s = 0; s < 10; ++s) seen.insert(order(s));
  EXPECT_GT(seen.size(), 1u);
}

TEST(Synthetic, DeterministicAndSized) {
  SyntheticCorpusOptions o;
  auto a = generate_topic_corpus(o, 50, 5, 5), b = generate_topic_corpus(o, 50, 5, 5);
  EXPECT_EQ(a.train, b.train);
  auto v = build_vocab(a.train, 5000);
  auto c = encode_corpus(a.train, v);
  EXPECT_EQ(c.sentences.size(), 50u);
  for (const auto& s : c.sentences) {
    EXPECT_GE(s.size(), o.min_length);
    EXPECT_LE(s.size(), o.max_length);
  }
  o.seed = 3;
  EXPECT_NE(generate_topic_corpus(o, 50, 5, 5).train, a.train);
}
