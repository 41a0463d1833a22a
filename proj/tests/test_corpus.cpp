// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mnlm/corpus.hpp"

namespace {

using namespace mnlm;
using Tokens = std::vector<std::string>;

std::vector<Tokens> stream_from_counts(const std::map<std::string, int>& counts) {
  std::vector<Tokens> out(1);
  for (const auto& [tok, c] : counts)
    for (int i = 0; i < c; ++i) out[0].push_back(tok);
  return out;
}

Corpus corpus_of_lengths(const std::vector<std::size_t>& lengths) {
  std::vector<Tokens> text;
  for (auto n : lengths) text.emplace_back(n, "w");
  return make_corpus("x", text);
}

}  // namespace

TEST(Tokenize, LowercasesAndSplits) {
  EXPECT_EQ(tokenize_line("He drives a car ."), (Tokens{"he", "drives", "a", "car", "."}));
}

TEST(Tokenize, EmptyLine) { EXPECT_TRUE(tokenize_line("").empty()); }

TEST(Tokenize, WhitespaceRunsCollapse) { EXPECT_EQ(tokenize_line("  El   conduce "), (Tokens{"el", "conduce"})); }

TEST(Tokenize, TabsAndNonAsciiWhitespace) {
  EXPECT_EQ(tokenize_line("a\tb c　d"), (Tokens{"a", "b", "c", "d"}));
}

TEST(Tokenize, UnicodeLowercase) { EXPECT_EQ(tokenize_line("ÉCOLE Straße ΑΒΓ"), (Tokens{"école", "straße", "αβγ"})); }

TEST(Tokenize, InvalidUtf8ReportsLine) {
  try {
    tokenize_line("ok \xff bad", 17);
    FAIL() << "expected a decode error";
  } catch (const utf8::DecodeError& e) {
    EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
  }
  EXPECT_THROW(tokenize_line("\xc3"), utf8::DecodeError);
  EXPECT_THROW(tokenize_line("\xc0\xaf"), utf8::DecodeError);
}

TEST(Vocab, ThresholdAndOrder) {
  const auto v = build_vocab("en", stream_from_counts({{"a", 5}, {"b", 2}, {"c", 3}}), 3);
  EXPECT_EQ(v.tokens(), (Tokens{"a", "c", "<unk>"}));
  EXPECT_EQ(v.id_of("a"), 0);
  EXPECT_EQ(v.id_of("b"), v.unk_id());
  EXPECT_EQ(v.count_of(v.unk_id()), 2);
}

TEST(Vocab, BoundaryMinCount) {
  const auto v = build_vocab("en", stream_from_counts({{"a", 1}}), 1);
  EXPECT_EQ(v.tokens(), (Tokens{"a", "<unk>"}));
}

TEST(Vocab, TiesBrokenLexicographically) {
  const auto v = build_vocab("en", stream_from_counts({{"z", 2}, {"m", 2}, {"b", 2}, {"q", 4}}), 1);
  EXPECT_EQ(v.tokens(), (Tokens{"q", "b", "m", "z", "<unk>"}));
}

TEST(Vocab, EmptyStream) {
  EXPECT_THROW(build_vocab("en", std::vector<Tokens>{}, 1), CorpusError);
  EXPECT_THROW(build_vocab("en", std::vector<Tokens>{{}, {}}, 1), CorpusError);
}

TEST(Vocab, RejectsBadMinCountAndReservedTokens) {
  EXPECT_THROW(build_vocab("en", std::vector<Tokens>{{"a"}}, 0), std::invalid_argument);
  EXPECT_THROW(build_vocab("en", std::vector<Tokens>{{"a", "<s>"}}, 1), CorpusError);
  EXPECT_THROW(build_vocab("en", std::vector<Tokens>{{"</s>"}}, 1), CorpusError);
  EXPECT_THROW(build_vocab("en", std::vector<Tokens>{{"<unk>"}}, 1), CorpusError);
}

TEST(Vocab, Invariants) {
  Rng rng(11);
  std::vector<Tokens> text;
  for (int s = 0; s < 200; ++s) {
    Tokens t;
    for (int i = 0; i < 8; ++i) t.push_back("w" + std::to_string(rng.below(40) * rng.below(3)));
    text.push_back(t);
  }
  for (std::int64_t m : {1, 2, 5}) {
    const auto v = build_vocab("x", text, m);
    std::size_t unk_seen = 0;
    for (WordId id = 0; id < static_cast<WordId>(v.size()); ++id) {
      EXPECT_EQ(v.id_of(v.token_of(id)), id);
      if (v.token_of(id) == kUnkToken) {
        ++unk_seen;
      } else {
        EXPECT_GE(v.count_of(id), m);
        EXPECT_NE(v.token_of(id), kBosToken);
        EXPECT_NE(v.token_of(id), kEosToken);
      }
      if (id > 0 && id < v.unk_id()) EXPECT_GE(v.count_of(id - 1), v.count_of(id));
    }
    EXPECT_EQ(unk_seen, 1u);
    EXPECT_TRUE(v == build_vocab("x", text, m));
  }
}

TEST(Vocab, FromPartsRoundTripAndValidation) {
  const auto v = build_vocab("en", std::vector<Tokens>{{"a", "b", "a"}}, 1);
  const auto w = Vocabulary::from_parts("en", v.tokens(), v.counts(), v.min_count());
  EXPECT_TRUE(v == w);
  EXPECT_EQ(w.id_of("b"), 1);
  EXPECT_THROW(Vocabulary::from_parts("en", {"a"}, {1}, 1), CorpusError);
  EXPECT_THROW(Vocabulary::from_parts("en", {"a", "a", "<unk>"}, {1, 1, 0}, 1), CorpusError);
  EXPECT_THROW(Vocabulary::from_parts("en", {"a", "<unk>"}, {1}, 1), CorpusError);
}

TEST(Encode, UnkMapping) {
  const auto v = build_vocab("en", std::vector<Tokens>{{"a"}}, 1);
  EXPECT_EQ(encode_sentence(v, {"a", "zzz"})->ids, (std::vector<WordId>{0, v.unk_id()}));
  EXPECT_EQ(encode_sentence(v, {"a", "a"})->ids, (std::vector<WordId>{0, 0}));
  EXPECT_EQ(encode_sentence(v, {"x", "y", "z"})->ids, (std::vector<WordId>(3, v.unk_id())));
  EXPECT_FALSE(encode_sentence(v, {}).has_value());
}

TEST(CorpusBuild, DropsBlankLinesAndTruncates) {
  const auto c = make_corpus("en", {{"a", "b", "c"}, {}, {"a"}}, {1, 2});
  ASSERT_EQ(c.sentences.size(), 2u);
  EXPECT_EQ(c.sentences[0].size(), 2u);
  EXPECT_EQ(c.token_count(), 3u);
  EXPECT_FALSE(c.vocab.contains("c"));
}

TEST(CorpusBuild, EncodeWithExistingVocab) {
  const auto c = make_corpus("en", {{"a", "b"}});
  const auto d = encode_corpus(c.vocab, {{"b", "q"}, {}});
  ASSERT_EQ(d.sentences.size(), 1u);
  EXPECT_EQ(d.lang, "en");
  EXPECT_EQ(d.sentences[0].ids, (std::vector<WordId>{c.vocab.id_of("b"), c.vocab.unk_id()}));
}

TEST(CorpusBuild, ReadTokenizedFile) {
  const auto path = std::filesystem::temp_directory_path() / "mnlm_corpus_read.txt";
  {
    std::ofstream f(path);
    f << "The Cat\n\n  sat .\n";
  }
  const auto t = read_tokenized(path.string());
  EXPECT_EQ(t, (std::vector<Tokens>{{"the", "cat"}, {}, {"sat", "."}}));
  {
    std::ofstream f(path);
    f << "fine\nbad \xfe\n";
  }
  try {
    read_tokenized(path.string());
    FAIL();
  } catch (const utf8::DecodeError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::filesystem::remove(path);
  EXPECT_THROW(read_tokenized("/nonexistent/corpus.txt"), CorpusError);
}

TEST(Batches, CeilingDivision) {
  const auto c = corpus_of_lengths({1, 2, 3, 4, 5});
  const auto b = make_batches(c, 2, 1);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].rows, 2u);
  EXPECT_EQ(b[1].rows, 2u);
  EXPECT_EQ(b[2].rows, 1u);
}

TEST(Batches, Deterministic) {
  const auto c = corpus_of_lengths({1, 2, 3, 4, 5, 6, 7});
  const auto a = make_batches(c, 3, 99);
  const auto b = make_batches(c, 3, 99);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].ids, b[i].ids);
    EXPECT_EQ(a[i].lengths, b[i].lengths);
  }
}

TEST(Batches, PaddingAndMask) {
  Sentence s3{{1, 2, 3}}, s7{{1, 2, 3, 4, 5, 6, 7}};
  const Sentence* rows[] = {&s3, &s7};
  const auto b = pad_batch(rows);
  EXPECT_EQ(b.cols, 7u);
  std::size_t on0 = 0, on1 = 0;
  for (std::size_t t = 0; t < b.cols; ++t) {
    on0 += b.mask(0, t);
    on1 += b.mask(1, t);
    if (!b.mask(0, t)) EXPECT_EQ(b.at(0, t), kPadId);
  }
  EXPECT_EQ(on0, 3u);
  EXPECT_EQ(on1, 7u);
}

TEST(Batches, EmptyCorpusAndZeroBatchSize) {
  Corpus empty;
  EXPECT_THROW(make_batches(empty, 2, 0), CorpusError);
  EXPECT_THROW(make_batches(corpus_of_lengths({1}), 0, 0), std::invalid_argument);
}

TEST(Batches, TokenConservationAndCoverage) {
  Rng rng(4);
  std::vector<std::size_t> lengths;
  for (int i = 0; i < 97; ++i) lengths.push_back(1 + rng.below(20));
  std::vector<Tokens> text;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    Tokens t;
    for (std::size_t j = 0; j < lengths[i]; ++j) t.push_back("s" + std::to_string(i) + "_" + std::to_string(j));
    text.push_back(t);
  }
  const auto c = make_corpus("x", text);
  for (std::size_t bs : {1u, 7u, 64u, 200u}) {
    std::size_t cells = 0;
    std::multiset<WordId> firsts;
    for (const auto& b : make_batches(c, bs, 123)) {
      EXPECT_GE(b.rows, 1u);
      EXPECT_LE(b.rows, bs);
      for (std::size_t r = 0; r < b.rows; ++r) {
        firsts.insert(b.at(r, 0));
        for (std::size_t t = 0; t < b.cols; ++t) cells += b.mask(r, t);
      }
    }
    EXPECT_EQ(cells, c.token_count());
    std::multiset<WordId> expected;
    for (const auto& s : c.sentences) expected.insert(s.ids[0]);
    EXPECT_EQ(firsts, expected);
  }
}

TEST(Interleave, RoundRobin) {
  const std::size_t lens[] = {2, 2};
  const auto s = interleave_schedule(lens);
  const std::vector<ScheduleSlot> expected = {{0, 0, 0}, {1, 0, 0}, {0, 0, 1}, {1, 0, 1}};
  EXPECT_EQ(s, expected);
}

TEST(Interleave, ShorterStreamCycles) {
  const std::size_t lens[] = {1, 2};
  const auto s = interleave_schedule(lens);
  const std::vector<ScheduleSlot> expected = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 0, 1}};
  EXPECT_EQ(s, expected);
}

TEST(Interleave, FourLanguagesFairRounds) {
  const std::size_t lens[] = {3, 1, 5, 2};
  const auto s = interleave_schedule(lens);
  ASSERT_EQ(s.size(), 20u);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(s[r * 4 + l].lang, l);
}

TEST(Interleave, Errors) {
  const std::size_t one[] = {3};
  const std::size_t with_empty[] = {3, 0};
  EXPECT_THROW(interleave_schedule(one), std::invalid_argument);
  EXPECT_THROW(interleave_schedule(with_empty), std::invalid_argument);
}

TEST(Interleave, CycledStreamIsReshuffled) {
  std::vector<Tokens> small, large;
  for (int i = 0; i < 8; ++i) small.push_back({"a" + std::to_string(i)});
  for (int i = 0; i < 64; ++i) large.push_back({"b" + std::to_string(i)});
  std::vector<Corpus> corpora = {make_corpus("a", small), make_corpus("b", large)};
  Interleaver il(corpora, 4, 5);
  ASSERT_EQ(il.size(), 32u);
  // Language a: 2 batches per cycle; cycle 1 starts at step 4.
  std::vector<WordId> c0, c1;
  for (std::size_t step : {0u, 2u}) c0.insert(c0.end(), il.at(step).ids.begin(), il.at(step).ids.end());
  for (std::size_t step : {4u, 6u}) c1.insert(c1.end(), il.at(step).ids.begin(), il.at(step).ids.end());
  EXPECT_NE(c0, c1);
  std::sort(c0.begin(), c0.end());
  std::sort(c1.begin(), c1.end());
  EXPECT_EQ(c0, c1);
  for (std::size_t step = 0; step < il.size(); ++step) EXPECT_EQ(il.at(step).lang, step % 2);
}
