// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <clocale>
#include <cstdint>
#include <cwctype>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <locale.h>

#include "mnlm/random.hpp"

namespace mnlm {

using WordId = std::int32_t;

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// UTF-8 and tokenization
// ---------------------------------------------------------------------------

namespace utf8 {

class DecodeError : public CorpusError {
 public:
  DecodeError(std::size_t line, std::size_t byte_offset)
      : CorpusError("invalid UTF-8 at line " + std::to_string(line) + ", byte " + std::to_string(byte_offset)),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Decodes s into code points; returns the offset of the first invalid byte on failure.
inline std::optional<std::size_t> decode(std::string_view s, std::u32string& out) {
  out.clear();
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    char32_t cp;
    std::size_t len;
    if (b0 < 0x80) {
      cp = b0;
      len = 1;
    } else if ((b0 & 0xE0) == 0xC0) {
      cp = b0 & 0x1F;
      len = 2;
    } else if ((b0 & 0xF0) == 0xE0) {
      cp = b0 & 0x0F;
      len = 3;
    } else if ((b0 & 0xF8) == 0xF0) {
      cp = b0 & 0x07;
      len = 4;
    } else {
      return i;
    }
    if (i + len > s.size()) return i;
    for (std::size_t k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) return i;
      cp = (cp << 6) | (b & 0x3F);
    }
    // Overlong forms, surrogates and out-of-range values.
    static constexpr char32_t min_for_len[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < min_for_len[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return i;
    out.push_back(cp);
    i += len;
  }
  return std::nullopt;
}

inline void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Simple (one-to-one) Unicode case mapping via the C.UTF-8 locale tables.
inline char32_t to_lower(char32_t cp) {
  static const locale_t loc = [] {
    locale_t l = newlocale(LC_CTYPE_MASK, "C.UTF-8", static_cast<locale_t>(nullptr));
    if (l == static_cast<locale_t>(nullptr)) l = newlocale(LC_CTYPE_MASK, "C.utf8", static_cast<locale_t>(nullptr));
    return l;
  }();
  if (cp < 0x80) return (cp >= 'A' && cp <= 'Z') ? cp + 32 : cp;
  if (loc == static_cast<locale_t>(nullptr)) return cp;
  return static_cast<char32_t>(towlower_l(static_cast<wint_t>(cp), loc));
}

inline bool is_space(char32_t cp) {
  switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

}  // namespace utf8

// Lowercases line and splits it on runs of Unicode whitespace.
// line_number is only used in the error message.
inline std::vector<std::string> tokenize_line(std::string_view line, std::size_t line_number = 0) {
  std::u32string cps;
  if (auto bad = utf8::decode(line, cps)) throw utf8::DecodeError(line_number, *bad);
  std::vector<std::string> tokens;
  std::string cur;
  for (char32_t cp : cps) {
    if (utf8::is_space(cp)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      utf8::append(cur, utf8::to_lower(cp));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBosToken = "<s>";
inline constexpr std::string_view kEosToken = "</s>";

// Token <-> id bijection. Ids [0, V-1) are the retained words by descending
// frequency (ties: lexicographic); the last id is UNK.
class Vocabulary {
 public:
  Vocabulary() = default;

  // Rebuilds a vocabulary from stored parts (checkpoints). tokens must end with UNK.
  static Vocabulary from_parts(std::string lang, std::vector<std::string> tokens, std::vector<std::int64_t> counts,
                               std::int64_t min_count) {
    if (tokens.empty() || tokens.back() != kUnkToken || tokens.size() != counts.size())
      throw CorpusError("vocabulary: malformed token table");
    Vocabulary v;
    v.lang_ = std::move(lang);
    v.min_count_ = min_count;
    v.tokens_ = std::move(tokens);
    v.counts_ = std::move(counts);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      if (!v.index_.emplace(v.tokens_[i], static_cast<WordId>(i)).second)
        throw CorpusError("vocabulary: duplicate token '" + v.tokens_[i] + "'");
    }
    return v;
  }

  const std::string& lang() const { return lang_; }
  std::size_t size() const { return tokens_.size(); }
  WordId unk_id() const { return static_cast<WordId>(tokens_.size()) - 1; }
  std::int64_t min_count() const { return min_count_; }

  const std::string& token_of(WordId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::int64_t count_of(WordId id) const { return counts_.at(static_cast<std::size_t>(id)); }
  WordId id_of(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? unk_id() : it->second;
  }
  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::int64_t>& counts() const { return counts_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.lang_ == b.lang_ && a.tokens_ == b.tokens_ && a.counts_ == b.counts_ && a.min_count_ == b.min_count_;
  }

 private:
  template <typename Range>
  friend Vocabulary build_vocab(std::string lang, const Range& token_stream, std::int64_t min_count);

  std::string lang_;
  std::vector<std::string> tokens_;
  std::vector<std::int64_t> counts_;
  std::unordered_map<std::string, WordId> index_;
  std::int64_t min_count_ = 1;
};

// token_stream: any range of sentences, each a range of tokens.
template <typename Range>
Vocabulary build_vocab(std::string lang, const Range& token_stream, std::int64_t min_count) {
  if (min_count < 1) throw std::invalid_argument("build_vocab: min_count must be >= 1");
  std::map<std::string, std::int64_t> freq;
  std::int64_t total = 0;
  for (const auto& sentence : token_stream) {
    for (const auto& tok : sentence) {
      if (tok == kUnkToken || tok == kBosToken || tok == kEosToken)
        throw CorpusError("build_vocab: reserved token '" + std::string(tok) + "' in input");
      ++freq[std::string(tok)];
      ++total;
    }
  }
  if (total == 0) throw CorpusError("empty corpus");

  std::vector<std::pair<std::string, std::int64_t>> kept;
  std::int64_t unk = 0;
  for (auto& [tok, c] : freq) {
    if (c >= min_count)
      kept.emplace_back(tok, c);
    else
      unk += c;
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary v;
  v.lang_ = std::move(lang);
  v.min_count_ = min_count;
  for (auto& [tok, c] : kept) {
    v.index_.emplace(tok, static_cast<WordId>(v.tokens_.size()));
    v.tokens_.push_back(std::move(tok));
    v.counts_.push_back(c);
  }
  v.index_.emplace(std::string(kUnkToken), static_cast<WordId>(v.tokens_.size()));
  v.tokens_.emplace_back(kUnkToken);
  v.counts_.push_back(unk);
  return v;
}

// ---------------------------------------------------------------------------
// Sentences and corpora
// ---------------------------------------------------------------------------

struct Sentence {
  std::vector<WordId> ids;
  std::size_t size() const { return ids.size(); }
};

// Maps OOV tokens to UNK. Returns nullopt for an empty token list (caller drops the line).
inline std::optional<Sentence> encode_sentence(const Vocabulary& vocab, const std::vector<std::string>& tokens) {
  if (tokens.empty()) return std::nullopt;
  Sentence s;
  s.ids.reserve(tokens.size());
  for (const auto& t : tokens) s.ids.push_back(vocab.id_of(t));
  return s;
}

struct Corpus {
  std::string lang;
  std::vector<Sentence> sentences;
  Vocabulary vocab;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.size();
    return n;
  }
};

struct CorpusOptions {
  std::int64_t min_count = 1;
  // 0 = unlimited; longer sentences are truncated to the first max_len tokens.
  std::size_t max_len = 0;
};

// Builds a corpus from already-tokenized sentences; blank entries are dropped.
inline Corpus make_corpus(std::string lang, std::vector<std::vector<std::string>> tokenized,
                          const CorpusOptions& opts = {}) {
  std::erase_if(tokenized, [](const auto& t) { return t.empty(); });
  if (opts.max_len > 0)
    for (auto& t : tokenized)
      if (t.size() > opts.max_len) t.resize(opts.max_len);
  Corpus c;
  c.lang = lang;
  c.vocab = build_vocab(std::move(lang), tokenized, opts.min_count);
  c.sentences.reserve(tokenized.size());
  for (const auto& t : tokenized) c.sentences.push_back(*encode_sentence(c.vocab, t));
  return c;
}

// Encodes tokenized sentences with an existing vocabulary (e.g. one restored from a checkpoint).
inline Corpus encode_corpus(const Vocabulary& vocab, const std::vector<std::vector<std::string>>& tokenized,
                            std::size_t max_len = 0) {
  Corpus c;
  c.lang = vocab.lang();
  c.vocab = vocab;
  for (auto t : tokenized) {
    if (max_len > 0 && t.size() > max_len) t.resize(max_len);
    if (auto s = encode_sentence(vocab, t)) c.sentences.push_back(std::move(*s));
  }
  return c;
}

// One sentence per line, UTF-8.
inline std::vector<std::vector<std::string>> read_tokenized(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open corpus file: " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    out.push_back(tokenize_line(line, lineno));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

inline constexpr WordId kPadId = 0;

// B×T id matrix stored row-major, T = longest sentence in the batch.
struct Batch {
  std::size_t lang = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<WordId> ids;
  std::vector<std::size_t> lengths;

  WordId at(std::size_t b, std::size_t t) const { return ids[b * cols + t]; }
  bool mask(std::size_t b, std::size_t t) const { return t < lengths[b]; }
  std::size_t token_count() const {
    std::size_t n = 0;
    for (auto l : lengths) n += l;
    return n;
  }
};

// Pads sentences into a single batch. Padded cells carry kPadId.
inline Batch pad_batch(std::span<const Sentence* const> sentences, std::size_t lang = 0, std::size_t min_cols = 0) {
  Batch b;
  b.lang = lang;
  b.rows = sentences.size();
  b.cols = min_cols;
  for (const auto* s : sentences) b.cols = std::max(b.cols, s->size());
  b.ids.assign(b.rows * b.cols, kPadId);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& s = *sentences[r];
    std::copy(s.ids.begin(), s.ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.cols));
    b.lengths.push_back(s.size());
  }
  return b;
}

// Shuffles (deterministically by seed) and groups into padded batches of at most batch_size.
inline std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed,
                                       std::size_t lang = 0) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch_size must be positive");
  if (corpus.sentences.empty()) throw CorpusError("make_batches: corpus '" + corpus.lang + "' is empty");
  std::vector<const Sentence*> order;
  order.reserve(corpus.sentences.size());
  for (const auto& s : corpus.sentences) order.push_back(&s);
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());

  std::vector<Batch> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const auto n = std::min(batch_size, order.size() - i);
    out.push_back(pad_batch(std::span<const Sentence* const>(order.data() + i, n), lang));
  }
  return out;
}

// One slot of the alternating schedule: batch `index` of the `cycle`-th pass over language `lang`.
struct ScheduleSlot {
  std::size_t lang;
  std::size_t cycle;
  std::size_t index;
  friend bool operator==(const ScheduleSlot&, const ScheduleSlot&) = default;
};

// Strict round-robin over languages. A language whose stream runs out restarts
// (cycle + 1, to be drawn from a fresh shuffle) until the longest stream is
// exhausted, which ends the epoch.
inline std::vector<ScheduleSlot> interleave_schedule(std::span<const std::size_t> stream_lengths) {
  if (stream_lengths.size() < 2) throw std::invalid_argument("interleave: at least two streams required");
  std::size_t rounds = 0;
  for (auto n : stream_lengths) {
    if (n == 0) throw std::invalid_argument("interleave: empty batch stream");
    rounds = std::max(rounds, n);
  }
  std::vector<ScheduleSlot> out;
  out.reserve(rounds * stream_lengths.size());
  for (std::size_t r = 0; r < rounds; ++r)
    for (std::size_t l = 0; l < stream_lengths.size(); ++l)
      out.push_back({l, r / stream_lengths[l], r % stream_lengths[l]});
  return out;
}

// Lazily materializes the interleaved batch sequence for one epoch. Shuffle
// seeds derive from (seed, language, cycle) so a cycled stream is reshuffled.
class Interleaver {
 public:
  Interleaver(std::span<const Corpus> corpora, std::size_t batch_size, std::uint64_t seed)
      : corpora_(corpora), batch_size_(batch_size), seed_(seed) {
    if (corpora.size() < 2) throw std::invalid_argument("interleave: at least two streams required");
    std::vector<std::size_t> lengths;
    for (const auto& c : corpora) {
      if (c.sentences.empty()) throw std::invalid_argument("interleave: empty batch stream for '" + c.lang + "'");
      lengths.push_back((c.sentences.size() + batch_size - 1) / batch_size);
    }
    schedule_ = interleave_schedule(lengths);
    current_.resize(corpora.size());
    current_cycle_.assign(corpora.size(), static_cast<std::size_t>(-1));
  }

  std::size_t size() const { return schedule_.size(); }
  const std::vector<ScheduleSlot>& schedule() const { return schedule_; }

  const Batch& at(std::size_t step) {
    const auto& slot = schedule_.at(step);
    if (current_cycle_[slot.lang] != slot.cycle) {
      current_[slot.lang] = make_batches(corpora_[slot.lang], batch_size_,
                                         derive_seed(seed_, slot.lang, slot.cycle), slot.lang);
      current_cycle_[slot.lang] = slot.cycle;
    }
    return current_[slot.lang][slot.index];
  }

 private:
  std::span<const Corpus> corpora_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::vector<ScheduleSlot> schedule_;
  std::vector<std::vector<Batch>> current_;
  std::vector<std::size_t> current_cycle_;
};

}  // namespace mnlm
