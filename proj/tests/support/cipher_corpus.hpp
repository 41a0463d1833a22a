// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic multilingual corpora for end-to-end tests. A stochastic template
// grammar over a fixed word inventory produces one sentence multiset; every
// language renders it through its own random bijection of the inventory and
// shuffles the sentences independently, so no sentence pairing is exposed.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mnlm/random.hpp"

namespace mnlm::testkit {

struct CipherSpec {
  std::size_t sentences = 2000;
  std::size_t languages = 2;
  std::uint64_t seed = 7;
};

struct CipherCorpora {
  // [language][sentence][position]
  std::vector<std::vector<std::vector<std::string>>> text;
  // [language][base word] -> surface token
  std::vector<std::vector<std::string>> lexicon;
  std::vector<std::string> names;
};

namespace detail {

struct WordClass {
  std::size_t first;
  std::size_t count;
};

// Word inventory of 150 base words split into grammatical classes.
struct Grammar {
  WordClass det{0, 6}, pron{6, 6}, noun{12, 50}, verb{62, 35}, adj{97, 25}, adv{122, 12}, prep{134, 10},
      conj{144, 4}, punct{148, 2};
  static constexpr std::size_t kWords = 150;

  // Per-word preferences give every word a distinct distributional profile.
  std::vector<std::vector<std::size_t>> verb_subjects, verb_objects, verb_prons, verb_advs, noun_adjs, noun_dets,
      prep_nouns, conj_verbs;

  explicit Grammar(Rng& rng) {
    auto pick = [&](const WordClass& c, std::size_t n) {
      std::vector<std::size_t> all(c.count);
      std::iota(all.begin(), all.end(), c.first);
      rng.shuffle(all.begin(), all.end());
      all.resize(n);
      return all;
    };
    for (std::size_t v = 0; v < verb.count; ++v) {
      verb_subjects.push_back(pick(noun, 4));
      verb_objects.push_back(pick(noun, 4));
      verb_prons.push_back(pick(pron, 2));
      verb_advs.push_back(pick(adv, 3));
    }
    for (std::size_t n = 0; n < noun.count; ++n) {
      noun_adjs.push_back(pick(adj, 3));
      noun_dets.push_back(pick(det, 2));
    }
    for (std::size_t p = 0; p < prep.count; ++p) prep_nouns.push_back(pick(noun, 5));
    for (std::size_t c = 0; c < conj.count; ++c) conj_verbs.push_back(pick(verb, 10));
  }
};

// Zipf-weighted draw over n items.
inline std::size_t zipf(Rng& rng, std::size_t n) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += 1.0 / static_cast<double>(i + 1);
  double u = rng.uniform01() * total;
  for (std::size_t i = 0; i < n; ++i) {
    u -= 1.0 / static_cast<double>(i + 1);
    if (u < 0) return i;
  }
  return n - 1;
}

inline std::size_t from(Rng& rng, const WordClass& c) { return c.first + zipf(rng, c.count); }
inline std::size_t from(Rng& rng, const std::vector<std::size_t>& options) { return options[zipf(rng, options.size())]; }

inline void noun_phrase(Rng& rng, const Grammar& g, std::size_t noun, std::vector<std::size_t>& out) {
  out.push_back(from(rng, g.noun_dets[noun - g.noun.first]));
  if (rng.uniform01() < 0.4) out.push_back(from(rng, g.noun_adjs[noun - g.noun.first]));
  out.push_back(noun);
}

inline void clause(Rng& rng, const Grammar& g, std::size_t verb, std::vector<std::size_t>& out) {
  const auto vi = verb - g.verb.first;
  if (rng.uniform01() < 0.3)
    out.push_back(from(rng, g.verb_prons[vi]));
  else
    noun_phrase(rng, g, from(rng, g.verb_subjects[vi]), out);
  out.push_back(verb);
  if (rng.uniform01() < 0.7) noun_phrase(rng, g, from(rng, g.verb_objects[vi]), out);
  if (rng.uniform01() < 0.35) {
    const auto prep = from(rng, g.prep);
    out.push_back(prep);
    noun_phrase(rng, g, from(rng, g.prep_nouns[prep - g.prep.first]), out);
  }
  if (rng.uniform01() < 0.25) out.push_back(from(rng, g.verb_advs[vi]));
}

}  // namespace detail

inline CipherCorpora make_cipher_corpora(const CipherSpec& spec) {
  Rng rng(spec.seed);
  const detail::Grammar g(rng);

  std::vector<std::vector<std::size_t>> base;
  for (std::size_t s = 0; s < spec.sentences; ++s) {
    std::vector<std::size_t> words;
    detail::clause(rng, g, detail::from(rng, g.verb), words);
    if (rng.uniform01() < 0.3) {
      const auto conj = detail::from(rng, g.conj);
      words.push_back(g.punct.first + 1);  // ","
      words.push_back(conj);
      detail::clause(rng, g, detail::from(rng, g.conj_verbs[conj - g.conj.first]), words);
    }
    words.push_back(g.punct.first);  // "."
    base.push_back(std::move(words));
  }

  CipherCorpora out;
  for (std::size_t l = 0; l < spec.languages; ++l) {
    const std::string name(1, static_cast<char>('a' + l));
    std::vector<std::size_t> perm(detail::Grammar::kWords);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (l > 0) rng.shuffle(perm.begin(), perm.end());
    std::vector<std::string> lex;
    for (std::size_t w = 0; w < perm.size(); ++w) lex.push_back(name + std::to_string(perm[w]));

    std::vector<std::size_t> order(base.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    std::vector<std::vector<std::string>> text;
    text.reserve(base.size());
    for (auto i : order) {
      std::vector<std::string> sent;
      for (auto w : base[i]) sent.push_back(lex[w]);
      text.push_back(std::move(sent));
    }
    out.names.push_back(name);
    out.lexicon.push_back(std::move(lex));
    out.text.push_back(std::move(text));
  }
  return out;
}

}  // namespace mnlm::testkit
