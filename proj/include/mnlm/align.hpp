// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mnlm/corpus.hpp"

namespace mnlm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class AlignError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Row-per-word embedding table for one language.
struct EmbeddingSpace {
  std::string lang;
  std::vector<std::string> tokens;
  RowMatrix matrix;

  std::size_t size() const { return tokens.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(matrix.cols()); }

  // Row of token, or -1.
  std::ptrdiff_t find(std::string_view token) const {
    auto it = std::find(tokens.begin(), tokens.end(), token);
    return it == tokens.end() ? -1 : it - tokens.begin();
  }
};

// Copy of space without the UNK row. Retrieval never treats UNK as a word.
inline EmbeddingSpace without_unk(const EmbeddingSpace& space) {
  EmbeddingSpace out;
  out.lang = space.lang;
  std::vector<Eigen::Index> keep;
  for (std::size_t i = 0; i < space.tokens.size(); ++i)
    if (space.tokens[i] != kUnkToken) keep.push_back(static_cast<Eigen::Index>(i));
  out.matrix.resize(static_cast<Eigen::Index>(keep.size()), space.matrix.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    out.matrix.row(static_cast<Eigen::Index>(r)) = space.matrix.row(keep[r]);
    out.tokens.push_back(space.tokens[static_cast<std::size_t>(keep[r])]);
  }
  return out;
}

struct CslsConfig {
  std::size_t k_neighbors = 10;
  bool omit_rt = true;
};

// ---------------------------------------------------------------------------
// Similarities
// ---------------------------------------------------------------------------

template <typename A, typename B>
double cosine(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& y) {
  const double nx = x.norm();
  const double ny = y.norm();
  if (nx == 0.0 || ny == 0.0) throw AlignError("cosine: zero-norm vector");
  return x.dot(y) / (nx * ny);
}

// Rows scaled to unit L2 norm. Zero rows are rejected with the offending token.
inline RowMatrix normalized_rows(const EmbeddingSpace& space) {
  RowMatrix out = space.matrix;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n == 0.0) {
      throw AlignError("zero-norm embedding for token '" + space.tokens[static_cast<std::size_t>(i)] + "' (" +
                       space.lang + ")");
    }
    out.row(i) /= n;
  }
  return out;
}

// Indices of the k largest values, descending; ties go to the lower index.
inline std::vector<std::size_t> topk_targets(std::span<const double> scores, std::size_t k) {
  k = std::min(k, scores.size());
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(k);
  return idx;
}

// Mean of the k largest values, summed in descending order.
inline double top_k_mean(std::span<const double> sims, std::size_t k) {
  if (k == 0 || k > sims.size()) {
    throw AlignError("CSLS neighborhood size K=" + std::to_string(k) + " exceeds opposing space size " +
                     std::to_string(sims.size()));
  }
  double s = 0;
  for (auto i : topk_targets(sims, k)) s += sims[i];
  return s / static_cast<double>(k);
}

// Mean cosine between x and its k nearest rows of the opposing space.
template <typename A>
double knn_mean_sim(const Eigen::MatrixBase<A>& x, const EmbeddingSpace& opposing, std::size_t k) {
  if (k == 0 || k > opposing.size()) {
    throw AlignError("knn_mean_sim: K=" + std::to_string(k) + " exceeds space size " + std::to_string(opposing.size()));
  }
  std::vector<double> sims(opposing.size());
  for (std::size_t j = 0; j < sims.size(); ++j) sims[j] = cosine(x, opposing.matrix.row(static_cast<Eigen::Index>(j)));
  return top_k_mean(sims, k);
}

namespace detail {

// Mean similarity of every row of `queries` to its k nearest rows of `opposing`;
// both inputs row-normalized. Processed in blocks to bound memory.
inline std::vector<double> neighborhood_means(const RowMatrix& queries, const RowMatrix& opposing, std::size_t k) {
  constexpr Eigen::Index kBlock = 1024;
  std::vector<double> out(static_cast<std::size_t>(queries.rows()));
  std::vector<double> row(static_cast<std::size_t>(opposing.rows()));
  for (Eigen::Index b = 0; b < queries.rows(); b += kBlock) {
    const auto n = std::min(kBlock, queries.rows() - b);
    RowMatrix sims = queries.middleRows(b, n) * opposing.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Map<RowMatrix>(row.data(), 1, sims.cols()) = sims.row(i);
      out[static_cast<std::size_t>(b + i)] = top_k_mean(row, k);
    }
  }
  return out;
}

}  // namespace detail

// Precomputed state for CSLS scoring between two spaces:
// CSLS(x, y) = 2 cos(x, y) - rT(x) - rS(y), rT over target neighbors, rS over source neighbors.
class CslsScorer {
 public:
  CslsScorer(const EmbeddingSpace& src, const EmbeddingSpace& tgt, CslsConfig cfg)
      : cfg_(cfg), src_(normalized_rows(src)), tgt_(normalized_rows(tgt)) {
    if (src.size() == 0 || tgt.size() == 0) throw AlignError("CSLS: empty embedding space");
    if (src.dim() != tgt.dim()) {
      throw AlignError("CSLS: dimension mismatch " + std::to_string(src.dim()) + " vs " + std::to_string(tgt.dim()));
    }
    if (cfg.k_neighbors == 0 || cfg.k_neighbors > src.size() || cfg.k_neighbors > tgt.size()) {
      throw AlignError("CSLS: K=" + std::to_string(cfg.k_neighbors) + " must lie in [1, min(" +
                       std::to_string(src.size()) + ", " + std::to_string(tgt.size()) + ")]");
    }
    r_src_ = detail::neighborhood_means(tgt_, src_, cfg.k_neighbors);
  }

  std::size_t source_size() const { return static_cast<std::size_t>(src_.rows()); }
  std::size_t target_size() const { return static_cast<std::size_t>(tgt_.rows()); }
  const std::vector<double>& target_penalty() const { return r_src_; }

  // CSLS scores of source row i against every target.
  std::vector<double> row(std::size_t i) const {
    const auto x = src_.row(static_cast<Eigen::Index>(i));
    Eigen::VectorXd cos = tgt_ * x.transpose();
    std::vector<double> out(static_cast<std::size_t>(cos.size()));
    double rt = 0;
    if (!cfg_.omit_rt) {
      std::vector<double> c(cos.data(), cos.data() + cos.size());
      rt = top_k_mean(c, cfg_.k_neighbors);
    }
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = 2.0 * cos(static_cast<Eigen::Index>(j)) - rt - r_src_[j];
    return out;
  }

 private:
  CslsConfig cfg_;
  RowMatrix src_;
  RowMatrix tgt_;
  std::vector<double> r_src_;
};

// Full S×T CSLS matrix.
inline RowMatrix csls_matrix(const EmbeddingSpace& src, const EmbeddingSpace& tgt, const CslsConfig& cfg) {
  CslsScorer scorer(src, tgt, cfg);
  RowMatrix out(static_cast<Eigen::Index>(scorer.source_size()), static_cast<Eigen::Index>(scorer.target_size()));
  for (std::size_t i = 0; i < scorer.source_size(); ++i) {
    const auto r = scorer.row(i);
    out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(r.data(), static_cast<Eigen::Index>(r.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lexicon induction
// ---------------------------------------------------------------------------

struct AlignmentEntry {
  std::string source;
  std::set<std::string> targets;
};

struct AlignmentTask {
  std::vector<AlignmentEntry> entries;
  std::size_t retained_pairs = 0;
  std::size_t dropped_pairs = 0;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }

  void add(const std::string& src, const std::string& tgt) {
    auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.source == src; });
    if (it == entries.end()) {
      entries.push_back({src, {tgt}});
    } else {
      it->targets.insert(tgt);
    }
  }
};

// One "source target" pair per line (space or tab separated). Pairs with a side
// outside the given vocabularies (or equal to UNK) are dropped and counted.
inline AlignmentTask load_dictionary(const std::string& path, std::span<const std::string> src_vocab,
                                     std::span<const std::string> tgt_vocab) {
  std::ifstream in(path);
  if (!in) throw AlignError("cannot open dictionary: " + path);
  const std::set<std::string_view> src(src_vocab.begin(), src_vocab.end());
  const std::set<std::string_view> tgt(tgt_vocab.begin(), tgt_vocab.end());
  std::unordered_map<std::string, std::size_t> entry_of;
  std::set<std::pair<std::string, std::string>> seen;
  AlignmentTask task;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
      const auto start = i;
      while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
      if (i > start) fields.emplace_back(line.substr(start, i - start));
    }
    if (fields.empty()) continue;
    if (fields.size() != 2) {
      throw AlignError(path + ":" + std::to_string(lineno) + ": expected 'source target', got " +
                       std::to_string(fields.size()) + " field(s)");
    }
    if (!seen.emplace(fields[0], fields[1]).second) continue;
    if (fields[0] == kUnkToken || fields[1] == kUnkToken || !src.contains(fields[0]) || !tgt.contains(fields[1])) {
      ++task.dropped_pairs;
      continue;
    }
    ++task.retained_pairs;
    auto [it, fresh] = entry_of.emplace(fields[0], task.entries.size());
    if (fresh) task.entries.push_back({fields[0], {}});
    task.entries[it->second].targets.insert(fields[1]);
  }
  return task;
}

// Fraction of task sources whose top-k CSLS targets hit the gold set.
inline double precision_at_k(const AlignmentTask& task, const EmbeddingSpace& src, const EmbeddingSpace& tgt,
                             const CslsConfig& cfg, std::size_t k) {
  if (task.empty()) throw AlignError("precision_at_k: empty alignment task");
  const auto s = without_unk(src);
  const auto t = without_unk(tgt);
  CslsScorer scorer(s, t, cfg);
  std::unordered_map<std::string_view, std::size_t> src_row;
  for (std::size_t i = 0; i < s.tokens.size(); ++i) src_row.emplace(s.tokens[i], i);
  std::size_t hits = 0;
  for (const auto& e : task.entries) {
    auto it = src_row.find(e.source);
    if (it == src_row.end()) throw AlignError("precision_at_k: source word '" + e.source + "' not in space");
    const auto scores = scorer.row(it->second);
    for (auto j : topk_targets(scores, k)) {
      if (e.targets.contains(t.tokens[j])) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(task.size());
}

// Unsupervised model-selection metric: mean top-1 CSLS score (rT omitted) of
// the n_words first (most frequent) non-UNK source words. Higher is better.
inline double validation_score(const EmbeddingSpace& src, const EmbeddingSpace& tgt, std::size_t n_words = 3000,
                               std::size_t k_neighbors = 10) {
  const auto s = without_unk(src);
  const auto t = without_unk(tgt);
  CslsScorer scorer(s, t, {k_neighbors, true});
  const auto n = std::min(n_words, s.size());
  if (n == 0) throw AlignError("validation_score: empty source space");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = scorer.row(i);
    total += *std::max_element(r.begin(), r.end());
  }
  return total / static_cast<double>(n);
}

}  // namespace mnlm
