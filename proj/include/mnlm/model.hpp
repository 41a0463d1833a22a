// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mnlm/align.hpp"
#include "mnlm/autograd.hpp"
#include "mnlm/corpus.hpp"
#include "mnlm/random.hpp"

namespace mnlm {

using ag::Matrix;
using ag::Tape;
using ag::Tensor;

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t d_emb = 300;
  std::size_t d_hidden = 300;
  double dropout = 0.3;
  double init_range = 0.1;
  // Predict EOS at both sentence ends in addition to the words.
  bool eos_loss = true;
  std::vector<std::string> languages;

  void validate() const {
    if (d_emb != d_hidden) throw ModelError("embedding and hidden sizes must match (LSTM input is the embedding)");
    if (d_hidden == 0) throw ModelError("hidden size must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ModelError("dropout must lie in [0, 1)");
    if (languages.empty()) throw ModelError("at least one language required");
    for (std::size_t i = 0; i < languages.size(); ++i)
      for (std::size_t j = i + 1; j < languages.size(); ++j)
        if (languages[i] == languages[j]) throw ModelError("duplicate language '" + languages[i] + "'");
  }
};

// Single-layer LSTM, gates stacked in the order input, forget, candidate, output.
template <typename T>
struct LstmCell {
  Tensor<T> w_input;   // 4d × d
  Tensor<T> w_hidden;  // 4d × d
  Tensor<T> bias;      // 1 × 4d

  Eigen::Index hidden_size() const { return w_hidden.cols(); }
};

template <typename T>
struct LanguageParams {
  Tensor<T> emb;   // V × d, input embeddings
  Tensor<T> proj;  // V × d, output projection
};

// All trainable tensors. The recurrent cells, the BOS input vector and the EOS
// output row exist once and are used for every language.
template <typename T>
struct ModelParams {
  ModelConfig config;
  LstmCell<T> fwd;
  LstmCell<T> bwd;
  Tensor<T> e_bos;  // 1 × d
  Tensor<T> w_eos;  // 1 × d
  std::vector<LanguageParams<T>> langs;

  std::size_t num_languages() const { return langs.size(); }

  std::size_t lang_index(std::string_view name) const {
    for (std::size_t i = 0; i < config.languages.size(); ++i)
      if (config.languages[i] == name) return i;
    throw ModelError("unknown language '" + std::string(name) + "'");
  }
  const LanguageParams<T>& lang(std::size_t l) const {
    if (l >= langs.size()) throw ModelError("unknown language index " + std::to_string(l));
    return langs[l];
  }
  LanguageParams<T>& lang(std::size_t l) {
    if (l >= langs.size()) throw ModelError("unknown language index " + std::to_string(l));
    return langs[l];
  }

  std::vector<Tensor<T>> shared_tensors() const {
    return {fwd.w_input, fwd.w_hidden, fwd.bias, bwd.w_input, bwd.w_hidden, bwd.bias, e_bos, w_eos};
  }
  std::vector<Tensor<T>> all_tensors() const {
    auto out = shared_tensors();
    for (const auto& l : langs) {
      out.push_back(l.emb);
      out.push_back(l.proj);
    }
    return out;
  }
  // Stable names, in all_tensors() order.
  std::vector<std::string> tensor_names() const {
    std::vector<std::string> out = {"fwd.w_input", "fwd.w_hidden", "fwd.bias", "bwd.w_input",
                                    "bwd.w_hidden", "bwd.bias",     "e_bos",    "w_eos"};
    for (const auto& name : config.languages) {
      out.push_back("emb." + name);
      out.push_back("proj." + name);
    }
    return out;
  }

  // Deep copy with independent storage, optionally in another precision.
  template <typename U = T>
  ModelParams<U> clone() const {
    ModelParams<U> out;
    out.config = config;
    auto copy = [](const Tensor<T>& t) { return Tensor<U>::parameter(t.value().template cast<U>()); };
    auto copy_cell = [&](const LstmCell<T>& c) { return LstmCell<U>{copy(c.w_input), copy(c.w_hidden), copy(c.bias)}; };
    out.fwd = copy_cell(fwd);
    out.bwd = copy_cell(bwd);
    out.e_bos = copy(e_bos);
    out.w_eos = copy(w_eos);
    for (const auto& l : langs) out.langs.push_back({copy(l.emb), copy(l.proj)});
    return out;
  }
};

// Every value i.i.d. uniform on [-init_range, init_range].
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::span<const std::size_t> vocab_sizes, std::uint64_t seed) {
  config.validate();
  if (vocab_sizes.size() != config.languages.size())
    throw ModelError("init_params: " + std::to_string(vocab_sizes.size()) + " vocabulary sizes for " +
                     std::to_string(config.languages.size()) + " languages");
  Rng rng(seed);
  const auto d = static_cast<Eigen::Index>(config.d_hidden);
  auto uniform = [&](Eigen::Index rows, Eigen::Index cols) {
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = static_cast<T>(rng.uniform(-config.init_range, config.init_range));
    return Tensor<T>::parameter(std::move(m));
  };
  auto cell = [&] {
    LstmCell<T> c;
    c.w_input = uniform(4 * d, d);
    c.w_hidden = uniform(4 * d, d);
    c.bias = uniform(1, 4 * d);
    return c;
  };
  ModelParams<T> p;
  p.config = config;
  p.fwd = cell();
  p.bwd = cell();
  p.e_bos = uniform(1, d);
  p.w_eos = uniform(1, d);
  for (auto v : vocab_sizes) {
    if (v == 0) throw ModelError("init_params: empty vocabulary");
    LanguageParams<T> l;
    l.emb = uniform(static_cast<Eigen::Index>(v), d);
    l.proj = uniform(static_cast<Eigen::Index>(v), d);
    p.langs.push_back(std::move(l));
  }
  return p;
}

template <typename T>
struct LstmState {
  Tensor<T> h;
  Tensor<T> c;
};

// One LSTM step over a batch of rows: x, h_prev, c_prev are B × d.
template <typename T>
LstmState<T> lstm_step(Tape<T>& tape, const LstmCell<T>& cell, const LstmState<T>& prev, const Tensor<T>& x) {
  const auto d = cell.hidden_size();
  if (x.cols() != d || prev.h.cols() != d || prev.c.cols() != d || x.rows() != prev.h.rows() ||
      prev.h.rows() != prev.c.rows()) {
    throw ag::ShapeError("lstm_step: input " + ag::detail::shape_str(x.rows(), x.cols()) + ", state " +
                         ag::detail::shape_str(prev.h.rows(), prev.h.cols()) + " for hidden size " + std::to_string(d));
  }
  auto gates = tape.add_row(tape.add(tape.matmul(x, cell.w_input, true), tape.matmul(prev.h, cell.w_hidden, true)),
                            cell.bias);
  auto i = tape.sigmoid(tape.slice_cols(gates, 0, d));
  auto f = tape.sigmoid(tape.slice_cols(gates, d, d));
  auto g = tape.tanh(tape.slice_cols(gates, 2 * d, d));
  auto o = tape.sigmoid(tape.slice_cols(gates, 3 * d, d));
  auto c = tape.add(tape.mul(f, prev.c), tape.mul(i, g));
  auto h = tape.mul(o, tape.tanh(c));
  return {h, c};
}

// [w_eos; proj] as one (V+1) × d output matrix; class 0 is EOS, class w+1 is word w.
template <typename T>
Tensor<T> output_matrix(Tape<T>& tape, const ModelParams<T>& params, std::size_t lang) {
  return tape.concat_rows(params.w_eos, params.lang(lang).proj);
}

// (V+1) logits for a single hidden vector h (1 × d).
template <typename T>
Matrix<T> output_logits(const ModelParams<T>& params, std::size_t lang, const Matrix<T>& h) {
  const auto& proj = params.lang(lang).proj.value();
  if (h.rows() != 1 || h.cols() != proj.cols()) throw ag::ShapeError("output_logits: h must be 1 x d");
  Matrix<T> out(1, proj.rows() + 1);
  out(0, 0) = params.w_eos.value().row(0).dot(h.row(0));
  out.rightCols(proj.rows()) = h * proj.transpose();
  return out;
}

enum class Mode { kTrain, kEval };

// Scaling of the differentiable batch loss. kPerPrediction divides the summed
// NLL by the number of predictions; kPerSentence divides it by the number of
// sentences (sum over positions, mean over the batch).
enum class LossNorm { kPerPrediction, kPerSentence };

// Loss of one batch split by direction. fwd/bwd are summed NLLs; loss is the
// differentiable objective, normalized as requested.
template <typename T>
struct BatchLoss {
  Tensor<T> loss;
  double fwd_nll = 0;
  double bwd_nll = 0;
  std::size_t predictions = 0;

  double total_nll() const { return fwd_nll + bwd_nll; }
  double mean() const { return predictions == 0 ? 0.0 : total_nll() / static_cast<double>(predictions); }
};

namespace detail {

// Runs one direction over a batch whose rows are already in reading order
// (reversed for the backward model). Step 0 reads BOS; step t reads word t-1.
// Step t predicts word t, and step len predicts EOS. Returns the summed NLL.
template <typename T>
Tensor<T> direction_nll(Tape<T>& tape, const ModelParams<T>& params, const LstmCell<T>& cell,
                        const Tensor<T>& out_matrix, const Batch& ordered, Mode mode, Rng& rng,
                        std::size_t& predictions) {
  const auto& lp = params.lang(ordered.lang);
  const auto rows = static_cast<Eigen::Index>(ordered.rows);
  const auto d = cell.hidden_size();
  const auto steps = ordered.cols + 1;
  const bool eos = params.config.eos_loss;

  LstmState<T> state{Tensor<T>::zeros(rows, d), Tensor<T>::zeros(rows, d)};
  std::vector<Tensor<T>> hidden;
  hidden.reserve(steps);
  std::vector<std::int32_t> ids(ordered.rows);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor<T> x;
    if (t == 0) {
      x = tape.repeat_row(params.e_bos, rows);
    } else {
      for (std::size_t b = 0; b < ordered.rows; ++b) ids[b] = ordered.at(b, t - 1);
      x = tape.gather_rows(lp.emb, ids);
    }
    state = lstm_step(tape, cell, state, x);
    hidden.push_back(tape.dropout(state.h, static_cast<T>(params.config.dropout), mode == Mode::kTrain, rng));
  }

  // All steps stacked time-major: row t*B + b.
  auto stacked = tape.stack_rows(hidden);
  auto logits = tape.matmul(stacked, out_matrix, true);

  std::vector<std::int32_t> targets(steps * ordered.rows, 0);
  std::vector<std::uint8_t> mask(steps * ordered.rows, 0);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < ordered.rows; ++b) {
      const auto len = ordered.lengths[b];
      const auto k = t * ordered.rows + b;
      if (t < len) {
        targets[k] = ordered.at(b, t) + 1;
        mask[k] = 1;
      } else if (t == len && eos) {
        targets[k] = 0;
        mask[k] = 1;
      }
    }
  }
  for (auto m : mask) predictions += m;
  return tape.softmax_cross_entropy(logits, targets, mask);
}

inline Batch reversed_rows(const Batch& batch) {
  Batch out = batch;
  for (std::size_t b = 0; b < batch.rows; ++b) {
    const auto len = batch.lengths[b];
    for (std::size_t t = 0; t < len; ++t) out.ids[b * batch.cols + t] = batch.at(b, len - 1 - t);
  }
  return out;
}

}  // namespace detail

// Bidirectional language-model loss of a padded batch. Padded cells never enter
// a loss term.
template <typename T>
BatchLoss<T> batch_loss(Tape<T>& tape, const ModelParams<T>& params, const Batch& batch, Mode mode, Rng& rng,
                        LossNorm norm = LossNorm::kPerPrediction) {
  if (batch.rows == 0) throw ModelError("batch_loss: empty batch");
  for (auto len : batch.lengths)
    if (len == 0) throw ModelError("batch_loss: empty sentence in batch");
  const auto& lp = params.lang(batch.lang);
  for (auto id : batch.ids)
    if (id < 0 || id >= lp.emb.rows())
      throw ModelError("batch_loss: word id " + std::to_string(id) + " outside vocabulary of '" +
                       params.config.languages[batch.lang] + "'");

  auto out_matrix = output_matrix(tape, params, batch.lang);
  BatchLoss<T> r;
  auto fwd = detail::direction_nll(tape, params, params.fwd, out_matrix, batch, mode, rng, r.predictions);
  auto bwd = detail::direction_nll(tape, params, params.bwd, out_matrix, detail::reversed_rows(batch), mode, rng,
                                   r.predictions);
  r.fwd_nll = static_cast<double>(fwd.item());
  r.bwd_nll = static_cast<double>(bwd.item());
  const auto denom = norm == LossNorm::kPerSentence ? batch.rows : r.predictions;
  r.loss = tape.scale(tape.add(fwd, bwd), T(1) / static_cast<T>(denom));
  return r;
}

// Mean per-prediction NLL of a batch (no gradient kept).
template <typename T>
double batch_nll(const ModelParams<T>& params, const Batch& batch, Mode mode, Rng& rng) {
  Tape<T> tape;
  return batch_loss(tape, params, batch, mode, rng).mean();
}

struct SentenceNll {
  double loss = 0;  // summed over both directions
  double fwd = 0;
  double bwd = 0;
  std::size_t predictions = 0;
};

template <typename T>
SentenceNll sentence_nll(const ModelParams<T>& params, std::size_t lang, const Sentence& sentence, Mode mode,
                         Rng& rng) {
  if (sentence.ids.empty()) throw ModelError("sentence_nll: empty sentence");
  const Sentence* one[] = {&sentence};
  const auto batch = pad_batch(one, lang);
  Tape<T> tape;
  const auto r = batch_loss(tape, params, batch, mode, rng);
  return {r.total_nll(), r.fwd_nll, r.bwd_nll, r.predictions};
}

// Embedding rows of one language keyed by its vocabulary (UNK included, BOS not).
template <typename T>
EmbeddingSpace extract_embeddings(const ModelParams<T>& params, std::size_t lang, const Vocabulary& vocab) {
  const auto& emb = params.lang(lang).emb.value();
  if (static_cast<std::size_t>(emb.rows()) != vocab.size())
    throw ModelError("extract_embeddings: vocabulary of size " + std::to_string(vocab.size()) + " for " +
                     std::to_string(emb.rows()) + " embedding rows");
  EmbeddingSpace s;
  s.lang = params.config.languages[lang];
  s.tokens = vocab.tokens();
  s.matrix = emb.template cast<double>();
  return s;
}

}  // namespace mnlm
