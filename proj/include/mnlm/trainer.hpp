// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mnlm/align.hpp"
#include "mnlm/autograd.hpp"
#include "mnlm/corpus.hpp"
#include "mnlm/model.hpp"
#include "mnlm/random.hpp"
#include "mnlm/serialization.hpp"

namespace mnlm {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 1.0;
  double clip = 5.0;
  // Objective scaling for the gradient; reported losses are always per prediction.
  LossNorm loss_norm = LossNorm::kPerSentence;
  std::uint64_t seed = 1;
  // Empty: no checkpoints are written.
  std::string checkpoint_dir;
  // Progress callback cadence in optimizer steps; 0 = epoch boundaries only.
  std::size_t eval_every = 0;
  std::size_t validation_words = 3000;
  std::size_t csls_k = 10;
  bool track_perplexity = true;

  void validate() const {
    model.validate();
    if (batch_size == 0) throw TrainingError("batch size must be positive");
    if (!(lr >= 0.0)) throw TrainingError("learning rate must be non-negative");
    if (!(clip > 0.0)) throw TrainingError("clipping threshold must be positive");
    if (csls_k == 0) throw TrainingError("CSLS K must be positive");
  }

  static const char* norm_name(LossNorm n) { return n == LossNorm::kPerSentence ? "per-sentence" : "per-prediction"; }

  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},
            {"clip", clip},     {"seed", seed},             {"validation_words", validation_words},
            {"csls_k", csls_k}, {"loss_norm", norm_name(loss_norm)}};
  }
};

struct PairScore {
  std::size_t src = 0;
  std::size_t tgt = 0;
  double score = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  std::vector<double> train_loss;  // per language, mean per prediction
  std::vector<double> perplexity;  // per language, eval mode over the training corpus
  std::vector<PairScore> validation;
  double wall_seconds = 0;

  double mean_validation() const {
    if (validation.empty()) return 0;
    double s = 0;
    for (const auto& v : validation) s += v.score;
    return s / static_cast<double>(validation.size());
  }
};

struct TrainHistory {
  std::vector<std::string> languages;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
};

// Tab-separated "epoch  metric  key  value" lines. Wall time is left out so that
// identical seeded runs produce identical logs.
inline void write_history(std::ostream& out, const TrainHistory& h) {
  out << "epoch\tmetric\tkey\tvalue\n";
  auto num = [](double v) {
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
  };
  for (const auto& e : h.epochs) {
    out << e.epoch << "\tsteps\t-\t" << e.steps << '\n';
    for (std::size_t l = 0; l < e.train_loss.size(); ++l)
      out << e.epoch << "\ttrain_loss\t" << h.languages[l] << '\t' << num(e.train_loss[l]) << '\n';
    for (std::size_t l = 0; l < e.perplexity.size(); ++l)
      out << e.epoch << "\tperplexity\t" << h.languages[l] << '\t' << num(e.perplexity[l]) << '\n';
    for (const auto& v : e.validation)
      out << e.epoch << "\tvalidation\t" << h.languages[v.src] << '-' << h.languages[v.tgt] << '\t' << num(v.score)
          << '\n';
  }
}

// exp(mean per-prediction NLL) over a corpus in eval mode, both directions pooled.
template <typename T>
double perplexity(const ModelParams<T>& params, const Corpus& corpus, std::size_t lang, std::size_t batch_size = 64) {
  Rng unused(0);
  double nll = 0;
  std::size_t count = 0;
  std::vector<const Sentence*> chunk;
  for (std::size_t i = 0; i < corpus.sentences.size(); i += batch_size) {
    chunk.clear();
    for (std::size_t j = i; j < std::min(corpus.sentences.size(), i + batch_size); ++j)
      chunk.push_back(&corpus.sentences[j]);
    const auto batch = pad_batch(chunk, lang);
    Tape<T> tape;
    const auto r = batch_loss(tape, params, batch, Mode::kEval, unused);
    nll += r.total_nll();
    count += r.predictions;
  }
  if (count == 0) throw TrainingError("perplexity: empty corpus");
  return std::exp(nll / static_cast<double>(count));
}

template <typename T>
double validation_score(const ModelParams<T>& params, std::span<const Vocabulary> vocabs, std::size_t src,
                        std::size_t tgt, std::size_t n_words = 3000, std::size_t k_neighbors = 10) {
  return validation_score(extract_embeddings(params, src, vocabs[src]), extract_embeddings(params, tgt, vocabs[tgt]),
                          n_words, k_neighbors);
}

struct StepInfo {
  std::size_t epoch = 0;
  std::size_t step = 0;         // within the epoch, 1-based
  std::size_t total_steps = 0;  // in the epoch
  double running_loss = 0;      // mean per prediction since the epoch began
  double grad_norm = 0;         // before clipping
};

struct TrainCallbacks {
  std::function<void(const StepInfo&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  TrainHistory history;
};

namespace detail {

template <typename T>
Checkpoint make_checkpoint(const ModelParams<T>& params, std::span<const Corpus> corpora, const TrainConfig& cfg,
                           std::size_t epoch, std::size_t best_epoch, double best_score) {
  Checkpoint c;
  c.params = params.template clone<float>();
  for (const auto& corpus : corpora) c.vocabs.push_back(corpus.vocab);
  c.progress = {epoch, cfg.seed, best_epoch, best_score};
  c.train_settings = cfg.to_json();
  return c;
}

}  // namespace detail

// Alternating-language SGD. Each interleaved batch gets exactly one update:
// tape -> batch loss -> backward -> global-norm clip -> SGD. After every epoch
// the history is extended and, with a checkpoint_dir, final.ckpt (latest) and
// best.ckpt (highest mean validation score) are rewritten.
//
// With `resume`, training continues after resume->progress.epochs_completed;
// all randomness is derived from (seed, epoch) so the trajectory matches an
// uninterrupted run.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, std::span<const Corpus> corpora, const Checkpoint* resume = nullptr,
                     const TrainCallbacks& callbacks = {}) {
  cfg.validate();
  if (corpora.size() < 2) throw TrainingError("train: at least two languages required");
  if (corpora.size() != cfg.model.languages.size())
    throw TrainingError("train: " + std::to_string(corpora.size()) + " corpora for " +
                        std::to_string(cfg.model.languages.size()) + " configured languages");
  for (std::size_t l = 0; l < corpora.size(); ++l) {
    if (corpora[l].lang != cfg.model.languages[l])
      throw TrainingError("train: corpus '" + corpora[l].lang + "' out of order with configured languages");
    if (corpora[l].sentences.empty()) throw TrainingError("train: corpus '" + corpora[l].lang + "' is empty");
    // Validation retrieves among non-UNK words.
    if (cfg.validation_words > 0 && cfg.csls_k + 1 > corpora[l].vocab.size())
      throw TrainingError("train: CSLS K=" + std::to_string(cfg.csls_k) + " exceeds the vocabulary of '" +
                          corpora[l].lang + "'");
  }

  TrainResult<T> result;
  result.history.languages = cfg.model.languages;
  std::size_t first_epoch = 1;
  double best = -std::numeric_limits<double>::infinity();
  if (resume) {
    if (resume->params.config.languages != cfg.model.languages)
      throw TrainingError("train: checkpoint languages do not match");
    for (std::size_t l = 0; l < corpora.size(); ++l)
      if (!(resume->vocabs[l] == corpora[l].vocab))
        throw TrainingError("train: corpus '" + corpora[l].lang + "' was not encoded with the checkpoint vocabulary");
    result.params = resume->params.template clone<T>();
    first_epoch = resume->progress.epochs_completed + 1;
    if (resume->progress.best_epoch > 0) {
      result.history.best_epoch = resume->progress.best_epoch;
      best = resume->progress.best_score;
    }
  } else {
    std::vector<std::size_t> sizes;
    for (const auto& c : corpora) sizes.push_back(c.vocab.size());
    result.params = init_params<T>(cfg.model, sizes, derive_seed(cfg.seed, 0x1417));
  }
  auto& params = result.params;
  auto tensors = params.all_tensors();

  std::vector<Vocabulary> vocabs;
  for (const auto& c : corpora) vocabs.push_back(c.vocab);

  const bool write = !cfg.checkpoint_dir.empty();
  if (write) std::filesystem::create_directories(cfg.checkpoint_dir);
  auto ckpt_path = [&](const char* name) { return (std::filesystem::path(cfg.checkpoint_dir) / name).string(); };
  if (write && first_epoch == 1)
    save_checkpoint(detail::make_checkpoint(params, corpora, cfg, 0, 0, 0.0), ckpt_path("final.ckpt"));

  for (std::size_t epoch = first_epoch; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const std::uint64_t epoch_seed = cfg.seed + epoch;
    Interleaver schedule(corpora, cfg.batch_size, epoch_seed);
    Rng dropout_rng(derive_seed(epoch_seed, 0xD509));

    std::vector<double> nll(corpora.size(), 0.0);
    std::vector<std::size_t> count(corpora.size(), 0);
    double running = 0;
    std::size_t running_count = 0;
    for (std::size_t step = 0; step < schedule.size(); ++step) {
      const Batch& batch = schedule.at(step);
      ag::zero_grad<T>(tensors);
      Tape<T> tape;
      auto loss = batch_loss(tape, params, batch, Mode::kTrain, dropout_rng, cfg.loss_norm);
      if (!std::isfinite(loss.total_nll())) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(step + 1) +
                            " (language '" + cfg.model.languages[batch.lang] + "')");
      }
      tape.backward(loss.loss);
      const auto clipped = ag::clip_global_norm<T>(tensors, static_cast<T>(cfg.clip));
      ag::sgd_step<T>(tensors, static_cast<T>(cfg.lr));

      nll[batch.lang] += loss.total_nll();
      count[batch.lang] += loss.predictions;
      running += loss.total_nll();
      running_count += loss.predictions;
      if (callbacks.on_step && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
        callbacks.on_step({epoch, step + 1, schedule.size(), running / static_cast<double>(running_count),
                           static_cast<double>(clipped.norm)});
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.steps = schedule.size();
    for (std::size_t l = 0; l < corpora.size(); ++l) {
      rec.train_loss.push_back(nll[l] / static_cast<double>(count[l]));
      if (cfg.track_perplexity) rec.perplexity.push_back(perplexity(params, corpora[l], l, cfg.batch_size));
    }
    if (cfg.validation_words > 0) {
      for (std::size_t s = 0; s < corpora.size(); ++s)
        for (std::size_t t = 0; t < corpora.size(); ++t)
          if (s != t)
            rec.validation.push_back({s, t, validation_score(params, vocabs, s, t, cfg.validation_words, cfg.csls_k)});
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    const double score = rec.mean_validation();
    const bool improved = score > best;
    if (improved) {
      best = score;
      result.history.best_epoch = epoch;
    }
    if (write) {
      const auto ckpt = detail::make_checkpoint(params, corpora, cfg, epoch, result.history.best_epoch, best);
      save_checkpoint(ckpt, ckpt_path("final.ckpt"));
      if (improved) save_checkpoint(ckpt, ckpt_path("best.ckpt"));
    }
    result.history.epochs.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
  }
  return result;
}

}  // namespace mnlm
