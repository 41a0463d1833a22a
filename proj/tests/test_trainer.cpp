// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <Eigen/QR>

#include "mnlm/trainer.hpp"
#include "support/cipher_corpus.hpp"

namespace {

using namespace mnlm;
namespace fs = std::filesystem;

std::vector<Corpus> small_corpora(std::size_t sentences = 150, std::size_t languages = 2) {
  const auto cipher = testkit::make_cipher_corpora({sentences, languages, 3});
  std::vector<Corpus> out;
  for (std::size_t l = 0; l < languages; ++l) out.push_back(make_corpus(cipher.names[l], cipher.text[l]));
  return out;
}

TrainConfig small_config(const std::vector<Corpus>& corpora) {
  TrainConfig cfg;
  cfg.model.d_emb = cfg.model.d_hidden = 12;
  for (const auto& c : corpora) cfg.model.languages.push_back(c.lang);
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.validation_words = 30;
  cfg.seed = 5;
  return cfg;
}

void expect_params_equal(const ModelParams<float>& a, const ModelParams<float>& b) {
  const auto ta = a.all_tensors(), tb = b.all_tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i].value(), tb[i].value()) << a.tensor_names()[i];
}

std::string history_text(const TrainHistory& h) {
  std::ostringstream os;
  write_history(os, h);
  return os.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mnlm_trainer_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(TrainConfig, Validation) {
  const auto corpora = small_corpora(20);
  auto cfg = small_config(corpora);
  EXPECT_NO_THROW(cfg.validate());
  auto bad = cfg;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), TrainingError);
  bad = cfg;
  bad.clip = 0;
  EXPECT_THROW(bad.validate(), TrainingError);
  bad = cfg;
  bad.lr = -1;
  EXPECT_THROW(bad.validate(), TrainingError);
  bad = cfg;
  bad.csls_k = 0;
  EXPECT_THROW(bad.validate(), TrainingError);
  bad = cfg;
  bad.model.dropout = 1.5;
  EXPECT_THROW(bad.validate(), ModelError);
}

TEST(Train, RejectsBadCorpora) {
  auto corpora = small_corpora(20);
  auto cfg = small_config(corpora);
  EXPECT_THROW(train<float>(cfg, std::span<const Corpus>(corpora.data(), 1)), TrainingError);
  auto swapped = cfg;
  std::swap(swapped.model.languages[0], swapped.model.languages[1]);
  EXPECT_THROW(train<float>(swapped, corpora), TrainingError);
  auto big_k = cfg;
  big_k.csls_k = 10000;
  EXPECT_THROW(train<float>(big_k, corpora), TrainingError);
  auto emptied = corpora;
  emptied[1].sentences.clear();
  EXPECT_THROW(train<float>(cfg, emptied), TrainingError);
}

TEST(Train, DeterministicAcrossRuns) {
  const auto corpora = small_corpora();
  auto cfg = small_config(corpora);
  cfg.epochs = 1;
  const auto a = train<float>(cfg, corpora);
  const auto b = train<float>(cfg, corpora);
  expect_params_equal(a.params, b.params);
  EXPECT_EQ(history_text(a.history), history_text(b.history));
  cfg.seed = 6;
  const auto c = train<float>(cfg, corpora);
  EXPECT_NE(a.params.fwd.w_input.value(), c.params.fwd.w_input.value());
}

TEST(Train, ZeroLearningRateKeepsInitialParams) {
  const auto corpora = small_corpora();
  auto cfg = small_config(corpora);
  cfg.epochs = 0;
  const auto init = train<float>(cfg, corpora);
  EXPECT_TRUE(init.history.epochs.empty());
  cfg.epochs = 2;
  cfg.lr = 0;
  const auto r = train<float>(cfg, corpora);
  expect_params_equal(init.params, r.params);
}

TEST(Train, StepsFollowSchedule) {
  auto corpora = small_corpora(150);
  corpora[1].sentences.resize(40);
  auto cfg = small_config(corpora);
  cfg.epochs = 1;
  cfg.validation_words = 0;
  std::size_t steps = 0;
  TrainCallbacks cb;
  cfg.eval_every = 1;
  cb.on_step = [&](const StepInfo& s) {
    ++steps;
    EXPECT_EQ(s.step, steps);
    EXPECT_TRUE(std::isfinite(s.running_loss));
  };
  const auto r = train<float>(cfg, corpora, nullptr, cb);
  // ceil(150 / 16) = 10 rounds of 2 languages.
  EXPECT_EQ(r.history.epochs[0].steps, 20u);
  EXPECT_EQ(steps, 20u);
  EXPECT_TRUE(r.history.epochs[0].validation.empty());
}

TEST(Train, LossDecreases) {
  const auto corpora = small_corpora(200);
  auto cfg = small_config(corpora);
  cfg.epochs = 6;
  cfg.validation_words = 0;
  const auto r = train<float>(cfg, corpora);
  ASSERT_EQ(r.history.epochs.size(), 6u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_LT(r.history.epochs.back().train_loss[l], r.history.epochs.front().train_loss[l]);
    EXPECT_LT(r.history.epochs.back().perplexity[l], r.history.epochs.front().perplexity[l]);
    for (const auto& e : r.history.epochs) EXPECT_GE(e.perplexity[l], 1.0);
  }
}

TEST(Train, HistoryRecordsEveryPair) {
  const auto corpora = small_corpora(60, 3);
  auto cfg = small_config(corpora);
  cfg.epochs = 1;
  const auto r = train<float>(cfg, corpora);
  const auto& e = r.history.epochs.at(0);
  EXPECT_EQ(e.train_loss.size(), 3u);
  EXPECT_EQ(e.validation.size(), 6u);
  EXPECT_EQ(r.history.best_epoch, 1u);
  const auto text = history_text(r.history);
  EXPECT_EQ(text.substr(0, text.find('\n')), "epoch\tmetric\tkey\tvalue");
  EXPECT_NE(text.find("1\tvalidation\tc-a\t"), std::string::npos);
  EXPECT_NE(text.find("1\tperplexity\tb\t"), std::string::npos);
}

TEST(Train, CheckpointsWritten) {
  const auto corpora = small_corpora();
  auto cfg = small_config(corpora);
  const auto dir = fresh_dir("ckpt");
  cfg.checkpoint_dir = dir.string();
  const auto r = train<float>(cfg, corpora);
  ASSERT_TRUE(fs::exists(dir / "final.ckpt"));
  ASSERT_TRUE(fs::exists(dir / "best.ckpt"));
  const auto final_ckpt = load_checkpoint((dir / "final.ckpt").string());
  EXPECT_EQ(final_ckpt.progress.epochs_completed, 2u);
  EXPECT_EQ(final_ckpt.progress.seed, 5u);
  EXPECT_EQ(final_ckpt.progress.best_epoch, r.history.best_epoch);
  expect_params_equal(final_ckpt.params, r.params);
  EXPECT_EQ(load_checkpoint((dir / "best.ckpt").string()).progress.epochs_completed, r.history.best_epoch);
  EXPECT_EQ(final_ckpt.train_settings.at("loss_norm"), "per-sentence");
  fs::remove_all(dir);
}

TEST(Train, ZeroEpochsWritesInitialCheckpoint) {
  const auto corpora = small_corpora();
  auto cfg = small_config(corpora);
  cfg.epochs = 0;
  const auto dir = fresh_dir("zero");
  cfg.checkpoint_dir = dir.string();
  const auto r = train<float>(cfg, corpora);
  const auto c = load_checkpoint((dir / "final.ckpt").string());
  EXPECT_EQ(c.progress.epochs_completed, 0u);
  expect_params_equal(c.params, r.params);
  EXPECT_FALSE(fs::exists(dir / "best.ckpt"));
  fs::remove_all(dir);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto corpora = small_corpora();
  auto cfg = small_config(corpora);
  cfg.epochs = 3;
  const auto full = train<float>(cfg, corpora);

  const auto dir = fresh_dir("resume");
  auto first = cfg;
  first.epochs = 1;
  first.checkpoint_dir = dir.string();
  train<float>(first, corpora);
  const auto ckpt = load_checkpoint((dir / "final.ckpt").string());
  const auto resumed = train<float>(cfg, corpora, &ckpt);
  ASSERT_EQ(resumed.history.epochs.size(), 2u);
  EXPECT_EQ(resumed.history.epochs[0].epoch, 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t l = 0; l < 2; ++l)
      EXPECT_NEAR(resumed.history.epochs[i].train_loss[l], full.history.epochs[i + 1].train_loss[l], 1e-6);
  }
  expect_params_equal(resumed.params, full.params);
  EXPECT_EQ(resumed.history.best_epoch, full.history.best_epoch);
  fs::remove_all(dir);
}

TEST(Train, ResumeRejectsForeignVocabulary) {
  const auto corpora = small_corpora();
  auto cfg = small_config(corpora);
  cfg.epochs = 0;
  const auto dir = fresh_dir("foreign");
  cfg.checkpoint_dir = dir.string();
  train<float>(cfg, corpora);
  const auto ckpt = load_checkpoint((dir / "final.ckpt").string());
  const auto other = small_corpora(50);
  cfg.checkpoint_dir.clear();
  EXPECT_THROW(train<float>(cfg, other, &ckpt), TrainingError);
  fs::remove_all(dir);
}

TEST(Train, NonFiniteLossNamesEpochAndBatch) {
  const auto corpora = small_corpora(40);
  auto cfg = small_config(corpora);
  cfg.epochs = 0;
  const auto dir = fresh_dir("nan");
  cfg.checkpoint_dir = dir.string();
  train<float>(cfg, corpora);
  auto ckpt = load_checkpoint((dir / "final.ckpt").string());
  ckpt.params.lang(1).proj.mutable_value()(0, 0) = std::numeric_limits<float>::quiet_NaN();
  cfg.epochs = 1;
  cfg.checkpoint_dir.clear();
  try {
    train<float>(cfg, corpora, &ckpt);
    FAIL();
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 2"), std::string::npos) << msg;
  }
  fs::remove_all(dir);
}

TEST(Perplexity, UniformModelIsTen) {
  std::vector<std::vector<std::string>> text = {{"a", "b", "c"}, {"d", "e", "f", "g", "h"}, {"a"}};
  const auto corpus = make_corpus("x", text);
  ASSERT_EQ(corpus.vocab.size(), 9u);
  ModelConfig cfg;
  cfg.d_emb = cfg.d_hidden = 4;
  cfg.languages = {"x"};
  const std::size_t sizes[] = {9};
  auto p = init_params<double>(cfg, sizes, 1);
  for (auto& t : p.all_tensors()) t.mutable_value().setZero();
  EXPECT_NEAR(perplexity(p, corpus, 0, 2), 10.0, 1e-9);
  EXPECT_THROW(perplexity(p, Corpus{}, 0), TrainingError);
}

TEST(Validation, ModelLevelMatchesSpaceLevel) {
  const auto corpora = small_corpora();
  auto cfg = small_config(corpora);
  cfg.epochs = 1;
  const auto r = train<float>(cfg, corpora);
  const std::vector<Vocabulary> vocabs = {corpora[0].vocab, corpora[1].vocab};
  const double s = validation_score(r.params, vocabs, 0, 1, 30, 10);
  EXPECT_EQ(s, validation_score(extract_embeddings(r.params, 0, vocabs[0]), extract_embeddings(r.params, 1, vocabs[1]),
                                30, 10));
  EXPECT_EQ(s, r.history.epochs[0].validation[0].score);
  // n_words above the vocabulary size is capped.
  EXPECT_EQ(validation_score(r.params, vocabs, 0, 1, 100000, 10), validation_score(r.params, vocabs, 0, 1, 10000, 10));
}

TEST(Validation, RotationInvariant) {
  Rng rng(3);
  EmbeddingSpace s, t;
  s.matrix.resize(30, 4);
  t.matrix.resize(30, 4);
  for (int i = 0; i < 30; ++i) {
    s.tokens.push_back("s" + std::to_string(i));
    t.tokens.push_back("t" + std::to_string(i));
  }
  for (Eigen::Index i = 0; i < s.matrix.size(); ++i) {
    s.matrix.data()[i] = rng.uniform(-1, 1);
    t.matrix.data()[i] = rng.uniform(-1, 1);
  }
  const double before = validation_score(s, t, 20, 5);
  Eigen::MatrixXd a(4, 4);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.uniform(-1, 1);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
  s.matrix = s.matrix * q;
  t.matrix = t.matrix * q;
  EXPECT_NEAR(validation_score(s, t, 20, 5), before, 1e-12);
}
