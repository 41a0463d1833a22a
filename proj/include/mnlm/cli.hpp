// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mnlm/align.hpp"
#include "mnlm/corpus.hpp"
#include "mnlm/model.hpp"
#include "mnlm/projection.hpp"
#include "mnlm/serialization.hpp"
#include "mnlm/trainer.hpp"

namespace mnlm::cli {

// Bad invocation detected after parsing (exit 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tab-separated report lines, mirrored to an optional file.
class Report {
 public:
  explicit Report(std::ostream& out) : out_(out) {}

  void open(const std::string& path) {
    if (path.empty()) return;
    file_ = std::make_unique<std::ofstream>(path);
    if (!*file_) throw std::runtime_error("cannot write report: " + path);
  }

  template <typename... Fields>
  void line(const Fields&... fields) {
    std::ostringstream os;
    os << std::setprecision(17);
    std::size_t i = 0;
    ((os << (i++ ? "\t" : "") << fields), ...);
    os << '\n';
    raw(os.str());
  }

  void raw(const std::string& text) {
    out_ << text;
    if (file_) *file_ << text;
  }

 private:
  std::ostream& out_;
  std::unique_ptr<std::ofstream> file_;
};

struct LangPath {
  std::string lang;
  std::string path;
};

inline LangPath parse_lang_path(const std::string& arg) {
  const auto colon = arg.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == arg.size())
    throw UsageError("--lang expects LANG:PATH, got '" + arg + "'");
  LangPath lp{arg.substr(0, colon), arg.substr(colon + 1)};
  for (char ch : lp.lang)
    if (std::isspace(static_cast<unsigned char>(ch))) throw UsageError("--lang: language name contains whitespace");
  if (!std::filesystem::is_regular_file(lp.path)) throw UsageError("--lang: file does not exist: " + lp.path);
  return lp;
}

inline std::vector<LangPath> parse_lang_paths(const std::vector<std::string>& args) {
  std::vector<LangPath> out;
  std::set<std::string> seen;
  for (const auto& a : args) {
    out.push_back(parse_lang_path(a));
    if (!seen.insert(out.back().lang).second) throw UsageError("--lang: duplicate language '" + out.back().lang + "'");
  }
  return out;
}

struct TrainArgs {
  std::vector<std::string> langs;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 1.0;
  double clip = 5.0;
  double dropout = 0.3;
  std::int64_t min_count = 3;
  std::uint64_t seed = 1;
  std::string out;
  std::size_t dim = 300;
  std::size_t hidden = 0;
  std::size_t max_len = 0;
  bool no_eos_loss = false;
  std::string loss_norm = "per-sentence";
  std::size_t eval_every = 0;
  std::size_t validation_words = 3000;
  std::size_t csls_k = 10;
  std::string resume;
  bool timings = false;
};

inline int run_train(const TrainArgs& a, Report& report, std::ostream& err) {
  const auto langs = parse_lang_paths(a.langs);
  if (langs.size() < 2) throw UsageError("train: at least two --lang LANG:PATH required");

  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.lr = a.lr;
  cfg.clip = a.clip;
  cfg.seed = a.seed;
  cfg.checkpoint_dir = a.out;
  cfg.eval_every = a.eval_every;
  cfg.validation_words = a.validation_words;
  cfg.csls_k = a.csls_k;
  cfg.loss_norm = a.loss_norm == "per-prediction" ? LossNorm::kPerPrediction : LossNorm::kPerSentence;
  cfg.model.d_emb = a.dim;
  cfg.model.d_hidden = a.hidden ? a.hidden : a.dim;
  cfg.model.dropout = a.dropout;
  cfg.model.eos_loss = !a.no_eos_loss;
  for (const auto& lp : langs) cfg.model.languages.push_back(lp.lang);

  const auto started = std::chrono::steady_clock::now();
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    cfg.model = resume->params.config;
    if (cfg.seed != resume->progress.seed)
      err << "mnlm: warning: --seed " << cfg.seed << " differs from checkpoint seed " << resume->progress.seed << '\n';
  }

  std::vector<Corpus> corpora;
  for (std::size_t l = 0; l < langs.size(); ++l) {
    auto tokenized = read_tokenized(langs[l].path);
    if (resume) {
      if (l >= resume->vocabs.size() || resume->vocabs[l].lang() != langs[l].lang)
        throw UsageError("train: --lang order does not match the checkpoint languages");
      corpora.push_back(encode_corpus(resume->vocabs[l], tokenized, a.max_len));
    } else {
      corpora.push_back(make_corpus(langs[l].lang, std::move(tokenized), {a.min_count, a.max_len}));
    }
  }

  report.line("subcommand", "train");
  report.line("seed", cfg.seed);
  const auto settings = cfg.to_json();
  for (const auto& [key, value] : settings.items()) report.line("config", key, value.dump());
  report.line("config", "dim", cfg.model.d_emb);
  report.line("config", "hidden", cfg.model.d_hidden);
  report.line("config", "dropout", cfg.model.dropout);
  report.line("config", "eos_loss", cfg.model.eos_loss ? "true" : "false");
  for (const auto& c : corpora) {
    report.line("corpus", c.lang, "sentences", c.sentences.size());
    report.line("corpus", c.lang, "tokens", c.token_count());
    report.line("corpus", c.lang, "vocab", c.vocab.size());
  }

  TrainCallbacks cb;
  cb.on_step = [&](const StepInfo& s) {
    err << "epoch " << s.epoch << " step " << s.step << "/" << s.total_steps << " loss " << s.running_loss
        << " grad_norm " << s.grad_norm << '\n';
  };
  cb.on_epoch = [&](const EpochRecord& e) {
    err << "epoch " << e.epoch << " done in " << e.wall_seconds << "s\n";
  };
  const auto result = train<float>(cfg, corpora, resume ? &*resume : nullptr, cb);

  std::ofstream hist(std::filesystem::path(a.out) / "history.tsv");
  if (!hist) throw std::runtime_error("cannot write " + (std::filesystem::path(a.out) / "history.tsv").string());
  write_history(hist, result.history);

  const auto& h = result.history;
  for (const auto& e : h.epochs) {
    report.line("epoch", e.epoch, "steps", "-", e.steps);
    for (std::size_t l = 0; l < e.train_loss.size(); ++l) report.line("epoch", e.epoch, "train_loss", h.languages[l], e.train_loss[l]);
    for (std::size_t l = 0; l < e.perplexity.size(); ++l) report.line("epoch", e.epoch, "perplexity", h.languages[l], e.perplexity[l]);
    for (const auto& v : e.validation)
      report.line("epoch", e.epoch, "validation", h.languages[v.src] + "-" + h.languages[v.tgt], v.score);
    if (a.timings) report.line("epoch", e.epoch, "seconds", "-", e.wall_seconds);
  }
  if (h.best_epoch > 0) report.line("best_epoch", h.best_epoch);
  report.line("checkpoint", "final", (std::filesystem::path(a.out) / "final.ckpt").string());
  if (std::filesystem::exists(std::filesystem::path(a.out) / "best.ckpt"))
    report.line("checkpoint", "best", (std::filesystem::path(a.out) / "best.ckpt").string());
  report.line("history", (std::filesystem::path(a.out) / "history.tsv").string());
  if (a.timings)
    report.line("seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
  return 0;
}

struct EvalAlignArgs {
  std::string src_emb;
  std::string tgt_emb;
  std::string dict;
  std::size_t csls_k = 10;
  std::vector<std::size_t> ks;
};

inline int run_eval_align(const EvalAlignArgs& a, Report& report) {
  const auto src = import_embeddings(a.src_emb);
  const auto tgt = import_embeddings(a.tgt_emb);
  const auto task = load_dictionary(a.dict, src.tokens, tgt.tokens);
  report.line("subcommand", "eval-align");
  report.line("config", "csls_k", a.csls_k);
  report.line("source", src.lang, src.size(), src.dim());
  report.line("target", tgt.lang, tgt.size(), tgt.dim());
  report.line("pairs", "retained", task.retained_pairs);
  report.line("pairs", "dropped", task.dropped_pairs);
  report.line("pairs", "sources", task.size());
  const std::vector<std::size_t> ks = a.ks.empty() ? std::vector<std::size_t>{1, 5} : a.ks;
  for (auto k : ks) report.line("p@" + std::to_string(k), precision_at_k(task, src, tgt, {a.csls_k, true}, k));
  return 0;
}

struct NnArgs {
  std::string emb;
  std::string query;
  std::size_t k = 10;
  std::string cross;
  std::size_t csls_k = 10;
};

// Monolingual: cosine neighbors within --emb, the query itself excluded.
// With --cross: CSLS (rT omitted) retrieval in the other space.
inline int run_nn(const NnArgs& a, Report& report) {
  const auto space = without_unk(import_embeddings(a.emb));
  const auto row = space.find(a.query);
  if (row < 0) throw UsageError("nn: '" + a.query + "' not in " + a.emb);
  report.line("subcommand", "nn");
  report.line("query", a.query);
  if (a.cross.empty()) {
    const auto unit = normalized_rows(space);
    Eigen::VectorXd cos = unit * unit.row(row).transpose();
    std::vector<double> scores(cos.data(), cos.data() + cos.size());
    scores[static_cast<std::size_t>(row)] = -std::numeric_limits<double>::infinity();
    const auto top = topk_targets(scores, std::min(a.k, scores.size() - 1));
    for (std::size_t r = 0; r < top.size(); ++r) report.line("nn", r + 1, space.tokens[top[r]], scores[top[r]]);
  } else {
    const auto other = without_unk(import_embeddings(a.cross));
    CslsScorer scorer(space, other, {a.csls_k, true});
    const auto scores = scorer.row(static_cast<std::size_t>(row));
    const auto top = topk_targets(scores, a.k);
    for (std::size_t r = 0; r < top.size(); ++r) report.line("nn", r + 1, other.tokens[top[r]], scores[top[r]]);
  }
  return 0;
}

struct ExportArgs {
  std::string ckpt;
  std::string out;
  std::vector<std::string> langs;
};

inline int run_export(const ExportArgs& a, Report& report) {
  const auto ckpt = load_checkpoint(a.ckpt);
  std::vector<std::string> langs = a.langs.empty() ? ckpt.params.config.languages : a.langs;
  std::filesystem::create_directories(a.out);
  report.line("subcommand", "export-emb");
  for (const auto& lang : langs) {
    const auto& names = ckpt.params.config.languages;
    if (std::find(names.begin(), names.end(), lang) == names.end())
      throw UsageError("export-emb: checkpoint has no language '" + lang + "'");
    const auto l = ckpt.params.lang_index(lang);
    const auto space = extract_embeddings(ckpt.params, l, ckpt.vocabs[l]);
    const auto path = (std::filesystem::path(a.out) / (lang + ".vec")).string();
    export_embeddings(space, path);
    report.line("exported", lang, path, space.size(), space.dim());
  }
  return 0;
}

struct PerplexityArgs {
  std::string ckpt;
  std::vector<std::string> langs;
  std::size_t batch_size = 64;
  std::size_t max_len = 0;
};

inline int run_perplexity(const PerplexityArgs& a, Report& report) {
  const auto langs = parse_lang_paths(a.langs);
  if (langs.empty()) throw UsageError("perplexity: at least one --lang LANG:PATH required");
  const auto ckpt = load_checkpoint(a.ckpt);
  report.line("subcommand", "perplexity");
  for (const auto& lp : langs) {
    const auto& names = ckpt.params.config.languages;
    if (std::find(names.begin(), names.end(), lp.lang) == names.end())
      throw UsageError("perplexity: checkpoint has no language '" + lp.lang + "'");
    const auto l = ckpt.params.lang_index(lp.lang);
    const auto corpus = encode_corpus(ckpt.vocabs[l], read_tokenized(lp.path), a.max_len);
    report.line("sentences", lp.lang, corpus.sentences.size());
    report.line("perplexity", lp.lang, perplexity(ckpt.params, corpus, l, a.batch_size));
  }
  return 0;
}

struct ProjectArgs {
  std::vector<std::string> embs;
  std::size_t n_points = 1000;
};

// "lang token x y" lines, space-separated.
inline int run_project(const ProjectArgs& a, Report& report) {
  std::vector<EmbeddingSpace> spaces;
  for (const auto& path : a.embs) spaces.push_back(import_embeddings(path));
  const auto points = project_pca(spaces, a.n_points);
  std::ostringstream os;
  os << std::setprecision(9);
  for (const auto& p : points) os << p.lang << ' ' << p.token << ' ' << p.x << ' ' << p.y << '\n';
  report.raw(os.str());
  return 0;
}

// Entry point. Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multilingual neural language models and cross-lingual word embedding evaluation", "mnlm"};
  app.require_subcommand(1);
  std::string report_path;
  app.add_option("--report", report_path, "Also write the report to this file");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a joint model on monolingual corpora");
  train_cmd->add_option("--lang", ta.langs, "LANG:PATH corpus, one per language (repeat, in order)")->required();
  train_cmd->add_option("--epochs", ta.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", ta.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", ta.lr)->capture_default_str();
  train_cmd->add_option("--clip", ta.clip)->capture_default_str();
  train_cmd->add_option("--dropout", ta.dropout)->capture_default_str()->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--min-count", ta.min_count)->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", ta.seed)->capture_default_str();
  train_cmd->add_option("--out", ta.out, "Output directory")->required();
  train_cmd->add_option("--dim", ta.dim, "Embedding size")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--hidden", ta.hidden, "LSTM size (default: --dim)");
  train_cmd->add_option("--max-len", ta.max_len, "Truncate sentences (0 = unlimited)")->capture_default_str();
  train_cmd->add_flag("--no-eos-loss", ta.no_eos_loss, "Do not train the end-of-sentence prediction");
  train_cmd->add_option("--loss-norm", ta.loss_norm)
      ->capture_default_str()
      ->check(CLI::IsMember({"per-sentence", "per-prediction"}));
  train_cmd->add_option("--eval-every", ta.eval_every, "Progress line every N steps")->capture_default_str();
  train_cmd->add_option("--validation-words", ta.validation_words)->capture_default_str();
  train_cmd->add_option("--csls-k", ta.csls_k)->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--resume", ta.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_flag("--timings", ta.timings, "Include wall-clock times in the report");

  EvalAlignArgs ea;
  auto* eval_cmd = app.add_subcommand("eval-align", "Word alignment precision@k with CSLS retrieval");
  eval_cmd->add_option("--src-emb", ea.src_emb)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--tgt-emb", ea.tgt_emb)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--dict", ea.dict)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--csls-k", ea.csls_k)->capture_default_str()->check(CLI::PositiveNumber);
  eval_cmd->add_option("--k", ea.ks, "Precision cutoffs (default: 1 5)")->check(CLI::PositiveNumber);

  NnArgs na;
  auto* nn_cmd = app.add_subcommand("nn", "Nearest neighbors of a word");
  nn_cmd->add_option("--emb", na.emb)->required()->check(CLI::ExistingFile);
  nn_cmd->add_option("--query", na.query)->required();
  nn_cmd->add_option("--k", na.k)->capture_default_str()->check(CLI::PositiveNumber);
  nn_cmd->add_option("--cross", na.cross, "Retrieve in this space with CSLS")->check(CLI::ExistingFile);
  nn_cmd->add_option("--csls-k", na.csls_k)->capture_default_str()->check(CLI::PositiveNumber);

  ExportArgs xa;
  auto* export_cmd = app.add_subcommand("export-emb", "Write per-language input embeddings from a checkpoint");
  export_cmd->add_option("--ckpt", xa.ckpt)->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--out", xa.out, "Output directory (LANG.vec per language)")->required();
  export_cmd->add_option("--lang", xa.langs, "Languages to export (default: all)");

  PerplexityArgs pa;
  auto* ppl_cmd = app.add_subcommand("perplexity", "Corpus perplexity under a checkpoint");
  ppl_cmd->add_option("--ckpt", pa.ckpt)->required()->check(CLI::ExistingFile);
  ppl_cmd->add_option("--lang", pa.langs, "LANG:PATH corpus (repeat)")->required();
  ppl_cmd->add_option("--batch-size", pa.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  ppl_cmd->add_option("--max-len", pa.max_len)->capture_default_str();

  ProjectArgs pr;
  auto* project_cmd = app.add_subcommand("project", "2-D PCA coordinates of the most frequent words");
  project_cmd->add_option("--emb", pr.embs, "Embedding file (repeat); language = file stem")
      ->required()
      ->check(CLI::ExistingFile);
  project_cmd->add_option("--n-points", pr.n_points)->capture_default_str()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "mnlm: " << e.what() << '\n';
    return 2;
  }

  try {
    Report report(out);
    report.open(report_path);
    if (train_cmd->parsed()) return run_train(ta, report, err);
    if (eval_cmd->parsed()) return run_eval_align(ea, report);
    if (nn_cmd->parsed()) return run_nn(na, report);
    if (export_cmd->parsed()) return run_export(xa, report);
    if (ppl_cmd->parsed()) return run_perplexity(pa, report);
    if (project_cmd->parsed()) return run_project(pr, report);
  } catch (const UsageError& e) {
    err << "mnlm: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "mnlm: error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace mnlm::cli
