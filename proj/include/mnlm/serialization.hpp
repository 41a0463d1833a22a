// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mnlm/align.hpp"
#include "mnlm/corpus.hpp"
#include "mnlm/model.hpp"

namespace mnlm {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Embedding text format: "V d" header, then "token v1 ... vd" per line.
// ---------------------------------------------------------------------------

inline void export_embeddings(const EmbeddingSpace& space, const std::string& path) {
  if (space.size() == 0) throw FormatError("export_embeddings: empty space");
  if (static_cast<Eigen::Index>(space.size()) != space.matrix.rows())
    throw FormatError("export_embeddings: token count does not match matrix rows");
  for (const auto& tok : space.tokens) {
    if (tok.empty()) throw FormatError("export_embeddings: empty token");
    for (char ch : tok)
      if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\v' || ch == '\f')
        throw FormatError("export_embeddings: token '" + tok + "' contains whitespace");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write embeddings: " + path);
  out << space.size() << ' ' << space.dim() << '\n';
  char buf[32];
  for (std::size_t i = 0; i < space.size(); ++i) {
    out << space.tokens[i];
    for (Eigen::Index j = 0; j < space.matrix.cols(); ++j) {
      std::snprintf(buf, sizeof buf, " %.9g", space.matrix(static_cast<Eigen::Index>(i), j));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw FormatError("I/O error writing embeddings: " + path);
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const auto start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <typename Num>
bool parse_number(std::string_view s, Num& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace detail

inline EmbeddingSpace import_embeddings(const std::string& path, std::string lang = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open embeddings: " + path);
  auto where = [&](std::size_t lineno) { return path + ":" + std::to_string(lineno) + ": "; };

  std::string line;
  if (!std::getline(in, line)) throw FormatError(where(1) + "missing 'V d' header");
  const auto header = detail::split_ws(line);
  std::size_t rows = 0, dim = 0;
  if (header.size() != 2 || !detail::parse_number(header[0], rows) || !detail::parse_number(header[1], dim) ||
      dim == 0)
    throw FormatError(where(1) + "malformed header, expected 'V d'");

  EmbeddingSpace space;
  space.lang = lang.empty() ? std::filesystem::path(path).stem().string() : std::move(lang);
  space.matrix.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  space.tokens.reserve(rows);
  std::unordered_set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto fields = detail::split_ws(line);
    if (fields.empty()) continue;
    if (space.tokens.size() == rows)
      throw FormatError(where(lineno) + "more rows than the declared " + std::to_string(rows));
    if (fields.size() != dim + 1) {
      throw FormatError(where(lineno) + "expected " + std::to_string(dim) + " values, got " +
                        std::to_string(fields.size() - 1));
    }
    std::string tok(fields[0]);
    if (!seen.insert(tok).second) throw FormatError(where(lineno) + "duplicate token '" + tok + "'");
    const auto r = static_cast<Eigen::Index>(space.tokens.size());
    for (std::size_t j = 0; j < dim; ++j) {
      double v;
      if (!detail::parse_number(fields[j + 1], v))
        throw FormatError(where(lineno) + "non-numeric value '" + std::string(fields[j + 1]) + "'");
      space.matrix(r, static_cast<Eigen::Index>(j)) = v;
    }
    space.tokens.push_back(std::move(tok));
  }
  if (space.tokens.size() != rows) {
    throw FormatError(where(lineno) + "header declares " + std::to_string(rows) + " rows, found " +
                      std::to_string(space.tokens.size()));
  }
  return space;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "MNLMCKPT" | u64 LE header length | UTF-8 JSON header | f32 LE payloads
//
// The header carries the format version, model config, vocabularies, training
// progress and a manifest of tensor names and shapes; payloads follow in
// manifest order, each row-major.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 8> kCheckpointMagic = {'M', 'N', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kFormat, kVersion, kTruncated, kShape };
  CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct TrainingProgress {
  std::size_t epochs_completed = 0;
  std::uint64_t seed = 0;
  // Epoch with the highest mean validation score so far (0: none yet).
  std::size_t best_epoch = 0;
  double best_score = 0;
  friend bool operator==(const TrainingProgress&, const TrainingProgress&) = default;
};

struct Checkpoint {
  ModelParams<float> params;
  std::vector<Vocabulary> vocabs;
  TrainingProgress progress;
  // Free-form training settings, echoed back on load.
  nlohmann::json train_settings = nlohmann::json::object();
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

inline std::uint64_t get_u64(const char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"d_emb", c.d_emb},     {"d_hidden", c.d_hidden}, {"dropout", c.dropout},
          {"init_range", c.init_range}, {"eos_loss", c.eos_loss}, {"languages", c.languages}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_emb = j.at("d_emb").get<std::size_t>();
  c.d_hidden = j.at("d_hidden").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.init_range = j.at("init_range").get<double>();
  c.eos_loss = j.at("eos_loss").get<bool>();
  c.languages = j.at("languages").get<std::vector<std::string>>();
  return c;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto& p = ckpt.params;
  if (ckpt.vocabs.size() != p.num_languages())
    throw CheckpointError(CheckpointError::Kind::kFormat, "save_checkpoint: one vocabulary per language required");
  const auto tensors = p.all_tensors();
  const auto names = p.tensor_names();

  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = detail::config_to_json(p.config);
  header["progress"] = {{"epochs_completed", ckpt.progress.epochs_completed},
                        {"seed", ckpt.progress.seed},
                        {"best_epoch", ckpt.progress.best_epoch},
                        {"best_score", ckpt.progress.best_score}};
  header["train_settings"] = ckpt.train_settings;
  auto& vocabs = header["vocabularies"] = nlohmann::json::array();
  for (const auto& v : ckpt.vocabs)
    vocabs.push_back({{"lang", v.lang()}, {"min_count", v.min_count()}, {"tokens", v.tokens()}, {"counts", v.counts()}});
  auto& manifest = header["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < tensors.size(); ++i)
    manifest.push_back({{"name", names[i]}, {"rows", tensors[i].rows()}, {"cols", tensors[i].cols()}});
  const std::string text = header.dump();

  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write checkpoint: " + path);
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<char> buf;
    for (const auto& t : tensors) {
      const auto& m = t.value();
      buf.resize(static_cast<std::size_t>(m.size()) * 4);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(m.data()[i]);
        for (int k = 0; k < 4; ++k) buf[static_cast<std::size_t>(i) * 4 + k] = static_cast<char>((bits >> (8 * k)) & 0xFF);
      }
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "I/O error writing checkpoint: " + path);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  using Kind = CheckpointError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::kIo, "cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const auto magic_len = std::min(bytes.size(), kCheckpointMagic.size());
  if (bytes.empty() || !std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(magic_len),
                                   kCheckpointMagic.begin()))
    throw CheckpointError(Kind::kFormat, path + ": not a checkpoint file");
  if (bytes.size() < kCheckpointMagic.size() + 8) throw CheckpointError(Kind::kTruncated, path + ": truncated header");
  const auto header_len = detail::get_u64(bytes.data() + 8);
  const std::size_t header_at = 16;
  if (header_len > bytes.size() - header_at) throw CheckpointError(Kind::kTruncated, path + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + header_at, bytes.begin() + static_cast<std::ptrdiff_t>(header_at + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kFormat, path + ": malformed header: " + e.what());
  }

  Checkpoint ckpt;
  std::vector<std::pair<std::string, std::array<Eigen::Index, 2>>> manifest;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError(Kind::kVersion, path + ": unsupported checkpoint version " + std::to_string(version) +
                                                " (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    ckpt.params.config = detail::config_from_json(header.at("config"));
    ckpt.progress.epochs_completed = header.at("progress").at("epochs_completed").get<std::size_t>();
    ckpt.progress.seed = header.at("progress").at("seed").get<std::uint64_t>();
    ckpt.progress.best_epoch = header.at("progress").value("best_epoch", std::size_t{0});
    ckpt.progress.best_score = header.at("progress").value("best_score", 0.0);
    ckpt.train_settings = header.value("train_settings", nlohmann::json::object());
    for (const auto& v : header.at("vocabularies")) {
      ckpt.vocabs.push_back(Vocabulary::from_parts(v.at("lang").get<std::string>(),
                                                   v.at("tokens").get<std::vector<std::string>>(),
                                                   v.at("counts").get<std::vector<std::int64_t>>(),
                                                   v.at("min_count").get<std::int64_t>()));
    }
    for (const auto& t : header.at("tensors"))
      manifest.push_back({t.at("name").get<std::string>(), {t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>()}});
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kFormat, path + ": malformed header: " + e.what());
  } catch (const CorpusError& e) {
    throw CheckpointError(Kind::kFormat, path + ": " + e.what());
  }
  try {
    ckpt.params.config.validate();
  } catch (const ModelError& e) {
    throw CheckpointError(Kind::kFormat, path + ": " + e.what());
  }
  if (ckpt.vocabs.size() != ckpt.params.config.languages.size())
    throw CheckpointError(Kind::kFormat, path + ": vocabulary count does not match language list");

  // Expected layout, derived from the config and vocabularies.
  std::vector<std::size_t> sizes;
  for (const auto& v : ckpt.vocabs) sizes.push_back(v.size());
  auto& params = ckpt.params;
  params = init_params<float>(params.config, sizes, 0);
  const auto names = params.tensor_names();
  auto tensors = params.all_tensors();
  if (manifest.size() != tensors.size()) {
    throw CheckpointError(Kind::kShape, path + ": manifest lists " + std::to_string(manifest.size()) +
                                            " tensors, model requires " + std::to_string(tensors.size()));
  }
  std::size_t payload = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, shape] = manifest[i];
    if (name != names[i] || shape[0] != tensors[i].rows() || shape[1] != tensors[i].cols()) {
      throw CheckpointError(Kind::kShape, path + ": tensor '" + name + "' " + ag::detail::shape_str(shape[0], shape[1]) +
                                              " does not match expected '" + names[i] + "' " +
                                              ag::detail::shape_str(tensors[i].rows(), tensors[i].cols()));
    }
    payload += static_cast<std::size_t>(shape[0] * shape[1]) * 4;
  }
  const std::size_t data_at = header_at + header_len;
  const std::size_t available = bytes.size() - data_at;
  if (available < payload) {
    throw CheckpointError(Kind::kTruncated, path + ": truncated payload (" + std::to_string(available) + " of " +
                                                std::to_string(payload) + " bytes)");
  }
  if (available > payload)
    throw CheckpointError(Kind::kFormat, path + ": " + std::to_string(available - payload) + " trailing bytes");

  const char* at = bytes.data() + data_at;
  for (auto& t : tensors) {
    auto& m = t.mutable_value();
    for (Eigen::Index i = 0; i < m.size(); ++i, at += 4) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(at[k])) << (8 * k);
      m.data()[i] = std::bit_cast<float>(bits);
    }
  }
  return ckpt;
}

}  // namespace mnlm
