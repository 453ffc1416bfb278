#pragma once

// Per-token importance distributions over the non-special positions of a
// sequence: contrastive (from [CLS] attention), imported, or tf-idf.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "romlab/corpus.hpp"
#include "romlab/errors.hpp"

namespace romlab {

enum class Estimator { contrastive, imported, tfidf };

inline const char* estimator_name(Estimator e) noexcept {
  switch (e) {
    case Estimator::contrastive: return "contrastive";
    case Estimator::imported: return "imported";
    case Estimator::tfidf: return "tfidf";
  }
  return "unknown";
}

inline Estimator parse_estimator(const std::string& name) {
  if (name == "contrastive") return Estimator::contrastive;
  if (name == "imported") return Estimator::imported;
  if (name == "tfidf") return Estimator::tfidf;
  throw SchemaError("unknown estimator '" + name + "'");
}

struct AttentionDumpRecord {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<double> cls_attention;
};

struct TermWeightRecord {
  std::string id;
  std::vector<double> weights;
  Estimator estimator = Estimator::contrastive;
};

inline constexpr double kDistributionTolerance = 1e-6;

namespace detail {

inline void normalize_or_uniform(std::vector<double>& w) {
  double total = 0.0;
  for (double x : w) total += x;
  if (!(total > 0.0)) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
    return;
  }
  for (double& x : w) x /= total;
}

}  // namespace detail

// Returns human-readable problems; empty means the record is valid.
inline std::vector<std::string> validate_attention_dump(const AttentionDumpRecord& rec,
                                                        double tolerance = kDistributionTolerance) {
  std::vector<std::string> problems;
  if (rec.id.empty()) problems.push_back("missing id");
  if (rec.cls_attention.empty()) problems.push_back("empty cls_attention");
  if (rec.tokens.size() != rec.cls_attention.size())
    problems.push_back("tokens/cls_attention length mismatch (" + std::to_string(rec.tokens.size()) + " vs " +
                       std::to_string(rec.cls_attention.size()) + ")");
  double total = 0.0;
  for (double a : rec.cls_attention) {
    if (!std::isfinite(a) || a < 0.0) {
      problems.push_back("negative or non-finite attention");
      break;
    }
    total += a;
  }
  if (!rec.cls_attention.empty() && std::abs(total - 1.0) > tolerance)
    problems.push_back("cls_attention sums to " + std::to_string(total));
  return problems;
}

// p_w(i) = softmax_i(a_i * ln(n * a_i)): attention contrasted with the uniform 1/n reference.
inline TermWeightRecord contrastive_term_distribution(const AttentionDumpRecord& attn) {
  const auto& a = attn.cls_attention;
  if (a.empty()) throw EmptyInput("attention record '" + attn.id + "' has no tokens");
  for (double x : a)
    if (!(x >= 0.0) || !std::isfinite(x))
      throw InvalidInput("attention record '" + attn.id + "' has a negative or non-finite weight");

  const double n = static_cast<double>(a.size());
  std::vector<double> logits(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ai = std::max(a[i], 1e-12);
    logits[i] = ai * std::log(n * ai);
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double& z : logits) {
    z = std::exp(z - top);
    total += z;
  }
  for (double& z : logits) z /= total;
  return {attn.id, std::move(logits), Estimator::contrastive};
}

struct DocumentFrequency {
  std::unordered_map<std::string, std::size_t> df;
  std::size_t n_docs = 0;

  static DocumentFrequency build(const std::vector<TokenSequence>& corpus) {
    DocumentFrequency out;
    out.n_docs = corpus.size();
    for (const auto& seq : corpus) {
      std::unordered_set<std::string> seen;
      for (std::size_t i = 0; i < seq.size(); ++i)
        if (!seq.is_special[i] && seen.insert(seq.surface[i]).second) ++out.df[seq.surface[i]];
    }
    return out;
  }

  std::size_t operator()(const std::string& token) const {
    auto it = df.find(token);
    return it == df.end() ? 0 : it->second;
  }
};

// raw_i = tf_i * ln((N + 1) / (df_i + 1)); unknown tokens count as df = 0.
inline TermWeightRecord tfidf_term_distribution(const TokenSequence& seq, const DocumentFrequency& doc_freq) {
  std::unordered_map<std::string, std::size_t> tf;
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (!seq.is_special[i]) ++tf[seq.surface[i]];

  TermWeightRecord rec{seq.id, {}, Estimator::tfidf};
  const double numerator = static_cast<double>(doc_freq.n_docs) + 1.0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.is_special[i]) continue;
    const auto& tok = seq.surface[i];
    const double idf = std::log(numerator / (static_cast<double>(doc_freq(tok)) + 1.0));
    rec.weights.push_back(static_cast<double>(tf[tok]) * std::max(idf, 0.0));
  }
  if (rec.weights.empty()) throw EmptyInput("sequence '" + seq.id + "' has no non-special tokens");
  detail::normalize_or_uniform(rec.weights);
  return rec;
}

// Renormalizes imported weights; all-zero rows become uniform.
inline TermWeightRecord normalize_imported(TermWeightRecord rec) {
  if (rec.weights.empty()) throw SchemaError("term-weight record '" + rec.id + "' is empty");
  for (double w : rec.weights)
    if (!(w >= 0.0) || !std::isfinite(w))
      throw InvalidInput("term-weight record '" + rec.id + "' has a negative or non-finite weight");
  detail::normalize_or_uniform(rec.weights);
  rec.estimator = Estimator::imported;
  return rec;
}

inline std::vector<TermWeightRecord> read_term_weights_jsonl(std::istream& in, const std::string& source,
                                                             bool as_imported) {
  std::vector<TermWeightRecord> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("weights") ||
        !j["weights"].is_array())
      throw SchemaError(where + ": expected {\"id\": string, \"weights\": [float], \"estimator\": string}");
    TermWeightRecord rec;
    rec.id = j["id"].get<std::string>();
    for (const auto& w : j["weights"]) {
      if (!w.is_number()) throw SchemaError(where + ": weights must be numbers");
      rec.weights.push_back(w.get<double>());
    }
    if (j.contains("estimator")) {
      if (!j["estimator"].is_string()) throw SchemaError(where + ": estimator must be a string");
      rec.estimator = parse_estimator(j["estimator"].get<std::string>());
    } else {
      rec.estimator = Estimator::imported;
    }
    if (!seen.insert(rec.id).second) throw SchemaError(where + ": duplicate id '" + rec.id + "'");
    out.push_back(as_imported ? normalize_imported(std::move(rec)) : std::move(rec));
  }
  return out;
}

// Externally produced weights (e.g. a supervised impact model) enter the pipeline here.
inline std::vector<TermWeightRecord> import_term_weights(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return read_term_weights_jsonl(in, path.string(), /*as_imported=*/true);
}

inline void write_term_weights_jsonl(const std::filesystem::path& path, const std::vector<TermWeightRecord>& recs) {
  auto out = detail::open_output(path);
  for (const auto& r : recs)
    out << nlohmann::json{{"id", r.id}, {"weights", r.weights}, {"estimator", estimator_name(r.estimator)}}.dump()
        << '\n';
}

inline std::vector<AttentionDumpRecord> read_attention_dump(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::vector<AttentionDumpRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("tokens") ||
        !j["tokens"].is_array() || !j.contains("cls_attention") || !j["cls_attention"].is_array())
      throw SchemaError(where + ": expected {\"id\", \"tokens\", \"cls_attention\"}");
    AttentionDumpRecord rec;
    rec.id = j["id"].get<std::string>();
    for (const auto& t : j["tokens"]) {
      if (!t.is_string()) throw SchemaError(where + ": tokens must be strings");
      rec.tokens.push_back(t.get<std::string>());
    }
    for (const auto& a : j["cls_attention"]) {
      if (!a.is_number()) throw SchemaError(where + ": cls_attention must be numbers");
      rec.cls_attention.push_back(a.get<double>());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline void write_attention_dump(const std::filesystem::path& path, const std::vector<AttentionDumpRecord>& recs) {
  auto out = detail::open_output(path);
  for (const auto& r : recs)
    out << nlohmann::json{{"id", r.id}, {"tokens", r.tokens}, {"cls_attention", r.cls_attention}}.dump() << '\n';
}

// Maps a dump onto our word-level tokens. Identical token lists pass through;
// otherwise WordPiece continuation pieces ("##x") are merged into their word by
// summing attention mass, and the merged words must match the sequence.
inline AttentionDumpRecord align_attention_to_sequence(const AttentionDumpRecord& dump, const TokenSequence& seq) {
  std::vector<std::string> words;
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (!seq.is_special[i]) words.push_back(seq.surface[i]);
  if (dump.tokens.size() != dump.cls_attention.size())
    throw SchemaError("attention record '" + dump.id + "' has mismatched tokens/cls_attention lengths");
  if (dump.tokens == words) return dump;

  AttentionDumpRecord merged{dump.id, {}, {}};
  for (std::size_t i = 0; i < dump.tokens.size(); ++i) {
    const auto& piece = dump.tokens[i];
    if (piece.rfind("##", 0) == 0 && !merged.tokens.empty()) {
      merged.tokens.back() += piece.substr(2);
      merged.cls_attention.back() += dump.cls_attention[i];
    } else {
      merged.tokens.push_back(piece);
      merged.cls_attention.push_back(dump.cls_attention[i]);
    }
  }
  if (merged.tokens != words)
    throw SchemaError("attention record '" + dump.id + "' does not align with sequence tokens (" +
                      std::to_string(merged.tokens.size()) + " words vs " + std::to_string(words.size()) + ")");
  detail::normalize_or_uniform(merged.cls_attention);
  return merged;
}

// Checks a record against the sequence it is meant to weight.
inline void check_weights_match(const TermWeightRecord& rec, const TokenSequence& seq) {
  if (rec.weights.size() != seq.maskable_count())
    throw SchemaError("term-weight record '" + rec.id + "' has " + std::to_string(rec.weights.size()) +
                      " weights but the sequence has " + std::to_string(seq.maskable_count()) + " tokens");
}

// Per-sequence min-max rescale to [0, 1]; a constant record maps to all zeros.
inline std::vector<double> minmax_rescale(const std::vector<double>& weights) {
  std::vector<double> out(weights.size(), 0.0);
  if (weights.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(weights.begin(), weights.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return out;
  const double span = hi - lo;
  for (std::size_t i = 0; i < weights.size(); ++i) out[i] = std::clamp((weights[i] - lo) / span, 0.0, 1.0);
  return out;
}

inline std::vector<double> minmax_rescale(const TermWeightRecord& rec) { return minmax_rescale(rec.weights); }

struct WeightedToken {
  std::string token;
  double weight = 0.0;
  std::size_t position = 0;
};

// Highest-weight non-special tokens, ties by earlier position; each surface
// form is reported once, at its highest weight.
inline std::vector<WeightedToken> top_weight_tokens(const TokenSequence& seq, const TermWeightRecord& rec,
                                                    std::size_t k) {
  check_weights_match(rec, seq);
  const auto positions = seq.maskable_positions();
  std::vector<std::size_t> order(positions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rec.weights[a] > rec.weights[b]; });
  std::vector<WeightedToken> out;
  std::unordered_set<std::string> seen;
  for (std::size_t idx : order) {
    if (out.size() >= k) break;
    const auto& tok = seq.surface[positions[idx]];
    if (!seen.insert(tok).second) continue;
    out.push_back({tok, rec.weights[idx], positions[idx]});
  }
  return out;
}

}  // namespace romlab
