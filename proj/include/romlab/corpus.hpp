#pragma once

// Corpus ingestion, vocabulary, word-level tokenization and stop-word flagging.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "romlab/errors.hpp"

namespace romlab {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kClsId = 2;
inline constexpr TokenId kSepId = 3;
inline constexpr TokenId kMaskId = 4;
inline constexpr TokenId kNumSpecial = 5;

// Label value at positions that carry no MLM target.
inline constexpr TokenId kIgnoreLabel = -100;

inline constexpr std::string_view kSpecialTokens[kNumSpecial] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                                  "[MASK]"};

class Vocabulary {
 public:
  Vocabulary() {
    for (TokenId i = 0; i < kNumSpecial; ++i) insert(std::string(kSpecialTokens[i]));
  }

  // Builds from an id-ordered token list; the first five entries must be the specials.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < static_cast<std::size_t>(kNumSpecial) + 1)
      throw SchemaError("vocabulary needs the five special tokens plus at least one word");
    for (TokenId i = 0; i < kNumSpecial; ++i)
      if (tokens[static_cast<std::size_t>(i)] != kSpecialTokens[i])
        throw SchemaError("special token " + std::string(kSpecialTokens[i]) + " must have id " +
                          std::to_string(i));
    Vocabulary v;
    for (std::size_t i = kNumSpecial; i < tokens.size(); ++i) {
      if (v.contains(tokens[i])) throw SchemaError("duplicate vocabulary token '" + tokens[i] + "'");
      v.insert(tokens[i]);
    }
    return v;
  }

  std::size_t size() const noexcept { return id_to_token_.size(); }
  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

  TokenId id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }
  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const noexcept { return id_to_token_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.id_to_token_ == b.id_to_token_;
  }

 private:
  void insert(std::string token) {
    token_to_id_.emplace(token, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(std::move(token));
  }

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
};

inline bool is_special_id(TokenId id) noexcept { return id == kClsId || id == kSepId || id == kPadId; }

struct TokenSequence {
  std::string id;
  std::vector<TokenId> ids;
  std::vector<std::string> surface;
  std::vector<bool> is_special;
  std::vector<bool> is_stop_or_punct;

  std::size_t size() const noexcept { return ids.size(); }

  // Non-special positions, in order. Weight records and mask draws align with these.
  std::vector<std::size_t> maskable_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (!is_special[i]) out.push_back(i);
    return out;
  }
  std::size_t maskable_count() const {
    return static_cast<std::size_t>(std::count(is_special.begin(), is_special.end(), false));
  }
};

struct PassageRecord {
  std::string id;
  std::string text;
};
using QueryRecord = PassageRecord;

struct Judgment {
  std::string query_id;
  std::string passage_id;
  int relevance = 1;
};

// ---------------------------------------------------------------------------
// Tokenization

namespace detail {

inline char32_t decode_utf8(std::string_view s, std::size_t& i) {
  const auto c0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> char32_t {
    if (i + k >= s.size()) return 0xFFFD;
    return static_cast<unsigned char>(s[i + k]) & 0x3Fu;
  };
  if (c0 < 0x80) {
    i += 1;
    return c0;
  }
  if ((c0 >> 5) == 0x6) {
    const char32_t cp = (char32_t(c0 & 0x1F) << 6) | cont(1);
    i += 2;
    return cp;
  }
  if ((c0 >> 4) == 0xE) {
    const char32_t cp = (char32_t(c0 & 0x0F) << 12) | (cont(1) << 6) | cont(2);
    i += 3;
    return cp;
  }
  if ((c0 >> 3) == 0x1E) {
    const char32_t cp = (char32_t(c0 & 0x07) << 18) | (cont(1) << 12) | (cont(2) << 6) | cont(3);
    i += 4;
    return cp;
  }
  i += 1;
  return 0xFFFD;
}

inline bool is_unicode_space(char32_t cp) noexcept {
  switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

inline bool is_punct_codepoint(char32_t cp) noexcept {
  if (cp < 0x80) return std::ispunct(static_cast<int>(cp)) != 0;
  if (cp >= 0xA1 && cp <= 0xBF) return cp != 0xAA && cp != 0xB2 && cp != 0xB3 && cp != 0xB5 &&
                                       cp != 0xB9 && cp != 0xBA && cp != 0xBC && cp != 0xBD &&
                                       cp != 0xBE;
  if (cp == 0xD7 || cp == 0xF7) return true;
  if (cp >= 0x2010 && cp <= 0x205E) return true;
  if (cp >= 0x3001 && cp <= 0x3003) return true;
  if (cp >= 0x3008 && cp <= 0x3011) return true;
  return false;
}

inline void lowercase_ascii(std::string& s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
}

}  // namespace detail

// Lowercases, splits on Unicode whitespace and splits every punctuation
// character into its own token. No special tokens are added.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      detail::lowercase_ascii(current);
      out.push_back(std::move(current));
      current.clear();
    }
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    const char32_t cp = detail::decode_utf8(text, i);
    if (detail::is_unicode_space(cp)) {
      flush();
    } else if (detail::is_punct_codepoint(cp)) {
      flush();
      out.emplace_back(text.substr(start, i - start));
    } else {
      current.append(text.substr(start, i - start));
    }
  }
  flush();
  return out;
}

inline bool is_all_punct(std::string_view token) {
  if (token.empty()) return false;
  std::size_t i = 0;
  while (i < token.size())
    if (!detail::is_punct_codepoint(detail::decode_utf8(token, i))) return false;
  return true;
}

inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_seq_len,
                              std::string sequence_id = {}) {
  if (max_seq_len < 3) throw InvalidConfig("max_seq_len must be at least 3");
  auto words = split_words(text);
  if (words.size() > max_seq_len - 2) words.resize(max_seq_len - 2);

  TokenSequence seq;
  seq.id = std::move(sequence_id);
  seq.ids.reserve(words.size() + 2);
  seq.surface.reserve(words.size() + 2);
  seq.ids.push_back(kClsId);
  seq.surface.emplace_back(kSpecialTokens[kClsId]);
  for (auto& w : words) {
    seq.ids.push_back(vocab.id(w));
    seq.surface.push_back(std::move(w));
  }
  seq.ids.push_back(kSepId);
  seq.surface.emplace_back(kSpecialTokens[kSepId]);
  seq.is_special.assign(seq.ids.size(), false);
  seq.is_special.front() = true;
  seq.is_special.back() = true;
  seq.is_stop_or_punct.assign(seq.ids.size(), false);
  return seq;
}

using StopList = std::unordered_set<std::string>;

inline void flag_stop_and_punct(TokenSequence& seq, const StopList& stoplist) {
  seq.is_stop_or_punct.assign(seq.size(), false);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.is_special[i]) continue;
    const auto& tok = seq.surface[i];
    seq.is_stop_or_punct[i] = stoplist.count(tok) != 0 || is_all_punct(tok);
  }
}

inline Vocabulary build_vocab(const std::vector<PassageRecord>& corpus, std::size_t target_size,
                              std::size_t min_freq = 1) {
  if (target_size < static_cast<std::size_t>(kNumSpecial) + 1)
    throw InvalidConfig("target_size must be at least 6");
  if (corpus.empty()) throw EmptyInput("cannot build a vocabulary from an empty corpus");

  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& p : corpus)
    for (auto& w : split_words(p.text)) ++freq[w];
  for (auto special : kSpecialTokens) freq.erase(std::string(special));

  std::vector<std::pair<std::string, std::size_t>> ranked;
  ranked.reserve(freq.size());
  for (auto& [w, c] : freq)
    if (c >= min_freq) ranked.emplace_back(w, c);
  if (ranked.empty()) throw EmptyInput("corpus contains no tokens meeting min_freq");
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const std::size_t keep = std::min(ranked.size(), target_size - kNumSpecial);

  std::vector<std::string> tokens(std::begin(kSpecialTokens), std::end(kSpecialTokens));
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(std::move(ranked[i].first));
  return Vocabulary::from_tokens(tokens);
}

// ---------------------------------------------------------------------------
// File formats

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput("cannot open " + path.string());
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

inline std::vector<PassageRecord> read_passages_jsonl(std::istream& in, const std::string& source = "<stream>") {
  std::vector<PassageRecord> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("text") ||
        !j["text"].is_string())
      throw SchemaError(source + ":" + std::to_string(line_no) + ": expected {\"id\": string, \"text\": string}");
    PassageRecord rec{j["id"].get<std::string>(), j["text"].get<std::string>()};
    if (!seen.insert(rec.id).second)
      throw SchemaError(source + ":" + std::to_string(line_no) + ": duplicate id '" + rec.id + "'");
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<PassageRecord> read_passages_jsonl(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return read_passages_jsonl(in, path.string());
}

inline void write_passages_jsonl(const std::filesystem::path& path, const std::vector<PassageRecord>& passages) {
  auto out = detail::open_output(path);
  for (const auto& p : passages) out << nlohmann::json{{"id", p.id}, {"text", p.text}}.dump() << '\n';
}

inline std::vector<QueryRecord> read_queries_tsv(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::vector<QueryRecord> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw SchemaError(path.string() + ":" + std::to_string(line_no) + ": expected qid<TAB>text");
    QueryRecord q{line.substr(0, tab), line.substr(tab + 1)};
    if (!seen.insert(q.id).second)
      throw SchemaError(path.string() + ":" + std::to_string(line_no) + ": duplicate query id '" + q.id + "'");
    out.push_back(std::move(q));
  }
  return out;
}

inline void write_queries_tsv(const std::filesystem::path& path, const std::vector<QueryRecord>& queries) {
  auto out = detail::open_output(path);
  for (const auto& q : queries) out << q.id << '\t' << q.text << '\n';
}

// Lines with relevance < 1 are non-relevant and dropped.
inline std::vector<Judgment> read_judgments_tsv(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::vector<Judgment> out;
  std::set<std::pair<std::string, std::string>> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto cols = detail::split_tabs(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (cols.size() != 3) throw SchemaError(where + ": expected qid<TAB>pid<TAB>rel");
    int rel = 0;
    try {
      std::size_t used = 0;
      rel = std::stoi(cols[2], &used);
      if (used != cols[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw SchemaError(where + ": relevance must be an integer");
    }
    if (rel < 1) continue;
    if (!seen.emplace(cols[0], cols[1]).second) continue;
    out.push_back({cols[0], cols[1], rel});
  }
  return out;
}

inline void write_judgments_tsv(const std::filesystem::path& path, const std::vector<Judgment>& judgments) {
  auto out = detail::open_output(path);
  for (const auto& j : judgments) out << j.query_id << '\t' << j.passage_id << '\t' << j.relevance << '\n';
}

// Training pairs: qid<TAB>pid.
inline std::vector<std::pair<std::string, std::string>> read_pairs_tsv(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto cols = detail::split_tabs(line);
    if (cols.size() != 2)
      throw SchemaError(path.string() + ":" + std::to_string(line_no) + ": expected qid<TAB>pid");
    out.emplace_back(cols[0], cols[1]);
  }
  return out;
}

inline void write_pairs_tsv(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, std::string>>& pairs) {
  auto out = detail::open_output(path);
  for (const auto& [q, p] : pairs) out << q << '\t' << p << '\n';
}

inline void validate_judgments(const std::vector<Judgment>& judgments, const std::vector<QueryRecord>& queries,
                               const std::vector<PassageRecord>& passages) {
  std::unordered_set<std::string> qids, pids;
  for (const auto& q : queries) qids.insert(q.id);
  for (const auto& p : passages) pids.insert(p.id);
  std::vector<std::string> problems;
  for (const auto& j : judgments) {
    if (!qids.count(j.query_id)) problems.push_back("unknown query id '" + j.query_id + "'");
    if (!pids.count(j.passage_id)) problems.push_back("unknown passage id '" + j.passage_id + "'");
    if (problems.size() >= 10) break;
  }
  if (!problems.empty()) {
    std::string msg = "judgments reference missing records:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw SchemaError(msg);
  }
}

inline StopList read_stoplist(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  StopList out;
  std::string line;
  while (std::getline(in, line)) {
    detail::strip_cr(line);
    const auto b = line.find_first_not_of(" \t");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t");
    std::string w = line.substr(b, e - b + 1);
    detail::lowercase_ascii(w);
    out.insert(std::move(w));
  }
  return out;
}

inline void write_vocab_json(const std::filesystem::path& path, const Vocabulary& vocab) {
  // Emitted in id order so the file diff-reads naturally; readers must not rely on key order.
  auto out = detail::open_output(path);
  out << "{\n";
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    out << "  " << nlohmann::json(vocab.tokens()[i]).dump() << ": " << i << (i + 1 < vocab.size() ? ",\n" : "\n");
  }
  out << "}\n";
}

inline Vocabulary read_vocab_json(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw SchemaError(path.string() + ": vocabulary must be a JSON object {token: id}");
  std::vector<std::string> tokens(j.size());
  std::vector<bool> filled(j.size(), false);
  for (auto& [tok, idv] : j.items()) {
    if (!idv.is_number_integer()) throw SchemaError(path.string() + ": id of '" + tok + "' is not an integer");
    const auto id = idv.get<long long>();
    if (id < 0 || static_cast<std::size_t>(id) >= tokens.size() || filled[static_cast<std::size_t>(id)])
      throw SchemaError(path.string() + ": ids must be a permutation of 0..size-1");
    tokens[static_cast<std::size_t>(id)] = tok;
    filled[static_cast<std::size_t>(id)] = true;
  }
  return Vocabulary::from_tokens(tokens);
}

// Tokenizes and flags a passage collection, preserving order.
inline std::vector<TokenSequence> tokenize_all(const std::vector<PassageRecord>& passages, const Vocabulary& vocab,
                                               std::size_t max_seq_len, const StopList* stoplist = nullptr) {
  std::vector<TokenSequence> out;
  out.reserve(passages.size());
  for (const auto& p : passages) {
    out.push_back(tokenize(p.text, vocab, max_seq_len, p.id));
    if (stoplist) flag_stop_and_punct(out.back(), *stoplist);
  }
  return out;
}

}  // namespace romlab
