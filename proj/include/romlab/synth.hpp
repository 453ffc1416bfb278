#pragma once

// Synthetic retrieval task whose relevance is carried by rare content terms.
//
// Each topic owns a private set of pseudo-words. Passages mix those terms with
// frequent function words (every fourth one punctuation) plus topic-neutral filler; queries are a
// few topic terms plus function words. A query is relevant to every passage of
// its topic. Training pairs come from one set of topics and evaluation queries
// from a disjoint set, so evaluation depends on what pre-training learned
// about terms the fine-tuning stage never saw.

#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "romlab/corpus.hpp"
#include "romlab/errors.hpp"
#include "romlab/rng.hpp"

namespace romlab {

struct SynthConfig {
  std::size_t train_topics = 80;
  std::size_t eval_topics = 40;
  std::size_t terms_per_topic = 16;
  std::size_t passages_per_topic = 16;
  std::size_t train_pairs_per_topic = 20;
  std::size_t eval_queries_per_topic = 5;
  std::size_t topic_terms_per_passage = 6;
  std::size_t function_words_per_passage = 12;
  std::size_t filler_words_per_passage = 4;
  std::size_t filler_vocabulary = 200;
  std::size_t query_terms = 3;
  std::uint64_t seed = 1;

  void validate() const {
    if (train_topics < 2 || eval_topics < 1) throw InvalidConfig("synth needs >= 2 train topics and >= 1 eval topic");
    if (terms_per_topic < 2 || passages_per_topic < 1) throw InvalidConfig("synth topics need >= 2 terms and >= 1 passage");
    if (query_terms < 1 || query_terms > terms_per_topic) throw InvalidConfig("synth query_terms out of range");
    if (topic_terms_per_passage < 1) throw InvalidConfig("synth passages need >= 1 topic term");
  }
};

struct SynthDataset {
  std::vector<PassageRecord> passages;
  std::vector<QueryRecord> train_queries;
  std::vector<std::pair<std::string, std::string>> train_pairs;  // (query id, passage id)
  std::vector<QueryRecord> eval_queries;
  std::vector<Judgment> eval_judgments;
};

namespace detail {

// All of these are in the bundled stop list.
inline constexpr const char* kSynthFunctionWords[] = {
    "the",  "of",   "and",  "to",    "a",    "in",   "is",   "that", "for",   "it",   "as",   "was",  "with",
    "be",   "by",   "on",   "not",   "he",   "this", "are",  "or",   "his",   "from", "at",   "which", "but",
    "have", "an",   "had",  "they",  "you",  "were", "their", "one", "all",   "we",   "can",  "her",  "has",
    "there", "been", "if",  "more",  "when", "will", "would", "who", "so",    "no",   "its",  "into", "than"};
inline constexpr const char* kSynthPunctuation[] = {".", ",", ",", ";", "(", ")"};

inline std::string pseudo_word(RandomStream& rs, std::size_t syllables) {
  static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
                                            "br", "dr", "gl", "kr", "pl", "st", "tr", "sk"};
  static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou", "ee"};
  static constexpr const char* kCodas[] = {"", "", "n", "r", "s", "x", "l", "m"};
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w += kOnsets[rs.below(std::size(kOnsets))];
    w += kVowels[rs.below(std::size(kVowels))];
  }
  w += kCodas[rs.below(std::size(kCodas))];
  return w;
}

}  // namespace detail

inline SynthDataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t n_topics = cfg.train_topics + cfg.eval_topics;
  RandomStream words_rs(cfg.seed, Purpose::synthetic, {0});
  std::unordered_set<std::string> used;
  for (const char* w : detail::kSynthFunctionWords) used.insert(w);
  auto fresh_word = [&](std::size_t syllables) {
    for (;;) {
      auto w = detail::pseudo_word(words_rs, syllables);
      if (used.insert(w).second) return w;
    }
  };
  std::vector<std::string> filler;
  for (std::size_t i = 0; i < cfg.filler_vocabulary; ++i) filler.push_back(fresh_word(2));
  std::vector<std::vector<std::string>> topic_terms(n_topics);
  for (auto& terms : topic_terms)
    for (std::size_t j = 0; j < cfg.terms_per_topic; ++j) terms.push_back(fresh_word(3));

  RandomStream rs(cfg.seed, Purpose::synthetic, {1});
  auto pick = [&](const auto& pool) -> std::string { return pool[rs.below(std::size(pool))]; };
  auto pick_terms = [&](const std::vector<std::string>& terms, std::size_t k) {
    std::vector<std::size_t> idx(terms.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rs.shuffle(idx.begin(), idx.end());
    std::vector<std::string> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(terms[idx[i % idx.size()]]);
    return out;
  };
  auto join = [&](std::vector<std::string> tokens) {
    rs.shuffle(tokens.begin(), tokens.end());
    std::string text;
    for (const auto& t : tokens) {
      if (!text.empty()) text += ' ';
      text += t;
    }
    return text + " .";
  };

  SynthDataset ds;
  std::vector<std::vector<std::string>> topic_passages(n_topics);
  for (std::size_t t = 0; t < n_topics; ++t) {
    for (std::size_t p = 0; p < cfg.passages_per_topic; ++p) {
      std::vector<std::string> tokens = pick_terms(topic_terms[t], cfg.topic_terms_per_passage);
      for (std::size_t i = 0; i < cfg.function_words_per_passage; ++i)
        tokens.push_back(i % 4 == 3 ? pick(detail::kSynthPunctuation) : pick(detail::kSynthFunctionWords));
      for (std::size_t i = 0; i < cfg.filler_words_per_passage; ++i) tokens.push_back(pick(filler));
      char id[32];
      std::snprintf(id, sizeof id, "t%03zu_p%03zu", t, p);
      ds.passages.push_back({id, join(std::move(tokens))});
      topic_passages[t].push_back(id);
    }
  }
  auto make_query = [&](std::size_t t) {
    std::vector<std::string> tokens = pick_terms(topic_terms[t], cfg.query_terms);
    tokens.push_back(pick(detail::kSynthFunctionWords));
    tokens.push_back(pick(detail::kSynthFunctionWords));
    return join(std::move(tokens));
  };
  for (std::size_t t = 0; t < cfg.train_topics; ++t) {
    for (std::size_t q = 0; q < cfg.train_pairs_per_topic; ++q) {
      char id[32];
      std::snprintf(id, sizeof id, "tq%03zu_%03zu", t, q);
      ds.train_queries.push_back({id, make_query(t)});
      ds.train_pairs.emplace_back(id, topic_passages[t][rs.below(topic_passages[t].size())]);
    }
  }
  for (std::size_t t = cfg.train_topics; t < n_topics; ++t) {
    for (std::size_t q = 0; q < cfg.eval_queries_per_topic; ++q) {
      char id[32];
      std::snprintf(id, sizeof id, "eq%03zu_%03zu", t, q);
      ds.eval_queries.push_back({id, make_query(t)});
      for (const auto& pid : topic_passages[t]) ds.eval_judgments.push_back({id, pid, 1});
    }
  }
  return ds;
}

inline void write_synthetic(const std::filesystem::path& dir, const SynthDataset& ds) {
  std::filesystem::create_directories(dir);
  write_passages_jsonl(dir / "passages.jsonl", ds.passages);
  write_queries_tsv(dir / "train_queries.tsv", ds.train_queries);
  write_pairs_tsv(dir / "train_pairs.tsv", ds.train_pairs);
  write_queries_tsv(dir / "eval_queries.tsv", ds.eval_queries);
  write_judgments_tsv(dir / "eval_qrels.tsv", ds.eval_judgments);
}

}  // namespace romlab
