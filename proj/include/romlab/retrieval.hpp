#pragma once

// Exact dense retrieval and run evaluation.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "romlab/corpus.hpp"
#include "romlab/errors.hpp"
#include "romlab/log.hpp"
#include "romlab/model.hpp"
#include "romlab/parallel.hpp"

namespace romlab {

template <class T>
struct EmbeddingIndex {
  std::vector<std::string> ids;
  Matrix<T> vectors;  // one row per id

  std::size_t size() const noexcept { return ids.size(); }
  Eigen::Index dim() const noexcept { return vectors.cols(); }

  void validate() const {
    if (static_cast<std::size_t>(vectors.rows()) != ids.size())
      throw InvalidInput("index has " + std::to_string(vectors.rows()) + " rows but " + std::to_string(ids.size()) +
                         " ids");
    if (!vectors.allFinite()) throw NumericError("index contains non-finite entries");
  }
};

template <class T>
EmbeddingIndex<T> encode_corpus(const Parameters<T>& params, const std::vector<TokenSequence>& passages,
                                unsigned threads = 1) {
  if (passages.empty()) throw EmptyInput("cannot encode an empty corpus");
  EmbeddingIndex<T> index;
  index.vectors.resize(static_cast<Eigen::Index>(passages.size()), params.config.hidden);
  for (const auto& p : passages) index.ids.push_back(p.id);
  parallel_for(passages.size(), threads, [&](std::size_t i) {
    index.vectors.row(static_cast<Eigen::Index>(i)) = encode_text(params, passages[i]);
  });
  index.validate();
  return index;
}

struct ScoredPassage {
  std::string id;
  double score;
};

using RankedList = std::vector<ScoredPassage>;

// Query id -> ranked list, kept in insertion order of queries.
struct RetrievalRun {
  std::vector<std::string> query_ids;
  std::vector<RankedList> results;
};

namespace detail {

// Fixed left-to-right accumulation in double: each score depends only on the
// two rows, never on how the scan is blocked.
template <class T>
double row_dot(const T* a, const T* b, Eigen::Index d) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

inline bool ranks_before(const ScoredPassage& a, const ScoredPassage& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

}  // namespace detail

// Exhaustive top-k by dot product (or cosine), ties by smaller passage id.
// Passages are scanned in blocks of `block_size`; the result does not depend on it.
template <class T>
RankedList search_topk(const EmbeddingIndex<T>& index, const RowVector<T>& query, std::size_t k, bool cosine = false,
                       std::size_t block_size = 256) {
  if (k < 1) throw InvalidConfig("k must be >= 1");
  if (query.cols() != index.dim())
    throw InvalidInput("query dimension " + std::to_string(query.cols()) + " does not match index dimension " +
                       std::to_string(index.dim()));
  if (block_size < 1) block_size = 1;
  const Eigen::Index d = index.dim();
  const std::size_t keep = std::min(k, index.size());
  const RowVector<T> q = query;  // contiguous copy
  const double q_norm = cosine ? std::sqrt(detail::row_dot(q.data(), q.data(), d)) : 1.0;

  std::vector<ScoredPassage> heap;  // worst candidate at the front
  heap.reserve(keep + 1);
  auto worse = [](const ScoredPassage& a, const ScoredPassage& b) { return detail::ranks_before(a, b); };
  std::vector<double> scores;
  for (std::size_t start = 0; start < index.size(); start += block_size) {
    const std::size_t end = std::min(index.size(), start + block_size);
    scores.assign(end - start, 0.0);
    for (std::size_t j = start; j < end; ++j) {
      const T* row = index.vectors.data() + static_cast<Eigen::Index>(j) * d;
      double s = detail::row_dot(q.data(), row, d);
      if (cosine) {
        const double denom = q_norm * std::sqrt(detail::row_dot(row, row, d));
        s = denom > 0.0 ? s / denom : 0.0;
      }
      scores[j - start] = s;
    }
    for (std::size_t j = start; j < end; ++j) {
      ScoredPassage cand{index.ids[j], scores[j - start]};
      if (heap.size() < keep) {
        heap.push_back(std::move(cand));
        std::push_heap(heap.begin(), heap.end(), worse);
      } else if (detail::ranks_before(cand, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), worse);
        heap.back() = std::move(cand);
        std::push_heap(heap.begin(), heap.end(), worse);
      }
    }
  }
  std::sort(heap.begin(), heap.end(), detail::ranks_before);
  return heap;
}

template <class T>
RetrievalRun search_all(const EmbeddingIndex<T>& index, const std::vector<std::string>& query_ids,
                        const Matrix<T>& queries, std::size_t k, bool cosine = false, unsigned threads = 1) {
  if (static_cast<std::size_t>(queries.rows()) != query_ids.size())
    throw InvalidInput("query matrix rows do not match query ids");
  RetrievalRun run;
  run.query_ids = query_ids;
  run.results.resize(query_ids.size());
  parallel_for(query_ids.size(), threads, [&](std::size_t i) {
    run.results[i] = search_topk(index, RowVector<T>(queries.row(static_cast<Eigen::Index>(i))), k, cosine);
  });
  return run;
}

// ---------------------------------------------------------------------------
// Metrics

struct RunMetrics {
  double mrr10 = 0.0;
  double r5 = 0.0;
  double r20 = 0.0;
  double r100 = 0.0;
  double r1000 = 0.0;
  std::size_t queries = 0;
};

using JudgmentSet = std::unordered_map<std::string, std::unordered_set<std::string>>;

inline JudgmentSet judgment_set(const std::vector<Judgment>& judgments) {
  JudgmentSet out;
  for (const auto& j : judgments)
    if (j.relevance > 0) out[j.query_id].insert(j.passage_id);
  return out;
}

// Averages over run queries that have judgments; others are skipped with a warning.
inline RunMetrics evaluate_run(const RetrievalRun& run, const std::vector<Judgment>& judgments,
                               const LogSink& log = stderr_sink()) {
  const auto rel = judgment_set(judgments);
  if (rel.empty()) throw EmptyInput("no relevance judgments");
  RunMetrics m;
  std::size_t skipped = 0;
  for (std::size_t qi = 0; qi < run.query_ids.size(); ++qi) {
    auto it = rel.find(run.query_ids[qi]);
    if (it == rel.end()) {
      ++skipped;
      continue;
    }
    const auto& relevant = it->second;
    const auto& list = run.results[qi];
    double rr = 0.0;
    std::size_t hits5 = 0, hits20 = 0, hits100 = 0, hits1000 = 0;
    for (std::size_t r = 0; r < list.size(); ++r) {
      if (!relevant.count(list[r].id)) continue;
      if (r < 10 && rr == 0.0) rr = 1.0 / static_cast<double>(r + 1);
      hits5 += r < 5;
      hits20 += r < 20;
      hits100 += r < 100;
      hits1000 += r < 1000;
    }
    const double n_rel = static_cast<double>(relevant.size());
    m.mrr10 += rr;
    m.r5 += static_cast<double>(hits5) / n_rel;
    m.r20 += static_cast<double>(hits20) / n_rel;
    m.r100 += static_cast<double>(hits100) / n_rel;
    m.r1000 += static_cast<double>(hits1000) / n_rel;
    ++m.queries;
  }
  if (skipped) log(std::to_string(skipped) + " run queries have no judgments and were skipped");
  if (m.queries == 0) throw EmptyInput("no run query has judgments");
  const double inv = 1.0 / static_cast<double>(m.queries);
  m.mrr10 *= inv;
  m.r5 *= inv;
  m.r20 *= inv;
  m.r100 *= inv;
  m.r1000 *= inv;
  return m;
}

inline double round4(double x) { return std::round(x * 10000.0) / 10000.0; }

inline std::string metrics_json(const RunMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "{\n  \"MRR@10\": %.4f,\n  \"R@5\": %.4f,\n  \"R@20\": %.4f,\n  \"R@100\": %.4f,\n  \"R@1000\": %.4f,\n"
                "  \"queries\": %zu\n}\n",
                m.mrr10, m.r5, m.r20, m.r100, m.r1000, m.queries);
  return buf;
}

inline void write_metrics_json(const std::filesystem::path& path, const RunMetrics& m) {
  auto out = detail::open_output(path);
  out << metrics_json(m);
}

// ---------------------------------------------------------------------------
// TREC run files: "qid Q0 pid rank score tag"

inline void write_trec_run(const std::filesystem::path& path, const RetrievalRun& run, const std::string& tag) {
  auto out = detail::open_output(path);
  char buf[64];
  for (std::size_t q = 0; q < run.query_ids.size(); ++q)
    for (std::size_t r = 0; r < run.results[q].size(); ++r) {
      std::snprintf(buf, sizeof buf, "%.9g", run.results[q][r].score);
      out << run.query_ids[q] << " Q0 " << run.results[q][r].id << ' ' << (r + 1) << ' ' << buf << ' ' << tag << '\n';
    }
}

inline RetrievalRun read_trec_run(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::map<std::string, std::vector<std::pair<std::size_t, ScoredPassage>>> grouped;
  std::vector<std::string> order;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string qid, q0, pid, tag;
    std::size_t rank = 0;
    double score = 0.0;
    if (!(ss >> qid >> q0 >> pid >> rank >> score >> tag) || rank < 1)
      throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": malformed run line");
    if (!grouped.count(qid)) order.push_back(qid);
    grouped[qid].push_back({rank, {pid, score}});
  }
  RetrievalRun run;
  for (const auto& qid : order) {
    auto& rows = grouped[qid];
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    RankedList list;
    std::unordered_set<std::string> seen;
    for (auto& [rank, sp] : rows) {
      if (!seen.insert(sp.id).second)
        throw SchemaError(path.string() + ": passage '" + sp.id + "' repeated for query '" + qid + "'");
      list.push_back(std::move(sp));
    }
    run.query_ids.push_back(qid);
    run.results.push_back(std::move(list));
  }
  return run;
}

// ---------------------------------------------------------------------------
// Index files: JSON header line then raw row-major float64 payload.

template <class T>
void write_index(const std::filesystem::path& path, const EmbeddingIndex<T>& index) {
  index.validate();
  auto out = detail::open_output(path);
  nlohmann::ordered_json header{{"format", "romlab-index"},
                                {"version", 1},
                                {"rows", index.size()},
                                {"dim", index.dim()},
                                {"ids", index.ids}};
  out << header.dump() << '\n';
  for (Eigen::Index i = 0; i < index.vectors.size(); ++i) {
    const double v = static_cast<double>(index.vectors.data()[i]);
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
}

template <class T>
EmbeddingIndex<T> read_index(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(path.string() + ": unreadable index header: " + e.what());
  }
  if (header.value("format", "") != "romlab-index") throw CorruptCheckpoint(path.string() + ": not an index file");
  if (header.value("version", 0) != 1) throw VersionError(path.string() + ": unsupported index version");
  EmbeddingIndex<T> index;
  index.ids = header.at("ids").get<std::vector<std::string>>();
  const auto rows = header.at("rows").get<Eigen::Index>();
  const auto dim = header.at("dim").get<Eigen::Index>();
  if (static_cast<std::size_t>(rows) != index.ids.size()) throw CorruptCheckpoint(path.string() + ": id count mismatch");
  index.vectors.resize(rows, dim);
  for (Eigen::Index i = 0; i < index.vectors.size(); ++i) {
    double v = 0.0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw CorruptCheckpoint(path.string() + ": truncated payload");
    index.vectors.data()[i] = static_cast<T>(v);
  }
  return index;
}

}  // namespace romlab
