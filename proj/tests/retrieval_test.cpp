#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "romlab/retrieval.hpp"
#include "test_support.hpp"

namespace romlab {
namespace {

EmbeddingIndex<double> make_index(std::vector<std::string> ids, std::initializer_list<std::initializer_list<double>> rows) {
  EmbeddingIndex<double> idx;
  idx.ids = std::move(ids);
  idx.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) idx.vectors(r, c++) = v;
    ++r;
  }
  return idx;
}

RowVector<double> vec(std::initializer_list<double> v) {
  RowVector<double> out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

TEST(SearchTopk, HandComputedScores) {
  const auto idx = make_index({"p1", "p2"}, {{1, 0}, {0, 1}});
  const auto hits = search_topk(idx, vec({1, 0.1}), 2);
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].id, "p1");
  EXPECT_DOUBLE_EQ(hits[0].score, 1.0);
  EXPECT_EQ(hits[1].id, "p2");
  EXPECT_DOUBLE_EQ(hits[1].score, 0.1);
}

TEST(SearchTopk, IdenticalRowsOrderById) {
  const auto idx = make_index({"b", "a", "c"}, {{1, 1}, {1, 1}, {0, 1}});
  const auto hits = search_topk(idx, vec({1, 1}), 3);
  EXPECT_EQ(hits[0].id, "a");
  EXPECT_EQ(hits[1].id, "b");
  EXPECT_EQ(hits[2].id, "c");
}

TEST(SearchTopk, OversizedKReturnsFullRanking) {
  const auto idx = make_index({"p1", "p2"}, {{1, 0}, {0, 1}});
  EXPECT_EQ(search_topk(idx, vec({0, 1}), 10).size(), 2u);
}

TEST(SearchTopk, SelfQueryRanksFirstForUnitRows) {
  RandomStream rs(2);
  EmbeddingIndex<double> idx;
  idx.vectors.resize(50, 8);
  for (int i = 0; i < 50; ++i) {
    idx.ids.push_back("p" + std::to_string(i));
    for (int j = 0; j < 8; ++j) idx.vectors(i, j) = rs.normal();
    idx.vectors.row(i).normalize();
  }
  for (int i = 0; i < 50; ++i)
    EXPECT_EQ(search_topk(idx, RowVector<double>(idx.vectors.row(i)), 1)[0].id, idx.ids[static_cast<std::size_t>(i)]);
}

TEST(SearchTopk, MatchesFullSortAtAnyBlockSize) {
  RandomStream rs(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + rs.below(300));
    const auto d = static_cast<Eigen::Index>(1 + rs.below(32));
    EmbeddingIndex<double> idx;
    idx.vectors.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      idx.ids.push_back("p" + std::to_string(rs.below(100000)) + "_" + std::to_string(i));
      for (Eigen::Index j = 0; j < d; ++j) idx.vectors(i, j) = static_cast<double>(rs.below(5));  // many ties
    }
    RowVector<double> q(d);
    for (Eigen::Index j = 0; j < d; ++j) q(j) = static_cast<double>(rs.below(3));
    const std::size_t k = 1 + rs.below(static_cast<std::uint64_t>(n) + 5);

    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> s(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) s[i] = idx.vectors.row(static_cast<Eigen::Index>(i)).dot(q);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return s[a] != s[b] ? s[a] > s[b] : idx.ids[a] < idx.ids[b];
    });
    order.resize(std::min(k, order.size()));

    for (std::size_t block : {1u, 7u, 256u}) {
      const auto hits = search_topk(idx, q, k, false, block);
      ASSERT_EQ(hits.size(), order.size());
      for (std::size_t r = 0; r < hits.size(); ++r) EXPECT_EQ(hits[r].id, idx.ids[order[r]]);
    }
  }
}

TEST(SearchTopk, CosineIgnoresRowNorm) {
  const auto idx = make_index({"long", "short"}, {{10, 1}, {1, 0}});
  EXPECT_EQ(search_topk(idx, vec({1, 0}), 1)[0].id, "long");
  EXPECT_EQ(search_topk(idx, vec({1, 0}), 1, true)[0].id, "short");
}

TEST(SearchTopk, RejectsDimensionMismatch) {
  const auto idx = make_index({"p1"}, {{1, 0}});
  EXPECT_THROW(search_topk(idx, vec({1, 0, 0}), 1), InvalidInput);
}

RankedList ranked(std::initializer_list<const char*> ids) {
  RankedList out;
  double s = 100;
  for (const char* id : ids) out.push_back({id, s--});
  return out;
}

TEST(EvaluateRun, ReciprocalRankDefinition) {
  RetrievalRun run{{"q"}, {ranked({"a", "b", "rel", "c"})}};
  EXPECT_NEAR(evaluate_run(run, {{"q", "rel", 1}}).mrr10, 1.0 / 3.0, 1e-12);
}

TEST(EvaluateRun, CutoffAtTen) {
  RetrievalRun run{{"q"}, {ranked({"1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "rel"})}};
  const auto m = evaluate_run(run, {{"q", "rel", 1}});
  EXPECT_DOUBLE_EQ(m.mrr10, 0.0);
  EXPECT_DOUBLE_EQ(m.r20, 1.0);
}

TEST(EvaluateRun, TwoQueryExample) {
  RetrievalRun run{{"q1", "q2"}, {ranked({"r1", "x"}), ranked({"x", "y", "z", "r2"})}};
  EXPECT_DOUBLE_EQ(evaluate_run(run, {{"q1", "r1", 1}, {"q2", "r2", 1}}).mrr10, 0.625);

  RetrievalRun partial{{"q"}, {ranked({"a", "rel1"})}};
  EXPECT_DOUBLE_EQ(evaluate_run(partial, {{"q", "rel1", 1}, {"q", "rel2", 1}}).r20, 0.5);
}

TEST(EvaluateRun, SkipsUnjudgedQueriesWithWarning) {
  RetrievalRun run{{"q1", "ghost"}, {ranked({"r1"}), ranked({"r1"})}};
  int warnings = 0;
  const auto m = evaluate_run(run, {{"q1", "r1", 1}}, [&](const std::string&) { ++warnings; });
  EXPECT_EQ(m.queries, 1u);
  EXPECT_EQ(warnings, 1);
  EXPECT_THROW(evaluate_run(run, {}), EmptyInput);
}

TEST(EvaluateRun, RecallIsMonotoneAndBounded) {
  RandomStream rs(4);
  for (int trial = 0; trial < 100; ++trial) {
    RetrievalRun run;
    std::vector<Judgment> judgments;
    for (int q = 0; q < 5; ++q) {
      const std::string qid = "q" + std::to_string(q);
      run.query_ids.push_back(qid);
      RankedList list;
      const auto len = rs.below(1200);
      for (std::uint64_t r = 0; r < len; ++r) list.push_back({"p" + std::to_string(r), -static_cast<double>(r)});
      run.results.push_back(list);
      for (int j = 0; j < 3; ++j) judgments.push_back({qid, "p" + std::to_string(rs.below(1500)), 1});
    }
    const auto m = evaluate_run(run, judgments, null_sink());
    EXPECT_LE(m.r5, m.r20);
    EXPECT_LE(m.r20, m.r100);
    EXPECT_LE(m.r100, m.r1000);
    EXPECT_LE(m.r1000, 1.0);
    EXPECT_GE(m.mrr10, 0.0);
    EXPECT_LE(m.mrr10, 1.0);
  }
}

TEST(Metrics, JsonUsesFourDecimals) {
  RunMetrics m{1.0 / 3.0, 0.5, 0.625, 1.0, 1.0, 2};
  const auto j = nlohmann::json::parse(metrics_json(m));
  EXPECT_DOUBLE_EQ(j["MRR@10"].get<double>(), 0.3333);
  EXPECT_NE(metrics_json(m).find("\"MRR@10\": 0.3333,"), std::string::npos);
}

TEST(TrecRun, RoundTrip) {
  const auto dir = testing::scratch_dir("trec");
  RetrievalRun run{{"q1", "q2"}, {ranked({"a", "b"}), ranked({"c"})}};
  write_trec_run(dir / "run.trec", run, "rom");
  EXPECT_EQ(testing::read_file(dir / "run.trec"), "q1 Q0 a 1 100 rom\nq1 Q0 b 2 99 rom\nq2 Q0 c 1 100 rom\n");
  const auto back = read_trec_run(dir / "run.trec");
  ASSERT_EQ(back.query_ids, run.query_ids);
  EXPECT_EQ(back.results[0][1].id, "b");
}

TEST(Index, EncodeIsParallelSafeAndRoundTrips) {
  const auto config = testing::tiny_config(1, 2, 8, 20, 16, 12);
  const auto params = Parameters<double>::initialize(config, 5);
  RandomStream rs(1);
  std::vector<TokenSequence> passages;
  for (int i = 0; i < 30; ++i) {
    TokenSequence s;
    s.id = "p" + std::to_string(i);
    s.ids = testing::random_sequence(rs, 6, 20);
    passages.push_back(s);
  }
  passages.push_back(passages[0]);
  passages.back().id = "dup";
  const auto serial = encode_corpus(params, passages, 1);
  const auto parallel = encode_corpus(params, passages, 4);
  EXPECT_EQ(serial.vectors, parallel.vectors);
  EXPECT_EQ(serial.vectors.rows(), 31);
  EXPECT_EQ(serial.vectors.row(0), serial.vectors.row(30));
  EXPECT_THROW(encode_corpus(params, {}, 1), EmptyInput);

  const auto dir = testing::scratch_dir("index");
  write_index(dir / "index.bin", serial);
  const auto back = read_index<double>(dir / "index.bin");
  EXPECT_EQ(back.ids, serial.ids);
  EXPECT_EQ(back.vectors, serial.vectors);
}

}  // namespace
}  // namespace romlab
