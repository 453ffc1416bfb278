// Acceptance suite: one PASS/FAIL line per criterion, exit status = number of failures.
//
//   acceptance            run every criterion
//   acceptance NAME...    run only the named criteria

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "romlab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace romlab;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("romlab_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_command(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const fs::path kSample = fs::path(ROMLAB_DATA_DIR) / "sample" / "passages.jsonl";

// ---------------------------------------------------------------------------

Outcome masking_statistic() {
  auto cfg = parse_pipeline_config(
      ojson{{"corpus", {{"passages", kSample.string()}}}, {"output_dir", fresh_dir("mask_stats").string()}});
  Workspace ws(cfg, null_sink());
  const double corpus_rate = flagged_token_rate(ws.corpus());
  MaskingPolicy random = cfg.masking, rom = cfg.masking;
  random.strategy = MaskStrategy::random;
  rom.strategy = MaskStrategy::rom;
  const double fr = compute_mask_stats(ws, random).fraction();
  const double fo = compute_mask_stats(ws, rom).fraction();
  const bool ok = ws.passages().size() >= 5000 && std::abs(fr - corpus_rate) <= 0.05 && fo <= 0.5 * fr;
  return {ok, fmt("%zu passages; corpus flagged rate %.4f, random %.4f (|diff| %.4f <= 0.05), rom/tf-idf %.4f "
                  "(reduction %.2fx >= 2x)",
                  ws.passages().size(), corpus_rate, fr, std::abs(fr - corpus_rate), fo, fr / fo)};
}

Outcome baseline_reduction() {
  const auto dir = fresh_dir("baseline");
  // A small corpus so pre-training crosses several epochs of dynamic masking.
  auto all = read_passages_jsonl(kSample);
  all.resize(200);
  write_passages_jsonl(dir / "passages.jsonl", all);

  std::vector<std::string> diffs;
  std::size_t compared = 0;
  for (const char* precision : {"fast32", "check64"}) {
    auto base = ojson{{"corpus", {{"passages", (dir / "passages.jsonl").string()}, {"max_seq_len", 48}}},
                      {"vocab", {{"size", 3000}}},
                      {"model", {{"layers", 1}, {"heads", 2}, {"hidden", 16}, {"ffn", 32}, {"dropout", 0.1},
                                 {"precision", precision}}},
                      {"pretrain", {{"steps", 40}, {"batch_size", 16}, {"checkpoint_every", 10}}}};
    // Constant raw weights; import normalizes them to a uniform distribution.
    {
      auto c = parse_pipeline_config(base, {}, {});
      c.output_dir = dir;
      Workspace ws(c, null_sink());
      std::vector<TermWeightRecord> uniform;
      for (const auto& s : ws.corpus())
        uniform.push_back({s.id, std::vector<double>(s.maskable_count(), 0.37), Estimator::imported});
      write_term_weights_jsonl(dir / "uniform.jsonl", uniform);
    }
    const fs::path arm_random = dir / precision / "random", arm_rom = dir / precision / "rom";
    for (const auto& [out, strategy] : {std::pair{arm_random, "random"}, std::pair{arm_rom, "rom"}}) {
      ConfigOverrides f;
      f.out = out.string();
      f.strategy = strategy;
      if (std::string(strategy) == "rom") f.weights = (dir / "uniform.jsonl").string();
      Workspace ws(parse_pipeline_config(base, f), null_sink());
      stage_mask(ws);
      if (std::string(precision) == "check64")
        stage_pretrain<double>(ws);
      else
        stage_pretrain<float>(ws);
    }
    std::vector<fs::path> files = {"masked.jsonl", "pretrain/loss.csv", "pretrain/checkpoint/header.json",
                                   "pretrain/checkpoint/params.bin"};
    for (const char* step : {"step_000010", "step_000020", "step_000030", "step_000040"}) {
      files.push_back(fs::path("pretrain/steps") / step / "header.json");
      files.push_back(fs::path("pretrain/steps") / step / "params.bin");
    }
    for (const auto& f : files) {
      const auto a = slurp(arm_random / f), b = slurp(arm_rom / f);
      ++compared;
      if (a.empty() || a != b) diffs.push_back(std::string(precision) + ":" + f.string());
    }
  }
  std::string detail = fmt("%zu artifact files compared in fast32 and check64, including every periodic checkpoint",
                           compared);
  if (!diffs.empty()) detail += "; differing: " + diffs.front() + (diffs.size() > 1 ? " and others" : "");
  return {diffs.empty(), detail};
}

Outcome monotonicity() {
  RandomStream rs(20240601);
  std::size_t violations = 0, trials = 1000, members_checked = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = 1 + rs.below(80);
    std::vector<std::size_t> maskable(n);
    for (std::size_t i = 0; i < n; ++i) maskable[i] = i + 1;
    std::vector<double> draws(n), weights(n);
    const bool coarse = t % 2 == 1;  // exercises ties
    for (std::size_t i = 0; i < n; ++i) {
      draws[i] = coarse ? static_cast<double>(rs.below(4)) / 4.0 : rs.uniform32();
      weights[i] = coarse ? static_cast<double>(rs.below(5)) / 4.0 : rs.uniform();
    }
    const auto before = select_positions_rom(draws, weights, maskable, 0.15);
    const std::size_t pick = before[rs.below(before.size())];
    auto raised = weights;
    double& w = raised[pick - 1];
    w = std::min(1.0, w + (1.0 - w) * rs.uniform() + (coarse ? 0.25 : 0.0));
    const auto after = select_positions_rom(draws, raised, maskable, 0.15);
    ++members_checked;
    if (!std::binary_search(after.begin(), after.end(), pick)) ++violations;
  }
  return {violations == 0, fmt("%zu trials, %zu evictions of a raised member", members_checked, violations)};
}

// Forward-only objective for finite differences: mean MLM loss plus a fixed
// linear probe on each [CLS] vector so the pooled path is covered too.
struct GradBatch {
  std::vector<std::vector<TokenId>> inputs, labels;
  std::vector<RowVector<double>> probe;
  std::size_t masked = 0;
};

double grad_objective(const Parameters<double>& p, const GradBatch& b) {
  const auto out = forward_mlm(p, b.inputs);
  double loss = mlm_loss(out.logits, b.labels);
  for (std::size_t s = 0; s < b.inputs.size(); ++s) loss += out.traces[s].pooled().dot(b.probe[s]);
  return loss;
}

Outcome gradient_check() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.hidden = 24;
  cfg.ffn = 32;
  cfg.vocab_size = 24;
  cfg.max_seq_len = 10;
  cfg.precision = Precision::check64;
  cfg.init_std = 0.3;
  auto p = Parameters<double>::initialize(cfg, 77);
  RandomStream rs(78);

  GradBatch b;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t words = 3 + s * 2;
    std::vector<TokenId> ids{kClsId}, labels{kIgnoreLabel};
    for (std::size_t w = 0; w < words; ++w) {
      const auto tok = static_cast<TokenId>(kNumSpecial + rs.below(static_cast<std::uint64_t>(cfg.vocab_size - kNumSpecial)));
      const bool mask = w % 2 == 0;
      ids.push_back(mask ? kMaskId : tok);
      labels.push_back(mask ? tok : kIgnoreLabel);
      b.masked += mask;
    }
    ids.push_back(kSepId);
    labels.push_back(kIgnoreLabel);
    b.inputs.push_back(ids);
    b.labels.push_back(labels);
    RowVector<double> v(cfg.hidden);
    for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = rs.normal();
    b.probe.push_back(v);
  }
  // Analytic gradient of the same objective; padding matches forward_mlm.
  auto grads = Parameters<double>::zeros(cfg);
  std::size_t longest = 0;
  for (const auto& s : b.inputs) longest = std::max(longest, s.size());
  for (std::size_t s = 0; s < b.inputs.size(); ++s) {
    auto ids = b.inputs[s];
    auto labels = b.labels[s];
    ids.resize(longest, kPadId);
    labels.resize(longest, kIgnoreLabel);
    const auto tr = forward(p, ids);
    Matrix<double> extra = Matrix<double>::Zero(tr.hidden.rows(), tr.hidden.cols());
    extra.row(0) = b.probe[s];
    mlm_loss_backward(p, tr, labels, 1.0 / static_cast<double>(b.masked), grads, &extra);
  }

  std::map<std::string, std::vector<std::pair<std::size_t, Eigen::Index>>> classes;
  for (std::size_t t = 0; t < p.size(); ++t)
    for (Eigen::Index i = 0; i < p[t].size(); ++i) classes[tensor_class(p.names[t])].push_back({t, i});

  double worst = 0.0;
  std::string worst_at = "-";
  std::size_t checked = 0, smallest_class = SIZE_MAX;
  bool enough = true;
  for (auto& [cls, coords] : classes) {
    rs.shuffle(coords.begin(), coords.end());
    const std::size_t take = std::min<std::size_t>(20, coords.size());
    enough = enough && take >= 20;
    smallest_class = std::min(smallest_class, take);
    for (std::size_t c = 0; c < take; ++c) {
      const auto [t, i] = coords[c];
      double& x = p[t].data()[i];
      const double saved = x, h = 1e-5;
      x = saved + h;
      const double up = grad_objective(p, b);
      x = saved - h;
      const double down = grad_objective(p, b);
      x = saved;
      const double fd = (up - down) / (2 * h);
      const double an = grads[t].data()[i];
      const double err = std::abs(an - fd) / (std::abs(fd) + 1e-8);
      if (err > worst) {
        worst = err;
        worst_at = p.names[t] + "[" + std::to_string(i) + "]";
      }
      ++checked;
    }
  }
  return {enough && worst <= 1e-4,
          fmt("%zu tensor classes, %zu coordinates (>= %zu per class), worst relative error %.3g at %s (<= 1e-4)",
              classes.size(), checked, smallest_class, worst, worst_at.c_str())};
}

Outcome closed_form_losses() {
  // Uniform logits from a real model: zero the MLM head.
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 8;
  cfg.precision = Precision::check64;
  auto p = Parameters<double>::initialize(cfg, 5);
  p.head_weight().setZero();
  p.head_bias().setZero();
  const std::vector<std::vector<TokenId>> inputs = {{kClsId, kMaskId, 9, kMaskId, kSepId}};
  const std::vector<std::vector<TokenId>> labels = {{kIgnoreLabel, 12, kIgnoreLabel, 30, kIgnoreLabel}};
  const double mlm = mlm_loss(forward_mlm(p, inputs).logits, labels);
  const double ln_v = std::log(64.0);

  Matrix<double> eye = Matrix<double>::Identity(2, 2);
  const double one_way = in_batch_contrastive<double>(eye, eye, 1.0).loss;
  const double both = in_batch_contrastive<double>(eye, eye, 1.0, true).loss;
  const double target = std::log1p(std::exp(-1.0));
  const double e1 = std::abs(mlm - ln_v), e2 = std::abs(one_way - target), e3 = std::abs(both - target);
  return {e1 <= 1e-6 && e2 <= 1e-6 && e3 <= 1e-6,
          fmt("uniform MLM %.12f vs ln 64 (err %.2g); in-batch %.12f and span-pair %.12f vs ln(1+e^-1) "
              "(err %.2g, %.2g); tolerance 1e-6",
              mlm, e1, one_way, both, e2, e3)};
}

template <class T>
bool topk_matches_oracle(RandomStream& rs) {
  const std::size_t n = 1 + rs.below(300);
  const Eigen::Index d = 1 + static_cast<Eigen::Index>(rs.below(16));
  const bool coarse = rs.below(3) == 0;  // many exact ties
  const bool cosine = rs.below(4) == 0;
  EmbeddingIndex<T> index;
  index.vectors.resize(static_cast<Eigen::Index>(n), d);
  std::set<std::string> used;
  for (std::size_t i = 0; i < n; ++i) {
    std::string id;
    do id = "x" + std::to_string(rs.below(100000)); while (!used.insert(id).second);
    index.ids.push_back(id);
    for (Eigen::Index j = 0; j < d; ++j)
      index.vectors(static_cast<Eigen::Index>(i), j) =
          static_cast<T>(coarse ? static_cast<double>(rs.below(3)) - 1.0 : rs.normal());
  }
  if (cosine)
    for (std::size_t i = 0; i < n; ++i)
      if (index.vectors.row(static_cast<Eigen::Index>(i)).squaredNorm() == 0) index.vectors(static_cast<Eigen::Index>(i), 0) = 1;
  RowVector<T> q(d);
  for (Eigen::Index j = 0; j < d; ++j) q(j) = static_cast<T>(coarse ? static_cast<double>(rs.below(3)) - 1.0 : rs.normal());
  if (cosine && q.squaredNorm() == 0) q(0) = 1;
  const std::size_t k = 1 + rs.below(n + 10);
  const std::size_t block = 1 + rs.below(64);

  // Oracle: score everything, sort by (score desc, id asc), cut.
  std::vector<std::pair<double, std::string>> all;
  double qn = 0;
  for (Eigen::Index j = 0; j < d; ++j) qn += static_cast<double>(q(j)) * static_cast<double>(q(j));
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0, rn = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double a = static_cast<double>(q(j)), b = static_cast<double>(index.vectors(static_cast<Eigen::Index>(i), j));
      s += a * b;
      rn += b * b;
    }
    if (cosine) s /= std::sqrt(qn) * std::sqrt(rn);
    all.push_back({s, index.ids[i]});
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  all.resize(std::min(k, n));
  const auto got = search_topk(index, q, k, cosine, block);
  if (got.size() != all.size()) return false;
  for (std::size_t i = 0; i < got.size(); ++i)
    if (got[i].id != all[i].second || std::abs(got[i].score - all[i].first) > 1e-9 * (1 + std::abs(all[i].first)))
      return false;
  return true;
}

Outcome oracle_equivalence() {
  RandomStream rs(4242);
  std::size_t topk_ok = 0;
  for (std::size_t t = 0; t < 200; ++t) topk_ok += t % 2 ? topk_matches_oracle<float>(rs) : topk_matches_oracle<double>(rs);

  const auto dir = fresh_dir("oracle");
  const fs::path script = fs::path(ROMLAB_SOURCE_DIR) / "tests" / "oracles" / "score_run.py";
  std::size_t metric_ok = 0;
  double worst = 0.0;
  for (std::size_t r = 0; r < 50; ++r) {
    RetrievalRun run;
    std::vector<Judgment> qrels;
    const std::size_t n_queries = 1 + rs.below(25);
    const std::size_t pool = 20 + rs.below(1500);
    for (std::size_t q = 0; q < n_queries; ++q) {
      const std::string qid = "q" + std::to_string(q);
      run.query_ids.push_back(qid);
      std::vector<std::size_t> docs(pool);
      for (std::size_t i = 0; i < pool; ++i) docs[i] = i;
      rs.shuffle(docs.begin(), docs.end());
      RankedList list;
      const std::size_t depth = 1 + rs.below(std::min<std::size_t>(pool, 1200));
      for (std::size_t i = 0; i < depth; ++i) list.push_back({"d" + std::to_string(docs[i]), 100.0 - static_cast<double>(i)});
      run.results.push_back(list);
      if (q > 0 && rs.below(5) == 0) continue;  // unjudged query
      const std::size_t n_rel = 1 + rs.below(8);
      for (std::size_t j = 0; j < n_rel; ++j)
        qrels.push_back({qid, "d" + std::to_string(rs.below(pool)), static_cast<int>(rs.below(3))});
    }
    qrels.push_back({"q0", "d" + std::to_string(rs.below(pool)), 1});
    write_trec_run(dir / "run.trec", run, "oracle");
    write_judgments_tsv(dir / "qrels.tsv", qrels);
    const auto ours = evaluate_run(read_trec_run(dir / "run.trec"), read_judgments_tsv(dir / "qrels.tsv"), null_sink());
    const std::string cmd = "python3 " + script.string() + " " + (dir / "run.trec").string() + " " +
                            (dir / "qrels.tsv").string() + " > " + (dir / "ref.json").string();
    if (run_command(cmd) != 0) continue;
    const auto ref = ojson::parse(slurp(dir / "ref.json"));
    const double diffs[] = {std::abs(ours.mrr10 - ref["MRR@10"].get<double>()),
                            std::abs(ours.r5 - ref["R@5"].get<double>()),
                            std::abs(ours.r20 - ref["R@20"].get<double>()),
                            std::abs(ours.r100 - ref["R@100"].get<double>()),
                            std::abs(ours.r1000 - ref["R@1000"].get<double>())};
    const double d = *std::max_element(std::begin(diffs), std::end(diffs));
    worst = std::max(worst, d);
    metric_ok += d <= 1e-9 && ours.queries == ref["queries"].get<std::size_t>();
  }
  return {topk_ok == 200 && metric_ok == 50,
          fmt("top-k vs full sort %zu/200; metrics vs reference scorer %zu/50 (max |diff| %.3g <= 1e-9)", topk_ok,
              metric_ok, worst)};
}

Outcome overfit_suites() {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 32;
  c.ffn = 64;
  c.vocab_size = 64;
  c.max_seq_len = 10;
  c.precision = Precision::fast32;
  auto p = Parameters<float>::initialize(c, 1);
  RandomStream rs(3);
  std::vector<TokenSequence> corpus;
  for (int i = 0; i < 32; ++i) {
    TokenSequence s;
    s.id = "s" + std::to_string(i);
    s.ids.push_back(kClsId);
    for (int w = 0; w < 8; ++w) s.ids.push_back(static_cast<TokenId>(kNumSpecial + rs.below(64 - kNumSpecial)));
    s.ids.push_back(kSepId);
    for (auto t : s.ids) {
      s.surface.push_back(t == kClsId ? "[CLS]" : t == kSepId ? "[SEP]" : "w" + std::to_string(t));
      s.is_special.push_back(is_special_id(t));
      s.is_stop_or_punct.push_back(false);
    }
    corpus.push_back(s);
  }
  PretrainConfig pc;
  pc.steps = 300;
  pc.batch_size = 32;
  pc.lr = 1e-2;
  const auto curve = pretrain_mlm(p, corpus, std::vector<std::vector<double>>{}, pc, null_sink());

  ModelConfig dc;
  dc.layers = 1;
  dc.heads = 2;
  dc.hidden = 16;
  dc.ffn = 32;
  dc.vocab_size = 24;
  dc.max_seq_len = 8;
  dc.precision = Precision::check64;
  auto dp = Parameters<double>::initialize(dc, 3);
  auto seq = [](std::string id, std::vector<TokenId> ids) {
    TokenSequence s;
    s.id = std::move(id);
    s.ids = std::move(ids);
    for (auto t : s.ids) {
      s.surface.push_back("w" + std::to_string(t));
      s.is_special.push_back(is_special_id(t));
      s.is_stop_or_punct.push_back(false);
    }
    return s;
  };
  std::vector<TrainingPair> pairs;
  for (int i = 0; i < 8; ++i) {
    const auto a = static_cast<TokenId>(kNumSpecial + 2 * i);
    pairs.push_back({seq("q" + std::to_string(i), {kClsId, a, kSepId}),
                     seq("d" + std::to_string(i), {kClsId, a, static_cast<TokenId>(a + 1), kSepId})});
  }
  FinetuneConfig fc;
  fc.batch_size = 8;
  fc.epochs = 150;
  fc.lr = 1e-2;
  finetune_dual(dp, pairs, fc, null_sink());
  const double acc = in_batch_accuracy(dp, pairs, 8);
  const bool ok = curve.last() < 0.5 && curve.first() >= 5 * curve.last() && acc == 1.0;
  return {ok, fmt("MLM on 32 sequences: %.4f -> %.4f after %zu steps (< 0.5, >= 5x drop); dual encoder in-batch "
                  "accuracy on 8 orthogonal pairs %.3f (== 1)",
                  curve.first(), curve.last(), curve.loss.size(), acc)};
}

Outcome directional_compare() {
  const fs::path config = fs::path(ROMLAB_SOURCE_DIR) / "configs" / "synthetic_compare.json";
  std::string per_seed;
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ConfigOverrides f;
    f.seed = seed;
    f.out = fresh_dir("compare_seed" + std::to_string(seed)).string();
    const auto cfg = load_pipeline_config(config, f);
    const auto res = run_compare<float>(cfg, null_sink());
    const bool win = res.rom.metrics.mrr10 >= res.random.metrics.mrr10;
    wins += win;
    per_seed += fmt("%sseed %llu rom %.4f vs random %.4f", seed == 1 ? "" : "; ",
                    static_cast<unsigned long long>(seed), res.rom.metrics.mrr10, res.random.metrics.mrr10);
  }
  return {wins >= 3, fmt("ROM >= random MRR@10 in %d/5 seeds (need >= 3): ", wins) + per_seed};
}

// Every file under `root`, relative path -> bytes. Manifests are normalized
// to drop the two fields that legitimately differ between runs (worker count, output location).
std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root).string();
    auto bytes = slurp(e.path());
    if (e.path().filename().string().starts_with("manifest")) {
      auto j = ojson::parse(bytes);
      j.erase("threads");
      j["effective_config"].erase("threads");
      j["effective_config"].erase("output_dir");
      bytes = j.dump();
    }
    out[rel] = std::move(bytes);
  }
  return out;
}

Outcome determinism() {
  const auto dir = fresh_dir("determinism");
  const ojson cfg = {{"synthetic",
                      {{"enabled", true},
                       {"train_topics", 12},
                       {"eval_topics", 6},
                       {"passages_per_topic", 8},
                       {"train_pairs_per_topic", 8},
                       {"eval_queries_per_topic", 3}}},
                     {"corpus", {{"max_seq_len", 48}}},
                     {"vocab", {{"size", 3000}}},
                     {"masking", {{"strategy", "rom"}}},
                     {"model", {{"layers", 1}, {"heads", 2}, {"hidden", 16}, {"ffn", 32}, {"dropout", 0.1}}},
                     {"pretrain", {{"steps", 30}, {"batch_size", 16}, {"checkpoint_every", 10}, {"weight_refresh_every", 15}}},
                     {"warmup", {{"enabled", true}, {"steps", 10}, {"batch_size", 8}}},
                     {"finetune", {{"epochs", 2}, {"batch_size", 16}, {"lr", 1e-3}}},
                     {"eval", {{"k", 50}}}};
  {
    std::ofstream(dir / "config.json") << cfg.dump(2);
  }
  const char* stages[] = {"build-vocab", "weights", "mask", "mask-stats", "pretrain", "warmup",
                          "finetune",    "encode",  "search", "eval",     "compare"};
  const std::pair<const char*, int> runs[] = {{"a_t1", 1}, {"b_t1", 1}, {"c_t4", 4}};
  for (const auto& [name, threads] : runs) {
    for (const char* stage : stages) {
      const std::string cmd = std::string(ROMLAB_CLI) + " " + stage + " --config " + (dir / "config.json").string() +
                              " --out " + (dir / name).string() + " --threads " + std::to_string(threads) +
                              " > /dev/null 2>&1";
      if (run_command(cmd) != 0) return {false, std::string("stage '") + stage + "' failed in run " + name};
      if (std::string(stage) != "compare") {
        // Keep each stage's manifest so all of them get compared.
        fs::copy_file(dir / name / "manifest.json", dir / name / (std::string("manifest.") + stage + ".json"),
                      fs::copy_options::overwrite_existing);
      }
    }
    const std::string extra = std::string(ROMLAB_CLI) + " mask-stats --strategy random --config " +
                              (dir / "config.json").string() + " --out " + (dir / name).string() + " --threads " +
                              std::to_string(threads) + " > /dev/null 2>&1";
    if (run_command(extra) != 0) return {false, std::string("mask-stats --strategy random failed in run ") + name};
  }
  const auto a = tree_bytes(dir / "a_t1"), b = tree_bytes(dir / "b_t1"), c = tree_bytes(dir / "c_t4");
  std::vector<std::string> diffs;
  for (const auto& [rel, bytes] : a) {
    auto ib = b.find(rel), ic = c.find(rel);
    if (ib == b.end() || ib->second != bytes) diffs.push_back(rel + " (rerun)");
    if (ic == c.end() || ic->second != bytes) diffs.push_back(rel + " (4 workers)");
  }
  if (b.size() != a.size() || c.size() != a.size()) diffs.push_back("file sets differ");
  std::string detail = fmt("%zu stages in 3 runs (1 worker twice, then 4 workers); %zu files compared byte-for-byte",
                           std::size(stages), a.size());
  if (!diffs.empty()) detail += "; differing: " + diffs.front() + fmt(" (+%zu more)", diffs.size() - 1);
  return {diffs.empty() && a.size() > 20, detail};
}

struct Criterion {
  const char* name;
  double limit_seconds;  // 0 = no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {"masking-statistic", 60, masking_statistic},
      {"baseline-reduction", 300, baseline_reduction},
      {"monotonicity", 0, monotonicity},
      {"gradient-check", 120, gradient_check},
      {"closed-form-losses", 0, closed_form_losses},
      {"oracle-equivalence", 0, oracle_equivalence},
      {"overfit-suites", 300, overfit_suites},
      {"directional-compare", 1800, directional_compare},
      {"determinism", 0, determinism},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failures = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.name)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_seconds == 0 || secs < c.limit_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::string timing = fmt(" [%.1f s", secs);
    timing += c.limit_seconds > 0 ? fmt(" < %.0f s]", c.limit_seconds) : std::string("]");
    if (!in_time) timing += " runtime bound exceeded";
    std::cout << (pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << timing << std::endl;
  }
  std::cout << (failures ? "FAIL" : "PASS") << " acceptance: " << (ran - failures) << "/" << ran << " criteria passed"
            << std::endl;
  return failures;
}
