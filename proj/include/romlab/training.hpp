#pragma once

// Training loops: MLM pre-training (random or ROM masking), span-contrastive
// warm-up, and in-batch-negative dual-encoder fine-tuning.
//
// Every step computes per-example gradients into private slots and reduces them
// in example order, so results are bitwise independent of the worker count.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "romlab/checkpoint.hpp"
#include "romlab/corpus.hpp"
#include "romlab/errors.hpp"
#include "romlab/log.hpp"
#include "romlab/masking.hpp"
#include "romlab/model.hpp"
#include "romlab/optim.hpp"
#include "romlab/parallel.hpp"
#include "romlab/rng.hpp"
#include "romlab/termweight.hpp"

namespace romlab {

struct LossCurve {
  std::vector<std::uint64_t> steps;
  std::vector<double> loss;
  std::vector<double> contrastive;  // empty unless the stage has a contrastive term

  void add(std::uint64_t step, double l) {
    steps.push_back(step);
    loss.push_back(l);
  }
  void add(std::uint64_t step, double l, double c) {
    add(step, l);
    contrastive.push_back(c);
  }
  bool empty() const noexcept { return loss.empty(); }
  double first() const { return loss.front(); }
  double last() const { return loss.back(); }

  std::string to_csv() const {
    std::string out = contrastive.empty() ? "step,loss\n" : "step,loss,contrastive_loss\n";
    char buf[96];
    for (std::size_t i = 0; i < loss.size(); ++i) {
      if (contrastive.empty())
        std::snprintf(buf, sizeof buf, "%llu,%.9g\n", static_cast<unsigned long long>(steps[i]), loss[i]);
      else
        std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g\n", static_cast<unsigned long long>(steps[i]), loss[i],
                      contrastive[i]);
      out += buf;
    }
    return out;
  }

  void write_csv(const std::filesystem::path& path) const {
    auto out = detail::open_output(path);
    out << to_csv();
  }
};

// ---------------------------------------------------------------------------
// In-batch contrastive objective

template <class T>
struct ContrastiveResult {
  double loss = 0.0;
  double accuracy = 0.0;
  Matrix<T> d_anchors;
  Matrix<T> d_candidates;
};

// Row i of anchors is paired with row i of candidates; every other candidate in
// the batch is a negative. Scores are dot products divided by `temperature`.
// With `symmetric`, the column-wise direction is averaged in.
template <class T>
ContrastiveResult<T> in_batch_contrastive(const Matrix<T>& anchors, const Matrix<T>& candidates, double temperature,
                                          bool symmetric = false) {
  const Eigen::Index b = anchors.rows();
  if (b < 2) throw ConfigError("in-batch contrastive loss needs a batch of at least 2");
  if (candidates.rows() != b || candidates.cols() != anchors.cols())
    throw InvalidInput("anchor and candidate matrices must have the same shape");
  if (!(temperature > 0.0)) throw InvalidConfig("temperature must be > 0");

  const Matrix<double> a = anchors.template cast<double>();
  const Matrix<double> c = candidates.template cast<double>();
  const Matrix<double> scores = (a * c.transpose()) / temperature;

  auto row_softmax_ce = [](const Matrix<double>& s, Matrix<double>& ds, double& loss, double& correct) {
    const Eigen::Index n = s.rows();
    ds.resize(n, s.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double top = s.row(i).maxCoeff();
      RowVector<double> e = (s.row(i).array() - top).exp().matrix();
      const double total = e.sum();
      loss += std::log(total) + top - s(i, i);
      ds.row(i) = e / total;
      ds(i, i) -= 1.0;
      Eigen::Index best = 0;
      for (Eigen::Index j = 1; j < s.cols(); ++j)
        if (s(i, j) > s(i, best)) best = j;
      correct += best == i ? 1.0 : 0.0;
    }
  };

  double loss = 0.0, correct = 0.0;
  Matrix<double> ds;
  row_softmax_ce(scores, ds, loss, correct);
  const double inv = 1.0 / static_cast<double>(b);
  ds *= inv;
  loss *= inv;
  ContrastiveResult<T> out;
  out.accuracy = correct * inv;
  if (symmetric) {
    double loss_t = 0.0, correct_t = 0.0;
    Matrix<double> ds_t;
    row_softmax_ce(Matrix<double>(scores.transpose()), ds_t, loss_t, correct_t);
    ds_t *= inv;
    loss = 0.5 * (loss + loss_t * inv);
    ds = 0.5 * (ds + Matrix<double>(ds_t.transpose()));
  }
  out.loss = loss;
  out.d_anchors = ((ds * c) / temperature).template cast<T>();
  out.d_candidates = ((ds.transpose() * a) / temperature).template cast<T>();
  return out;
}

// ---------------------------------------------------------------------------
// Shared step machinery

namespace detail {

template <class T>
struct GradientSlots {
  std::vector<Parameters<T>> slots;
  Parameters<T> total;

  void prepare(const ModelConfig& config, std::size_t n) {
    if (slots.size() < n) slots.resize(n, Parameters<T>::zeros(config));
    if (total.size() == 0) total = Parameters<T>::zeros(config);
    for (std::size_t i = 0; i < n; ++i) slots[i].set_zero();
  }

  // total[t] = slot[0][t] + slot[1][t] + ... in slot order, independent of threads.
  const Parameters<T>& reduce(std::size_t n, unsigned threads) {
    parallel_for(total.size(), threads, [&](std::size_t t) {
      total.tensors[t] = slots[0].tensors[t];
      for (std::size_t i = 1; i < n; ++i) total.tensors[t] += slots[i].tensors[t];
    });
    return total;
  }
};

// Batch items walk per-epoch shuffles of [0, n); epoch e uses its own stream.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) { reshuffle(); }

  struct Item {
    std::size_t index;
    std::uint64_t epoch;
  };

  std::vector<Item> next(std::size_t count) {
    std::vector<Item> out;
    out.reserve(count);
    while (out.size() < count) {
      if (cursor_ == order_.size()) {
        ++epoch_;
        reshuffle();
      }
      out.push_back({order_[cursor_++], epoch_});
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    RandomStream rs(seed_, Purpose::batch_order, {epoch_});
    rs.shuffle(order_.begin(), order_.end());
    cursor_ = 0;
  }

  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline std::string format_step_dir(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06llu", static_cast<unsigned long long>(step));
  return buf;
}

}  // namespace detail

// Joins term-weight records to sequences by id and rescales them to [0, 1].
// Missing records are reported together.
inline std::vector<std::vector<double>> rescaled_weights_for(const std::vector<TokenSequence>& sequences,
                                                             const std::vector<TermWeightRecord>& records) {
  std::unordered_map<std::string, const TermWeightRecord*> by_id;
  for (const auto& r : records) by_id.emplace(r.id, &r);
  std::vector<std::vector<double>> out;
  out.reserve(sequences.size());
  std::vector<std::string> missing;
  for (const auto& seq : sequences) {
    auto it = by_id.find(seq.id);
    if (it == by_id.end()) {
      missing.push_back(seq.id);
      out.emplace_back();
      continue;
    }
    check_weights_match(*it->second, seq);
    out.push_back(minmax_rescale(*it->second));
  }
  if (!missing.empty()) {
    std::string msg = "ROM masking needs a term-weight record for every sequence; missing " +
                      std::to_string(missing.size()) + ":";
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 20); ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ...";
    throw ConfigError(msg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// MLM pre-training

struct PretrainConfig {
  MaskingPolicy masking;
  std::uint64_t steps = 300;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double warmup_frac = 0.1;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::uint64_t checkpoint_every = 0;  // 0: no intermediate checkpoints
  std::filesystem::path checkpoint_dir;
  std::uint64_t weight_refresh_every = 0;  // 0: weights are fixed in advance
};

namespace detail {

inline std::vector<std::size_t> usable_sequences(const std::vector<TokenSequence>& corpus, std::size_t min_tokens,
                                                 const LogSink& log) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].maskable_count() >= min_tokens)
      keep.push_back(i);
    else
      log("skipping '" + corpus[i].id + "': fewer than " + std::to_string(min_tokens) + " tokens");
  }
  return keep;
}

// Contrastive term weights from the model's own last-layer [CLS] attention.
template <class T>
std::vector<std::vector<double>> self_attention_weights(const Parameters<T>& params,
                                                        const std::vector<TokenSequence>& corpus, unsigned threads) {
  std::vector<std::vector<double>> out(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    const auto tr = forward(params, corpus[i].ids);
    AttentionDumpRecord rec{corpus[i].id, {}, cls_attention_distribution(tr)};
    out[i] = minmax_rescale(contrastive_term_distribution(rec));
  });
  return out;
}

}  // namespace detail

// Runs masking -> forward -> loss -> gradients -> AdamW per step. For ROM,
// `rescaled_weights[i]` must align with corpus[i]'s maskable positions.
template <class T>
LossCurve pretrain_mlm(Parameters<T>& params, const std::vector<TokenSequence>& corpus,
                       std::vector<std::vector<double>> rescaled_weights, const PretrainConfig& cfg,
                       const LogSink& log = stderr_sink()) {
  cfg.masking.validate();
  if (corpus.empty()) throw EmptyInput("pre-training corpus is empty");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const bool rom = cfg.masking.strategy == MaskStrategy::rom;
  if (rom && rescaled_weights.size() != corpus.size())
    throw ConfigError("ROM pre-training needs one weight vector per sequence");

  const auto usable = detail::usable_sequences(corpus, 1, log);
  if (usable.empty()) throw EmptyInput("no sequence has a maskable token");
  const std::size_t vocab = static_cast<std::size_t>(params.config.vocab_size);
  const unsigned threads = std::max(1u, cfg.threads);

  auto state = AdamWState<T>::for_params(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  detail::EpochSampler sampler(usable.size(), cfg.seed);
  detail::GradientSlots<T> grads;
  LossCurve curve;

  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    if (rom && cfg.weight_refresh_every > 0 && step > 0 && step % cfg.weight_refresh_every == 0)
      rescaled_weights = detail::self_attention_weights(params, corpus, threads);

    const auto items = sampler.next(cfg.batch_size);
    const std::size_t b = items.size();
    std::vector<MaskedExample> examples(b);
    parallel_for(b, threads, [&](std::size_t i) {
      const std::size_t idx = usable[items[i].index];
      examples[i] = mask_sequence(corpus[idx], cfg.masking, rom ? &rescaled_weights[idx] : nullptr, vocab, cfg.seed,
                                  idx, items[i].epoch);
    });
    std::size_t masked = 0;
    for (const auto& ex : examples) masked += ex.positions.size();
    const T scale = T(1) / static_cast<T>(masked);

    grads.prepare(params.config, b);
    std::vector<double> losses(b, 0.0);
    parallel_for(b, threads, [&](std::size_t i) {
      const ForwardOptions opts{true, derive_seed(cfg.seed, Purpose::dropout, {step, i})};
      const auto tr = forward(params, examples[i].input_ids, opts);
      losses[i] = mlm_loss_backward(params, tr, examples[i].labels, scale, grads.slots[i]);
    });
    double loss = 0.0;
    for (double l : losses) loss += l;
    loss /= static_cast<double>(masked);
    if (!std::isfinite(loss)) throw NumericError("pre-training loss became non-finite at step " + std::to_string(step));

    const auto& total = grads.reduce(b, threads);
    adamw_step(params, total, state, warmup_linear_lr(cfg.lr, step, cfg.steps, cfg.warmup_frac));
    curve.add(step, loss);

    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && (step + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(params, cfg.checkpoint_dir / detail::format_step_dir(step + 1));
  }
  return curve;
}

// Convenience overload joining weight records by sequence id.
template <class T>
LossCurve pretrain_mlm(Parameters<T>& params, const std::vector<TokenSequence>& corpus,
                       const std::vector<TermWeightRecord>* weights, const PretrainConfig& cfg,
                       const LogSink& log = stderr_sink()) {
  std::vector<std::vector<double>> rescaled;
  if (cfg.masking.strategy == MaskStrategy::rom) {
    if (!weights) throw ConfigError("ROM pre-training requires a term-weight source");
    rescaled = rescaled_weights_for(corpus, *weights);
  }
  return pretrain_mlm(params, corpus, std::move(rescaled), cfg, log);
}

// ---------------------------------------------------------------------------
// Span-contrastive warm-up

struct SpanPair {
  std::size_t first_begin, first_end;    // half-open, in maskable-position coordinates
  std::size_t second_begin, second_end;
};

// Two disjoint, non-empty contiguous spans over m >= 2 content tokens: a split
// point divides the passage and each side contributes one span covering at
// least half of its side.
inline SpanPair sample_span_pair(std::size_t m, RandomStream& rs) {
  if (m < 2) throw InvalidInput("span sampling needs at least 2 tokens");
  const std::size_t split = 1 + static_cast<std::size_t>(rs.below(m - 1));
  auto pick = [&](std::size_t lo, std::size_t hi) {
    const std::size_t width = hi - lo;
    const std::size_t min_len = (width + 1) / 2;
    const std::size_t len = min_len + static_cast<std::size_t>(rs.below(width - min_len + 1));
    const std::size_t start = lo + static_cast<std::size_t>(rs.below(width - len + 1));
    return std::pair{start, start + len};
  };
  const auto [a0, a1] = pick(0, split);
  const auto [b0, b1] = pick(split, m);
  return {a0, a1, b0, b1};
}

inline std::vector<TokenId> span_sequence(const TokenSequence& seq, std::size_t begin, std::size_t end) {
  const auto positions = seq.maskable_positions();
  std::vector<TokenId> ids{kClsId};
  for (std::size_t i = begin; i < end; ++i) ids.push_back(seq.ids[positions[i]]);
  ids.push_back(kSepId);
  return ids;
}

struct WarmupConfig {
  MaskingPolicy masking;
  std::uint64_t steps = 100;
  std::size_t batch_size = 16;
  double lr = 5e-4;
  double warmup_frac = 0.1;
  double weight_decay = 0.01;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

// Joint objective: MLM loss on the masked passage plus a symmetric in-batch
// loss that pairs the two spans of each passage.
template <class T>
LossCurve contrastive_warmup(Parameters<T>& params, const std::vector<TokenSequence>& corpus,
                             std::vector<std::vector<double>> rescaled_weights, const WarmupConfig& cfg,
                             const LogSink& log = stderr_sink()) {
  cfg.masking.validate();
  if (cfg.batch_size < 2) throw ConfigError("warm-up batch_size must be >= 2 for in-batch negatives");
  if (corpus.empty()) throw EmptyInput("warm-up corpus is empty");
  const bool rom = cfg.masking.strategy == MaskStrategy::rom;
  if (rom && rescaled_weights.size() != corpus.size())
    throw ConfigError("ROM warm-up needs one weight vector per sequence");
  const auto usable = detail::usable_sequences(corpus, 2, log);
  if (usable.size() < 2) throw ConfigError("warm-up needs at least two passages with >= 2 tokens");
  const std::size_t vocab = static_cast<std::size_t>(params.config.vocab_size);
  const unsigned threads = std::max(1u, cfg.threads);

  auto state = AdamWState<T>::for_params(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  detail::EpochSampler sampler(usable.size(), cfg.seed);
  detail::GradientSlots<T> grads;
  LossCurve curve;
  const Eigen::Index d = params.config.hidden;

  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    const auto items = sampler.next(cfg.batch_size);
    const std::size_t b = items.size();
    std::vector<MaskedExample> examples(b);
    std::vector<std::vector<TokenId>> first(b), second(b);
    parallel_for(b, threads, [&](std::size_t i) {
      const std::size_t idx = usable[items[i].index];
      const auto& seq = corpus[idx];
      examples[i] = mask_sequence(seq, cfg.masking, rom ? &rescaled_weights[idx] : nullptr, vocab, cfg.seed, idx,
                                  items[i].epoch);
      RandomStream rs(cfg.seed, Purpose::spans, {idx, items[i].epoch});
      const auto sp = sample_span_pair(seq.maskable_count(), rs);
      first[i] = span_sequence(seq, sp.first_begin, sp.first_end);
      second[i] = span_sequence(seq, sp.second_begin, sp.second_end);
    });

    std::vector<ForwardTrace<T>> first_tr(b), second_tr(b);
    parallel_for(2 * b, threads, [&](std::size_t k) {
      const std::size_t i = k / 2;
      const bool is_first = k % 2 == 0;
      const ForwardOptions opts{true, derive_seed(cfg.seed, Purpose::dropout, {step, i, is_first ? 1u : 2u})};
      (is_first ? first_tr[i] : second_tr[i]) = forward(params, is_first ? first[i] : second[i], opts);
    });
    Matrix<T> anchors(static_cast<Eigen::Index>(b), d), candidates(static_cast<Eigen::Index>(b), d);
    for (std::size_t i = 0; i < b; ++i) {
      anchors.row(static_cast<Eigen::Index>(i)) = first_tr[i].hidden.row(0);
      candidates.row(static_cast<Eigen::Index>(i)) = second_tr[i].hidden.row(0);
    }
    const auto con = in_batch_contrastive(anchors, candidates, cfg.temperature, /*symmetric=*/true);

    std::size_t masked = 0;
    for (const auto& ex : examples) masked += ex.positions.size();
    const T scale = T(1) / static_cast<T>(masked);
    grads.prepare(params.config, b);
    std::vector<double> losses(b, 0.0);
    parallel_for(b, threads, [&](std::size_t i) {
      const ForwardOptions opts{true, derive_seed(cfg.seed, Purpose::dropout, {step, i, 0u})};
      const auto tr = forward(params, examples[i].input_ids, opts);
      losses[i] = mlm_loss_backward(params, tr, examples[i].labels, scale, grads.slots[i]);
      Matrix<T> dh = Matrix<T>::Zero(first_tr[i].hidden.rows(), d);
      dh.row(0) = con.d_anchors.row(static_cast<Eigen::Index>(i));
      backward(params, first_tr[i], dh, grads.slots[i]);
      dh = Matrix<T>::Zero(second_tr[i].hidden.rows(), d);
      dh.row(0) = con.d_candidates.row(static_cast<Eigen::Index>(i));
      backward(params, second_tr[i], dh, grads.slots[i]);
    });
    double mlm = 0.0;
    for (double l : losses) mlm += l;
    mlm /= static_cast<double>(masked);
    const double total_loss = mlm + con.loss;
    if (!std::isfinite(total_loss)) throw NumericError("warm-up loss became non-finite at step " + std::to_string(step));

    const auto& total = grads.reduce(b, threads);
    adamw_step(params, total, state, warmup_linear_lr(cfg.lr, step, cfg.steps, cfg.warmup_frac));
    curve.add(step, total_loss, con.loss);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Dual-encoder fine-tuning

struct TrainingPair {
  TokenSequence query;
  TokenSequence passage;
};

struct FinetuneConfig {
  std::uint64_t epochs = 3;
  std::size_t batch_size = 64;
  double lr = 5e-6;
  double warmup_frac = 0.0;
  double weight_decay = 0.01;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

namespace detail {

template <class T>
std::vector<std::vector<std::size_t>> finetune_batches(std::size_t n, const FinetuneConfig& cfg) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::uint64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    RandomStream rs(cfg.seed, Purpose::batch_order, {epoch, 0xF1u});
    rs.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      if (end - start < 2) continue;  // a lone pair has no in-batch negative
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return batches;
}

}  // namespace detail

// One shared encoder embeds queries and passages; each query is scored against
// every passage of its batch and trained to pick its own.
template <class T>
LossCurve finetune_dual(Parameters<T>& params, const std::vector<TrainingPair>& pairs, const FinetuneConfig& cfg,
                        const LogSink& log = stderr_sink()) {
  if (cfg.batch_size < 2) throw ConfigError("fine-tune batch_size must be >= 2 for in-batch negatives");
  if (pairs.size() < 2) throw EmptyInput("fine-tuning needs at least two training pairs");
  const unsigned threads = std::max(1u, cfg.threads);
  const auto batches = detail::finetune_batches<T>(pairs.size(), cfg);
  auto state = AdamWState<T>::for_params(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  detail::GradientSlots<T> grads;
  LossCurve curve;
  const Eigen::Index d = params.config.hidden;
  std::size_t dup_batches = 0;
  std::string first_dup;

  for (std::uint64_t step = 0; step < batches.size(); ++step) {
    const auto& batch = batches[step];
    const std::size_t b = batch.size();
    {
      std::unordered_set<std::string> ids;
      for (std::size_t idx : batch)
        if (!ids.insert(pairs[idx].passage.id).second) {
          if (dup_batches++ == 0) first_dup = "'" + pairs[idx].passage.id + "' in batch " + std::to_string(step);
          break;
        }
    }
    std::vector<ForwardTrace<T>> q_tr(b), p_tr(b);
    parallel_for(2 * b, threads, [&](std::size_t k) {
      const std::size_t i = k / 2;
      const bool query = k % 2 == 0;
      const auto& seq = query ? pairs[batch[i]].query : pairs[batch[i]].passage;
      const ForwardOptions opts{true, derive_seed(cfg.seed, Purpose::dropout, {0xF1u, step, i, query ? 1u : 2u})};
      (query ? q_tr[i] : p_tr[i]) = forward(params, seq.ids, opts);
    });
    Matrix<T> q(static_cast<Eigen::Index>(b), d), p(static_cast<Eigen::Index>(b), d);
    for (std::size_t i = 0; i < b; ++i) {
      q.row(static_cast<Eigen::Index>(i)) = q_tr[i].hidden.row(0);
      p.row(static_cast<Eigen::Index>(i)) = p_tr[i].hidden.row(0);
    }
    const auto con = in_batch_contrastive(q, p, cfg.temperature);
    if (!std::isfinite(con.loss)) throw NumericError("fine-tune loss became non-finite at step " + std::to_string(step));

    grads.prepare(params.config, b);
    parallel_for(b, threads, [&](std::size_t i) {
      Matrix<T> dh = Matrix<T>::Zero(q_tr[i].hidden.rows(), d);
      dh.row(0) = con.d_anchors.row(static_cast<Eigen::Index>(i));
      backward(params, q_tr[i], dh, grads.slots[i]);
      dh = Matrix<T>::Zero(p_tr[i].hidden.rows(), d);
      dh.row(0) = con.d_candidates.row(static_cast<Eigen::Index>(i));
      backward(params, p_tr[i], dh, grads.slots[i]);
    });
    const auto& total = grads.reduce(b, threads);
    adamw_step(params, total, state, warmup_linear_lr(cfg.lr, step, batches.size(), cfg.warmup_frac));
    curve.add(step, con.loss);
  }
  // One summary line; per-batch warnings would flood small-corpus runs.
  if (dup_batches > 0)
    log(std::to_string(dup_batches) + " of " + std::to_string(batches.size()) +
        " fine-tune batches repeat a passage (first: " + first_dup + "); in-batch labels are ambiguous there");
  return curve;
}

// Fraction of queries whose own passage scores highest among the passages of
// consecutive groups of `batch_size` pairs (the in-batch retrieval task).
template <class T>
double in_batch_accuracy(const Parameters<T>& params, const std::vector<TrainingPair>& pairs, std::size_t batch_size,
                         unsigned threads = 1) {
  const std::size_t n = pairs.size();
  const Eigen::Index d = params.config.hidden;
  Matrix<T> q(static_cast<Eigen::Index>(n), d), p(static_cast<Eigen::Index>(n), d);
  parallel_for(n, threads, [&](std::size_t i) {
    q.row(static_cast<Eigen::Index>(i)) = encode_text(params, pairs[i].query);
    p.row(static_cast<Eigen::Index>(i)) = encode_text(params, pairs[i].passage);
  });
  std::size_t correct = 0, total = 0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    for (std::size_t i = start; i < end; ++i) {
      std::size_t best = start;
      T best_score = -std::numeric_limits<T>::infinity();
      for (std::size_t j = start; j < end; ++j) {
        const T s = q.row(static_cast<Eigen::Index>(i)).dot(p.row(static_cast<Eigen::Index>(j)));
        if (s > best_score) {
          best_score = s;
          best = j;
        }
      }
      correct += best == i ? 1 : 0;
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace romlab
