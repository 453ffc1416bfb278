#pragma once

// Mask position selection (random and retrieval-oriented), the corruption
// policy, and masked-position statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "romlab/corpus.hpp"
#include "romlab/errors.hpp"
#include "romlab/rng.hpp"

namespace romlab {

enum class MaskStrategy { random, rom };

inline const char* strategy_name(MaskStrategy s) noexcept { return s == MaskStrategy::rom ? "rom" : "random"; }

inline MaskStrategy parse_strategy(const std::string& name) {
  if (name == "random") return MaskStrategy::random;
  if (name == "rom") return MaskStrategy::rom;
  throw InvalidConfig("unknown masking strategy '" + name + "' (expected random|rom)");
}

struct CorruptionMix {
  double mask = 0.8;
  double random_token = 0.1;
  double keep = 0.1;
};

struct MaskingPolicy {
  double rate = 0.15;
  MaskStrategy strategy = MaskStrategy::random;
  CorruptionMix mix;
  bool dynamic = true;

  void validate() const {
    if (!(rate > 0.0 && rate < 1.0)) throw InvalidConfig("masking rate must be in (0, 1)");
    if (mix.mask < 0 || mix.random_token < 0 || mix.keep < 0 ||
        std::abs(mix.mask + mix.random_token + mix.keep - 1.0) > 1e-9)
      throw InvalidConfig("corruption mix must be non-negative and sum to 1");
  }
};

struct MaskScores {
  std::vector<double> random_draws;
  std::vector<double> weights;  // rescaled to [0, 1]
  std::vector<double> score;
};

struct MaskedExample {
  std::string id;
  std::vector<TokenId> input_ids;
  std::vector<TokenId> labels;
  std::vector<std::size_t> positions;  // ascending
};

// k = max(1, round_half_up(rate * n)). The epsilon absorbs binary error in
// products like 0.15 * 10 that are exact halves in decimal.
inline std::size_t mask_count(double rate, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 0.5 + 1e-9));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(n, 1));
}

namespace detail {

// Top-k by score, ties by lower position; returned ascending by position.
inline std::vector<std::size_t> top_k_positions(std::span<const double> score, std::span<const std::size_t> maskable,
                                                std::size_t k) {
  std::vector<std::size_t> order(maskable.size());
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    return score[a] != score[b] ? score[a] > score[b] : maskable[a] < maskable[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(maskable[order[i]]);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

inline std::vector<std::size_t> select_positions_random(std::span<const double> draws,
                                                        std::span<const std::size_t> maskable, double rate) {
  if (maskable.empty()) throw EmptyInput("no maskable positions");
  if (draws.size() != maskable.size()) throw InvalidInput("draws and maskable positions differ in length");
  return detail::top_k_positions(draws, maskable, mask_count(rate, maskable.size()));
}

inline MaskScores rom_scores(std::span<const double> draws, std::span<const double> weights) {
  if (draws.size() != weights.size()) throw InvalidInput("draws and weights differ in length");
  MaskScores s;
  s.random_draws.assign(draws.begin(), draws.end());
  s.weights.assign(weights.begin(), weights.end());
  s.score.resize(draws.size());
  for (std::size_t i = 0; i < draws.size(); ++i) {
    if (!(weights[i] >= 0.0 && weights[i] <= 1.0)) throw InvalidInput("rescaled weight outside [0, 1]");
    s.score[i] = draws[i] + weights[i];
  }
  return s;
}

// Selection score p_r + p_w: uniform draw plus rescaled term weight.
inline std::vector<std::size_t> select_positions_rom(std::span<const double> draws, std::span<const double> weights,
                                                     std::span<const std::size_t> maskable, double rate) {
  if (maskable.empty()) throw EmptyInput("no maskable positions");
  if (draws.size() != maskable.size() || weights.size() != maskable.size())
    throw InvalidInput("draws, weights and maskable positions must align");
  const auto scores = rom_scores(draws, weights);
  return detail::top_k_positions(scores.score, maskable, mask_count(rate, maskable.size()));
}

// One auxiliary stream per sequence supplies, for each selected position in
// ascending order, a mix draw followed by a replacement-token draw.
inline MaskedExample apply_corruption(const TokenSequence& seq, std::span<const std::size_t> positions,
                                      const MaskingPolicy& policy, std::size_t vocab_size, RandomStream& aux) {
  MaskedExample ex;
  ex.id = seq.id;
  ex.input_ids = seq.ids;
  ex.labels.assign(seq.size(), kIgnoreLabel);
  ex.positions.assign(positions.begin(), positions.end());
  const std::uint64_t n_words = vocab_size > static_cast<std::size_t>(kNumSpecial)
                                    ? static_cast<std::uint64_t>(vocab_size) - kNumSpecial
                                    : 0;
  for (std::size_t pos : positions) {
    if (pos >= seq.size() || seq.is_special[pos])
      throw ContractViolation("position " + std::to_string(pos) + " of '" + seq.id + "' is not maskable");
    ex.labels[pos] = seq.ids[pos];
    const double u = aux.uniform();
    const std::uint64_t replacement = aux.next_u64();
    if (u < policy.mix.mask) {
      ex.input_ids[pos] = kMaskId;
    } else if (u < policy.mix.mask + policy.mix.random_token && n_words > 0) {
      ex.input_ids[pos] = static_cast<TokenId>(
          kNumSpecial + static_cast<std::uint64_t>((static_cast<unsigned __int128>(replacement) * n_words) >> 64));
    }
  }
  return ex;
}

inline std::vector<double> draw_mask_scores(std::uint64_t seed, std::uint64_t ordinal, std::uint64_t epoch,
                                            std::size_t n) {
  RandomStream rs(seed, Purpose::mask_scores, {ordinal, epoch});
  std::vector<double> draws(n);
  for (auto& d : draws) d = rs.uniform32();
  return draws;
}

// Full masking of one sequence. Draws derive from (seed, ordinal, epoch); with
// dynamic masking off the epoch is pinned to 0. `rescaled_weights` is required for ROM.
inline MaskedExample mask_sequence(const TokenSequence& seq, const MaskingPolicy& policy,
                                   const std::vector<double>* rescaled_weights, std::size_t vocab_size,
                                   std::uint64_t seed, std::uint64_t ordinal, std::uint64_t epoch = 0) {
  const std::uint64_t e = policy.dynamic ? epoch : 0;
  const auto maskable = seq.maskable_positions();
  if (maskable.empty()) throw EmptyInput("sequence '" + seq.id + "' has no maskable positions");
  const auto draws = draw_mask_scores(seed, ordinal, e, maskable.size());
  std::vector<std::size_t> positions;
  if (policy.strategy == MaskStrategy::rom) {
    if (!rescaled_weights) throw ConfigError("ROM masking of '" + seq.id + "' requires term weights");
    if (rescaled_weights->size() != maskable.size())
      throw SchemaError("term weights for '" + seq.id + "' do not match its length");
    positions = select_positions_rom(draws, *rescaled_weights, maskable, policy.rate);
  } else {
    positions = select_positions_random(draws, maskable, policy.rate);
  }
  RandomStream aux(seed, Purpose::corruption, {ordinal, e});
  return apply_corruption(seq, positions, policy, vocab_size, aux);
}

struct MaskingReport {
  std::string strategy;
  std::uint64_t masked_total = 0;
  std::uint64_t stop_punct_masked = 0;

  double fraction() const {
    if (masked_total == 0) throw EmptyInput("no masked positions");
    return static_cast<double>(stop_punct_masked) / static_cast<double>(masked_total);
  }
};

// Counts are integers; the fraction is formed once at the end.
inline MaskingReport masking_statistics(std::span<const MaskedExample> examples,
                                        std::span<const std::vector<bool>> flags, std::string strategy) {
  if (examples.size() != flags.size()) throw InvalidInput("examples and flags differ in length");
  MaskingReport r{std::move(strategy), 0, 0};
  for (std::size_t i = 0; i < examples.size(); ++i) {
    for (std::size_t pos : examples[i].positions) {
      if (pos >= flags[i].size()) throw InvalidInput("flags shorter than example '" + examples[i].id + "'");
      ++r.masked_total;
      if (flags[i][pos]) ++r.stop_punct_masked;
    }
  }
  if (r.masked_total == 0) throw EmptyInput("no masked positions");
  return r;
}

inline nlohmann::ordered_json masking_report_json(const MaskingReport& r) {
  nlohmann::ordered_json j;
  j["strategy"] = r.strategy;
  j["masked_total"] = r.masked_total;
  j["stop_punct_masked"] = r.stop_punct_masked;
  j["fraction"] = r.fraction();
  return j;
}

inline void write_masked_jsonl(const std::filesystem::path& path, std::span<const MaskedExample> examples) {
  auto out = detail::open_output(path);
  for (const auto& ex : examples)
    out << nlohmann::ordered_json{{"id", ex.id},
                                  {"input_ids", ex.input_ids},
                                  {"labels", ex.labels},
                                  {"positions", ex.positions}}
               .dump()
        << '\n';
}

// Fraction of non-special tokens flagged as stop-word or punctuation.
inline double flagged_token_rate(std::span<const TokenSequence> corpus) {
  std::uint64_t flagged = 0, total = 0;
  for (const auto& seq : corpus)
    for (std::size_t i = 0; i < seq.size(); ++i)
      if (!seq.is_special[i]) {
        ++total;
        flagged += seq.is_stop_or_punct[i] ? 1 : 0;
      }
  if (total == 0) throw EmptyInput("corpus has no tokens");
  return static_cast<double>(flagged) / static_cast<double>(total);
}

}  // namespace romlab
