#pragma once

// Pipeline configuration and stage orchestration behind the rom_lab CLI.
//
// A run is described by one JSON document. User keys are merged over the
// defaults below; unknown keys and type mismatches are rejected before any
// stage runs. Every stage writes its artifacts under output_dir together with
// a manifest holding the effective config and its hash.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "romlab/checkpoint.hpp"
#include "romlab/corpus.hpp"
#include "romlab/errors.hpp"
#include "romlab/log.hpp"
#include "romlab/masking.hpp"
#include "romlab/model.hpp"
#include "romlab/parallel.hpp"
#include "romlab/retrieval.hpp"
#include "romlab/synth.hpp"
#include "romlab/termweight.hpp"
#include "romlab/training.hpp"

namespace romlab {

inline constexpr const char* kVersion = "0.1.0";

using ojson = nlohmann::ordered_json;

inline ojson default_pipeline_config() {
  return ojson::parse(R"({
  "corpus": {
    "passages": "",
    "train_queries": "",
    "train_pairs": "",
    "eval_queries": "",
    "eval_qrels": "",
    "stoplist": "",
    "max_seq_len": 128
  },
  "synthetic": {
    "enabled": false,
    "train_topics": 80,
    "eval_topics": 40,
    "terms_per_topic": 16,
    "passages_per_topic": 16,
    "train_pairs_per_topic": 20,
    "eval_queries_per_topic": 5,
    "topic_terms_per_passage": 6,
    "function_words_per_passage": 12,
    "filler_words_per_passage": 4,
    "filler_vocabulary": 200,
    "query_terms": 3
  },
  "vocab": {"size": 30000, "min_freq": 1, "path": ""},
  "weights": {"source": "tfidf", "path": ""},
  "masking": {"strategy": "random", "rate": 0.15, "mix": [0.8, 0.1, 0.1], "dynamic": true},
  "model": {"layers": 2, "heads": 2, "hidden": 32, "ffn": 64, "dropout": 0.0, "precision": "fast32", "init_std": 0.02},
  "pretrain": {"steps": 300, "batch_size": 32, "lr": 0.001, "warmup_frac": 0.1, "weight_decay": 0.01,
               "checkpoint_every": 0, "weight_refresh_every": 0},
  "warmup": {"enabled": false, "steps": 100, "batch_size": 16, "lr": 0.0005, "warmup_frac": 0.1,
             "weight_decay": 0.01, "temperature": 1.0},
  "finetune": {"epochs": 3, "batch_size": 64, "lr": 5e-6, "warmup_frac": 0.0, "weight_decay": 0.01,
               "temperature": 1.0},
  "eval": {"k": 1000, "cosine": false},
  "seed": 1,
  "threads": 0,
  "output_dir": "runs/default"
})");
}

namespace detail {

inline std::string type_name(const ojson& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_unsigned()) return "non-negative integer";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

inline bool compatible(const ojson& def, const ojson& val) {
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_number_unsigned()) return val.is_number_unsigned() || (val.is_number_integer() && val.get<long long>() >= 0);
  if (def.is_number_integer()) return val.is_number_integer();
  if (def.is_number_float()) return val.is_number();
  if (def.is_string()) return val.is_string();
  if (def.is_array()) return val.is_array();
  return false;
}

inline void merge_checked(ojson& base, const ojson& user, const std::string& prefix) {
  if (!user.is_object())
    throw InvalidConfig("'" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw InvalidConfig("unknown config key '" + path + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), path);
    } else if (!compatible(slot, it.value())) {
      throw InvalidConfig("config key '" + path + "' must be a " + type_name(slot) + ", got " +
                          type_name(it.value()));
    } else {
      slot = it.value();
    }
  }
}

// FNV-1a over the canonical dump; stable across platforms, unlike std::hash.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::filesystem::path resolve_path(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return {};
  const std::filesystem::path path(p);
  return (path.is_absolute() || base.empty() ? path : base / path).lexically_normal();
}

}  // namespace detail

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<std::string> weights;
  std::optional<std::string> out;
  std::optional<int> threads;
};

struct PipelineConfig {
  ojson effective;

  std::filesystem::path passages, train_queries, train_pairs, eval_queries, eval_qrels, stoplist;
  std::size_t max_seq_len = 128;
  bool synthetic = false;
  SynthConfig synth;

  std::size_t vocab_size = 30000;
  std::size_t vocab_min_freq = 1;
  std::filesystem::path vocab_path;

  Estimator weights_source = Estimator::tfidf;  // contrastive = attention dump
  std::filesystem::path weights_path;

  MaskingPolicy masking;
  ModelConfig model;
  PretrainConfig pretrain;
  bool warmup_enabled = false;
  WarmupConfig warmup;
  FinetuneConfig finetune;
  std::size_t eval_k = 1000;
  bool eval_cosine = false;

  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::filesystem::path output_dir;

  // Hash of everything that can change results; threads and output_dir are excluded.
  std::string config_hash() const {
    ojson j = effective;
    j.erase("threads");
    j.erase("output_dir");
    return detail::fnv1a_hex(j.dump());
  }
};

inline Estimator parse_weights_source(const std::string& s) {
  if (s == "tfidf") return Estimator::tfidf;
  if (s == "attention-dump") return Estimator::contrastive;
  if (s == "import") return Estimator::imported;
  throw InvalidConfig("weights.source must be one of tfidf, attention-dump, import (got '" + s + "')");
}

inline const char* weights_source_name(Estimator e) {
  switch (e) {
    case Estimator::tfidf: return "tfidf";
    case Estimator::contrastive: return "attention-dump";
    case Estimator::imported: return "import";
  }
  return "tfidf";
}

// Relative paths inside the document resolve against `base_dir` (the config
// file's directory); flag values resolve against the working directory.
inline PipelineConfig parse_pipeline_config(const ojson& user, const ConfigOverrides& flags = {},
                                            const std::filesystem::path& base_dir = {}) {
  ojson j = default_pipeline_config();
  detail::merge_checked(j, user, "");

  // Paths are made absolute-or-CWD-relative before flags are applied.
  for (const char* key : {"passages", "train_queries", "train_pairs", "eval_queries", "eval_qrels", "stoplist"})
    j["corpus"][key] = detail::resolve_path(j["corpus"][key].get<std::string>(), base_dir).string();
  j["vocab"]["path"] = detail::resolve_path(j["vocab"]["path"].get<std::string>(), base_dir).string();
  j["weights"]["path"] = detail::resolve_path(j["weights"]["path"].get<std::string>(), base_dir).string();
  j["output_dir"] = detail::resolve_path(j["output_dir"].get<std::string>(), base_dir).string();

  if (flags.seed) j["seed"] = *flags.seed;
  if (flags.strategy) j["masking"]["strategy"] = *flags.strategy;
  if (flags.weights) {
    j["weights"]["path"] = *flags.weights;
    if (j["weights"]["source"] == "tfidf") j["weights"]["source"] = "import";
  }
  if (flags.out) j["output_dir"] = *flags.out;
  if (flags.threads) j["threads"] = *flags.threads;

  PipelineConfig c;
  c.effective = j;
  try {
    const auto& corpus = j["corpus"];
    c.passages = corpus["passages"].get<std::string>();
    c.train_queries = corpus["train_queries"].get<std::string>();
    c.train_pairs = corpus["train_pairs"].get<std::string>();
    c.eval_queries = corpus["eval_queries"].get<std::string>();
    c.eval_qrels = corpus["eval_qrels"].get<std::string>();
    c.stoplist = corpus["stoplist"].get<std::string>();
    if (c.stoplist.empty()) c.stoplist = std::filesystem::path(ROMLAB_DATA_DIR) / "stopwords_en.txt";
    c.max_seq_len = corpus["max_seq_len"].get<std::size_t>();
    if (c.max_seq_len < 3) throw InvalidConfig("corpus.max_seq_len must be >= 3");

    const auto& s = j["synthetic"];
    c.synthetic = s["enabled"].get<bool>();
    c.synth.train_topics = s["train_topics"].get<std::size_t>();
    c.synth.eval_topics = s["eval_topics"].get<std::size_t>();
    c.synth.terms_per_topic = s["terms_per_topic"].get<std::size_t>();
    c.synth.passages_per_topic = s["passages_per_topic"].get<std::size_t>();
    c.synth.train_pairs_per_topic = s["train_pairs_per_topic"].get<std::size_t>();
    c.synth.eval_queries_per_topic = s["eval_queries_per_topic"].get<std::size_t>();
    c.synth.topic_terms_per_passage = s["topic_terms_per_passage"].get<std::size_t>();
    c.synth.function_words_per_passage = s["function_words_per_passage"].get<std::size_t>();
    c.synth.filler_words_per_passage = s["filler_words_per_passage"].get<std::size_t>();
    c.synth.filler_vocabulary = s["filler_vocabulary"].get<std::size_t>();
    c.synth.query_terms = s["query_terms"].get<std::size_t>();
    if (c.synthetic) {
      if (!c.passages.empty()) throw InvalidConfig("corpus.passages and synthetic.enabled are mutually exclusive");
      c.synth.seed = j["seed"].get<std::uint64_t>();
      c.synth.validate();
    }

    c.vocab_size = j["vocab"]["size"].get<std::size_t>();
    c.vocab_min_freq = j["vocab"]["min_freq"].get<std::size_t>();
    c.vocab_path = j["vocab"]["path"].get<std::string>();
    if (c.vocab_size < 6) throw InvalidConfig("vocab.size must be >= 6");

    c.weights_source = parse_weights_source(j["weights"]["source"].get<std::string>());
    c.weights_path = j["weights"]["path"].get<std::string>();

    const auto& m = j["masking"];
    c.masking.strategy = parse_strategy(m["strategy"].get<std::string>());
    c.masking.rate = m["rate"].get<double>();
    const auto mix = m["mix"];
    if (mix.size() != 3 || !mix[0].is_number() || !mix[1].is_number() || !mix[2].is_number())
      throw InvalidConfig("masking.mix must be [mask, random_token, keep]");
    c.masking.mix = {mix[0].get<double>(), mix[1].get<double>(), mix[2].get<double>()};
    c.masking.dynamic = m["dynamic"].get<bool>();
    c.masking.validate();

    const auto& mo = j["model"];
    c.model.layers = mo["layers"].get<int>();
    c.model.heads = mo["heads"].get<int>();
    c.model.hidden = mo["hidden"].get<int>();
    c.model.ffn = mo["ffn"].get<int>();
    c.model.dropout = mo["dropout"].get<double>();
    c.model.precision = parse_precision(mo["precision"].get<std::string>());
    c.model.init_std = mo["init_std"].get<double>();
    c.model.max_seq_len = static_cast<int>(c.max_seq_len);
    c.model.vocab_size = static_cast<int>(c.vocab_size);
    c.model.validate();

    c.seed = j["seed"].get<std::uint64_t>();
    const int threads = j["threads"].get<int>();
    if (threads < 0) throw InvalidConfig("threads must be >= 0 (0 = ROM_LAB_THREADS or 1)");
    c.threads = resolve_threads(threads);

    const auto& p = j["pretrain"];
    c.pretrain.masking = c.masking;
    c.pretrain.steps = p["steps"].get<std::uint64_t>();
    c.pretrain.batch_size = p["batch_size"].get<std::size_t>();
    c.pretrain.lr = p["lr"].get<double>();
    c.pretrain.warmup_frac = p["warmup_frac"].get<double>();
    c.pretrain.weight_decay = p["weight_decay"].get<double>();
    c.pretrain.checkpoint_every = p["checkpoint_every"].get<std::uint64_t>();
    c.pretrain.weight_refresh_every = p["weight_refresh_every"].get<std::uint64_t>();
    c.pretrain.seed = c.seed;
    c.pretrain.threads = c.threads;
    if (c.pretrain.batch_size < 1) throw InvalidConfig("pretrain.batch_size must be >= 1");

    const auto& w = j["warmup"];
    c.warmup_enabled = w["enabled"].get<bool>();
    c.warmup.masking = c.masking;
    c.warmup.steps = w["steps"].get<std::uint64_t>();
    c.warmup.batch_size = w["batch_size"].get<std::size_t>();
    c.warmup.lr = w["lr"].get<double>();
    c.warmup.warmup_frac = w["warmup_frac"].get<double>();
    c.warmup.weight_decay = w["weight_decay"].get<double>();
    c.warmup.temperature = w["temperature"].get<double>();
    c.warmup.seed = c.seed;
    c.warmup.threads = c.threads;
    if (c.warmup.batch_size < 2) throw InvalidConfig("warmup.batch_size must be >= 2");

    const auto& f = j["finetune"];
    c.finetune.epochs = f["epochs"].get<std::uint64_t>();
    c.finetune.batch_size = f["batch_size"].get<std::size_t>();
    c.finetune.lr = f["lr"].get<double>();
    c.finetune.warmup_frac = f["warmup_frac"].get<double>();
    c.finetune.weight_decay = f["weight_decay"].get<double>();
    c.finetune.temperature = f["temperature"].get<double>();
    c.finetune.seed = c.seed;
    c.finetune.threads = c.threads;
    if (c.finetune.batch_size < 2) throw InvalidConfig("finetune.batch_size must be >= 2");

    for (double lr : {c.pretrain.lr, c.warmup.lr, c.finetune.lr})
      if (!(lr >= 0.0)) throw InvalidConfig("learning rates must be >= 0");
    for (double t : {c.warmup.temperature, c.finetune.temperature})
      if (!(t > 0.0)) throw InvalidConfig("temperatures must be > 0");

    c.eval_k = j["eval"]["k"].get<std::size_t>();
    c.eval_cosine = j["eval"]["cosine"].get<bool>();
    if (c.eval_k < 1) throw InvalidConfig("eval.k must be >= 1");

    c.output_dir = j["output_dir"].get<std::string>();
    if (c.output_dir.empty()) throw InvalidConfig("output_dir must not be empty");
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("malformed config: ") + e.what());
  }
  return c;
}

inline PipelineConfig load_pipeline_config(const std::optional<std::filesystem::path>& file,
                                           const ConfigOverrides& flags = {}) {
  if (!file) return parse_pipeline_config(ojson::object(), flags);
  std::ifstream in(*file, std::ios::binary);
  if (!in) throw MissingInput("cannot open config file " + file->string());
  ojson user;
  try {
    user = ojson::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(file->string() + ": " + e.what());
  }
  return parse_pipeline_config(user, flags, file->parent_path());
}

// ---------------------------------------------------------------------------
// Workspace: lazily loaded shared inputs for the stages of one run.

class Workspace {
 public:
  explicit Workspace(PipelineConfig cfg, LogSink log = stderr_sink()) : cfg_(std::move(cfg)), log_(std::move(log)) {
    if (cfg_.synthetic) {
      const auto dir = cfg_.output_dir / "data";
      if (!std::filesystem::exists(dir / "passages.jsonl")) write_synthetic(dir, generate_synthetic(cfg_.synth));
      cfg_.passages = dir / "passages.jsonl";
      cfg_.train_queries = dir / "train_queries.tsv";
      cfg_.train_pairs = dir / "train_pairs.tsv";
      cfg_.eval_queries = dir / "eval_queries.tsv";
      cfg_.eval_qrels = dir / "eval_qrels.tsv";
    }
  }

  const PipelineConfig& config() const noexcept { return cfg_; }
  const LogSink& log() const noexcept { return log_; }
  const std::filesystem::path& out() const noexcept { return cfg_.output_dir; }

  const std::vector<PassageRecord>& passages() {
    if (!passages_) {
      passages_ = read_passages_jsonl(require_path(cfg_.passages, "corpus.passages"));
      if (passages_->empty()) throw EmptyInput("passage file " + cfg_.passages.string() + " is empty");
    }
    return *passages_;
  }

  const StopList& stoplist() {
    if (!stop_) stop_ = read_stoplist(cfg_.stoplist);
    return *stop_;
  }

  const Vocabulary& vocab() {
    if (!vocab_) {
      vocab_ = cfg_.vocab_path.empty() ? build_vocab(passages(), cfg_.vocab_size, cfg_.vocab_min_freq)
                                       : read_vocab_json(cfg_.vocab_path);
    }
    return *vocab_;
  }

  const std::vector<TokenSequence>& corpus() {
    if (!corpus_) corpus_ = tokenize_all(passages(), vocab(), cfg_.max_seq_len, &stoplist());
    return *corpus_;
  }

  // Flags per sequence, aligned with corpus().
  std::vector<std::vector<bool>> flags() {
    std::vector<std::vector<bool>> out;
    for (const auto& s : corpus()) out.push_back(s.is_stop_or_punct);
    return out;
  }

  const std::vector<TermWeightRecord>& weights() {
    if (!weights_) weights_ = compute_weights();
    return *weights_;
  }

  ModelConfig model_config() {
    ModelConfig m = cfg_.model;
    m.vocab_size = static_cast<int>(vocab().size());
    m.validate();
    return m;
  }

  std::vector<TokenSequence> tokenize_queries(const std::vector<QueryRecord>& queries) {
    std::vector<TokenSequence> out;
    for (const auto& q : queries) out.push_back(tokenize(q.text, vocab(), cfg_.max_seq_len, q.id));
    return out;
  }

  std::vector<TrainingPair> training_pairs() {
    const auto queries = read_queries_tsv(require_path(cfg_.train_queries, "corpus.train_queries"));
    const auto pairs = read_pairs_tsv(require_path(cfg_.train_pairs, "corpus.train_pairs"));
    std::unordered_map<std::string, std::size_t> qidx, pidx;
    for (std::size_t i = 0; i < queries.size(); ++i) qidx.emplace(queries[i].id, i);
    for (std::size_t i = 0; i < corpus().size(); ++i) pidx.emplace(corpus()[i].id, i);
    std::vector<TrainingPair> out;
    for (const auto& [q, p] : pairs) {
      auto qi = qidx.find(q);
      auto pi = pidx.find(p);
      if (qi == qidx.end()) throw SchemaError("training pair references unknown query '" + q + "'");
      if (pi == pidx.end()) throw SchemaError("training pair references unknown passage '" + p + "'");
      out.push_back({tokenize(queries[qi->second].text, vocab(), cfg_.max_seq_len, q), corpus()[pi->second]});
    }
    if (out.empty()) throw EmptyInput("no training pairs in " + cfg_.train_pairs.string());
    return out;
  }

  static std::filesystem::path require_path(const std::filesystem::path& p, const std::string& key) {
    if (p.empty()) throw ConfigError(key + " is not set");
    if (!std::filesystem::exists(p)) throw MissingInput("missing input file " + p.string() + " (" + key + ")");
    return p;
  }

 private:
  std::vector<TermWeightRecord> compute_weights() {
    const auto& seqs = corpus();
    std::vector<TermWeightRecord> out;
    switch (cfg_.weights_source) {
      case Estimator::tfidf: {
        const auto df = DocumentFrequency::build(seqs);
        out.resize(seqs.size());
        parallel_for(seqs.size(), cfg_.threads, [&](std::size_t i) { out[i] = tfidf_term_distribution(seqs[i], df); });
        break;
      }
      case Estimator::contrastive: {
        const auto dumps = read_attention_dump(require_path(cfg_.weights_path, "weights.path"));
        std::unordered_map<std::string, std::size_t> by_id;
        for (std::size_t i = 0; i < dumps.size(); ++i) {
          const auto problems = validate_attention_dump(dumps[i], 1e-4);
          if (!problems.empty())
            throw SchemaError(cfg_.weights_path.string() + ": record '" + dumps[i].id + "': " + problems.front());
          by_id.emplace(dumps[i].id, i);
        }
        for (const auto& s : seqs) {
          auto it = by_id.find(s.id);
          if (it == by_id.end()) continue;  // reported when a stage needs the record
          out.push_back(contrastive_term_distribution(align_attention_to_sequence(dumps[it->second], s)));
        }
        break;
      }
      case Estimator::imported: {
        out = import_term_weights(require_path(cfg_.weights_path, "weights.path"));
        std::unordered_map<std::string, const TokenSequence*> by_id;
        for (const auto& s : seqs) by_id.emplace(s.id, &s);
        for (const auto& r : out) {
          auto it = by_id.find(r.id);
          if (it != by_id.end()) check_weights_match(r, *it->second);
        }
        break;
      }
    }
    return out;
  }

  PipelineConfig cfg_;
  LogSink log_;
  std::optional<std::vector<PassageRecord>> passages_;
  std::optional<StopList> stop_;
  std::optional<Vocabulary> vocab_;
  std::optional<std::vector<TokenSequence>> corpus_;
  std::optional<std::vector<TermWeightRecord>> weights_;
};

// ---------------------------------------------------------------------------
// Manifests

inline ojson manifest_json(const PipelineConfig& cfg, const std::string& command) {
  ojson m;
  m["tool"] = "rom_lab";
  m["command"] = command;
  m["config_hash"] = cfg.config_hash();
  m["seed"] = cfg.seed;
  m["threads"] = cfg.threads;
  m["versions"] = {{"rom_lab", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                   {"checkpoint_format", kCheckpointVersion}};
  m["effective_config"] = cfg.effective;
  return m;
}

inline void write_json(const std::filesystem::path& path, const ojson& j) {
  auto out = detail::open_output(path);
  out << j.dump(2) << '\n';
}

inline void write_manifest(const std::filesystem::path& dir, const PipelineConfig& cfg, const std::string& command) {
  write_json(dir / "manifest.json", manifest_json(cfg, command));
}

// ---------------------------------------------------------------------------
// Stages. Each returns the main artifact path it produced.

struct StageInputs {
  std::filesystem::path init_checkpoint;  // warmup / finetune starting point
  std::filesystem::path checkpoint;       // encode / search model
  std::filesystem::path index;            // search input
  std::filesystem::path run;              // eval input
};

inline std::filesystem::path stage_build_vocab(Workspace& ws) {
  const auto path = ws.out() / "vocab.json";
  write_vocab_json(path, ws.vocab());
  return path;
}

inline std::filesystem::path stage_weights(Workspace& ws) {
  const auto path = ws.out() / "weights.jsonl";
  write_term_weights_jsonl(path, ws.weights());
  return path;
}

namespace detail {

inline std::vector<MaskedExample> mask_corpus(Workspace& ws, const MaskingPolicy& policy) {
  const auto& seqs = ws.corpus();
  std::vector<std::vector<double>> rescaled;
  if (policy.strategy == MaskStrategy::rom) rescaled = rescaled_weights_for(seqs, ws.weights());
  std::vector<MaskedExample> out(seqs.size());
  std::vector<char> usable(seqs.size(), 0);
  parallel_for(seqs.size(), ws.config().threads, [&](std::size_t i) {
    if (seqs[i].maskable_count() == 0) return;
    out[i] = mask_sequence(seqs[i], policy, rescaled.empty() ? nullptr : &rescaled[i], ws.vocab().size(),
                           ws.config().seed, i, 0);
    usable[i] = 1;
  });
  std::vector<MaskedExample> kept;
  for (std::size_t i = 0; i < seqs.size(); ++i)
    if (usable[i]) kept.push_back(std::move(out[i]));
  return kept;
}

}  // namespace detail

inline std::filesystem::path stage_mask(Workspace& ws) {
  const auto path = ws.out() / "masked.jsonl";
  write_masked_jsonl(path, detail::mask_corpus(ws, ws.config().masking));
  return path;
}

inline MaskingReport compute_mask_stats(Workspace& ws, const MaskingPolicy& policy) {
  const auto examples = detail::mask_corpus(ws, policy);
  std::unordered_map<std::string, const TokenSequence*> by_id;
  for (const auto& s : ws.corpus()) by_id.emplace(s.id, &s);
  std::vector<std::vector<bool>> flags;
  for (const auto& ex : examples) flags.push_back(by_id.at(ex.id)->is_stop_or_punct);
  return masking_statistics(examples, flags, strategy_name(policy.strategy));
}

inline std::filesystem::path stage_mask_stats(Workspace& ws) {
  const auto report = compute_mask_stats(ws, ws.config().masking);
  const auto path = ws.out() / (std::string("mask_stats_") + strategy_name(ws.config().masking.strategy) + ".json");
  write_json(path, masking_report_json(report));
  return path;
}

template <class T>
std::filesystem::path stage_pretrain(Workspace& ws) {
  const auto& cfg = ws.config();
  auto params = Parameters<T>::initialize(ws.model_config(), cfg.seed);
  auto pc = cfg.pretrain;
  const auto dir = ws.out() / "pretrain";
  if (pc.checkpoint_every > 0) pc.checkpoint_dir = dir / "steps";
  const std::vector<TermWeightRecord>* weights =
      cfg.masking.strategy == MaskStrategy::rom ? &ws.weights() : nullptr;
  const auto curve = pretrain_mlm(params, ws.corpus(), weights, pc, ws.log());
  curve.write_csv(dir / "loss.csv");
  save_checkpoint(params, dir / "checkpoint");
  return dir / "checkpoint";
}

namespace detail {

template <class T>
Parameters<T> load_for(Workspace& ws, const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "header.json")) throw MissingInput("missing checkpoint " + dir.string());
  auto params = load_checkpoint<T>(dir);
  if (static_cast<std::size_t>(params.config.vocab_size) != ws.vocab().size())
    throw ConfigError("checkpoint " + dir.string() + " has vocab size " + std::to_string(params.config.vocab_size) +
                      " but the run's vocabulary has " + std::to_string(ws.vocab().size()));
  return params;
}

inline std::filesystem::path default_finetune_init(Workspace& ws) {
  if (ws.config().warmup_enabled && std::filesystem::exists(ws.out() / "warmup" / "checkpoint" / "header.json"))
    return ws.out() / "warmup" / "checkpoint";
  return ws.out() / "pretrain" / "checkpoint";
}

}  // namespace detail

template <class T>
std::filesystem::path stage_warmup(Workspace& ws, const StageInputs& in = {}) {
  const auto init = in.init_checkpoint.empty() ? ws.out() / "pretrain" / "checkpoint" : in.init_checkpoint;
  auto params = detail::load_for<T>(ws, init);
  std::vector<std::vector<double>> rescaled;
  if (ws.config().masking.strategy == MaskStrategy::rom) rescaled = rescaled_weights_for(ws.corpus(), ws.weights());
  const auto curve = contrastive_warmup(params, ws.corpus(), std::move(rescaled), ws.config().warmup, ws.log());
  const auto dir = ws.out() / "warmup";
  curve.write_csv(dir / "loss.csv");
  save_checkpoint(params, dir / "checkpoint");
  return dir / "checkpoint";
}

template <class T>
std::filesystem::path stage_finetune(Workspace& ws, const StageInputs& in = {}) {
  const auto init = in.init_checkpoint.empty() ? detail::default_finetune_init(ws) : in.init_checkpoint;
  auto params = detail::load_for<T>(ws, init);
  const auto curve = finetune_dual(params, ws.training_pairs(), ws.config().finetune, ws.log());
  const auto dir = ws.out() / "finetune";
  curve.write_csv(dir / "loss.csv");
  save_checkpoint(params, dir / "checkpoint");
  return dir / "checkpoint";
}

template <class T>
std::filesystem::path stage_encode(Workspace& ws, const StageInputs& in = {}) {
  const auto ckpt = in.checkpoint.empty() ? ws.out() / "finetune" / "checkpoint" : in.checkpoint;
  const auto params = detail::load_for<T>(ws, ckpt);
  const auto path = ws.out() / "index.bin";
  write_index(path, encode_corpus(params, ws.corpus(), ws.config().threads));
  return path;
}

template <class T>
std::filesystem::path stage_search(Workspace& ws, const StageInputs& in = {}) {
  const auto& cfg = ws.config();
  const auto ckpt = in.checkpoint.empty() ? ws.out() / "finetune" / "checkpoint" : in.checkpoint;
  const auto index_path = in.index.empty() ? ws.out() / "index.bin" : in.index;
  const auto params = detail::load_for<T>(ws, ckpt);
  const auto index = read_index<T>(Workspace::require_path(index_path, "index"));
  const auto queries = read_queries_tsv(Workspace::require_path(cfg.eval_queries, "corpus.eval_queries"));
  const auto seqs = ws.tokenize_queries(queries);
  Matrix<T> q(static_cast<Eigen::Index>(seqs.size()), params.config.hidden);
  std::vector<std::string> ids;
  for (const auto& s : seqs) ids.push_back(s.id);
  parallel_for(seqs.size(), cfg.threads,
               [&](std::size_t i) { q.row(static_cast<Eigen::Index>(i)) = encode_text(params, seqs[i]); });
  const auto run = search_all(index, ids, q, cfg.eval_k, cfg.eval_cosine, cfg.threads);
  const auto path = ws.out() / "run.trec";
  write_trec_run(path, run, std::string("romlab-") + strategy_name(cfg.masking.strategy));
  return path;
}

inline RunMetrics compute_eval(Workspace& ws, const StageInputs& in = {}) {
  const auto run_path = in.run.empty() ? ws.out() / "run.trec" : in.run;
  const auto run = read_trec_run(Workspace::require_path(run_path, "run"));
  const auto qrels = read_judgments_tsv(Workspace::require_path(ws.config().eval_qrels, "corpus.eval_qrels"));
  return evaluate_run(run, qrels, ws.log());
}

inline std::filesystem::path stage_eval(Workspace& ws, const StageInputs& in = {}) {
  const auto path = ws.out() / "metrics.json";
  write_metrics_json(path, compute_eval(ws, in));
  return path;
}

// ---------------------------------------------------------------------------
// compare: random-vs-ROM twin pipelines at equal budget.

struct ArmResult {
  std::string strategy;
  RunMetrics metrics;
  MaskingReport mask_stats;
  double final_pretrain_loss = 0.0;
};

struct CompareResult {
  ArmResult random;
  ArmResult rom;
  std::string report_json;
  std::string report_markdown;
};

namespace detail {

inline double last_loss(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  const auto a = last.find(',');
  if (a == std::string::npos) return 0.0;
  const auto b = last.find(',', a + 1);
  return std::stod(last.substr(a + 1, b == std::string::npos ? std::string::npos : b - a - 1));
}

inline ojson metrics_object(const RunMetrics& m) {
  return ojson{{"MRR@10", round4(m.mrr10)}, {"R@5", round4(m.r5)},       {"R@20", round4(m.r20)},
               {"R@100", round4(m.r100)},   {"R@1000", round4(m.r1000)}, {"queries", m.queries}};
}

template <class T>
ArmResult run_arm(const PipelineConfig& base, MaskStrategy strategy, const LogSink& log) {
  PipelineConfig cfg = base;
  cfg.masking.strategy = strategy;
  cfg.pretrain.masking.strategy = strategy;
  cfg.warmup.masking.strategy = strategy;
  cfg.effective["masking"]["strategy"] = strategy_name(strategy);
  cfg.output_dir = base.output_dir / strategy_name(strategy);
  cfg.effective["output_dir"] = cfg.output_dir.string();
  if (base.synthetic) {
    // Both arms read the dataset generated once at the top level.
    const auto data = base.output_dir / "data";
    cfg.synthetic = false;
    cfg.passages = data / "passages.jsonl";
    cfg.train_queries = data / "train_queries.tsv";
    cfg.train_pairs = data / "train_pairs.tsv";
    cfg.eval_queries = data / "eval_queries.tsv";
    cfg.eval_qrels = data / "eval_qrels.tsv";
  }
  Workspace ws(cfg, log);
  ArmResult arm;
  arm.strategy = strategy_name(strategy);
  arm.mask_stats = compute_mask_stats(ws, cfg.masking);
  write_json(ws.out() / (std::string("mask_stats_") + arm.strategy + ".json"), masking_report_json(arm.mask_stats));
  stage_pretrain<T>(ws);
  arm.final_pretrain_loss = last_loss(ws.out() / "pretrain" / "loss.csv");
  if (cfg.warmup_enabled) stage_warmup<T>(ws);
  stage_finetune<T>(ws);
  stage_encode<T>(ws);
  stage_search<T>(ws);
  arm.metrics = compute_eval(ws);
  write_metrics_json(ws.out() / "metrics.json", arm.metrics);
  write_manifest(ws.out(), cfg, std::string("compare/") + arm.strategy);
  return arm;
}

}  // namespace detail

template <class T>
CompareResult run_compare(const PipelineConfig& cfg, const LogSink& log = stderr_sink()) {
  Workspace top(cfg, log);  // materializes synthetic data once
  CompareResult res;
  res.random = detail::run_arm<T>(cfg, MaskStrategy::random, log);
  res.rom = detail::run_arm<T>(cfg, MaskStrategy::rom, log);

  ojson report;
  report["config_hash"] = cfg.config_hash();
  report["seed"] = cfg.seed;
  for (const ArmResult* arm : {&res.random, &res.rom}) {
    ojson a;
    a["metrics"] = detail::metrics_object(arm->metrics);
    a["mask_stop_punct_fraction"] = round4(arm->mask_stats.fraction());
    a["final_pretrain_loss"] = round4(arm->final_pretrain_loss);
    report["arms"][arm->strategy] = a;
  }
  report["delta_mrr10"] = round4(res.rom.metrics.mrr10 - res.random.metrics.mrr10);
  report["rom_at_least_random"] = res.rom.metrics.mrr10 >= res.random.metrics.mrr10;
  res.report_json = report.dump(2) + "\n";

  char buf[512];
  std::string md = "# ROM vs random masking\n\n";
  std::snprintf(buf, sizeof buf, "seed %llu, config %s\n\n", static_cast<unsigned long long>(cfg.seed),
                cfg.config_hash().c_str());
  md += buf;
  md += "| metric | random | rom |\n|---|---|---|\n";
  auto row = [&](const char* name, double a, double b) {
    std::snprintf(buf, sizeof buf, "| %s | %.4f | %.4f |\n", name, a, b);
    md += buf;
  };
  row("MRR@10", res.random.metrics.mrr10, res.rom.metrics.mrr10);
  row("R@5", res.random.metrics.r5, res.rom.metrics.r5);
  row("R@20", res.random.metrics.r20, res.rom.metrics.r20);
  row("R@100", res.random.metrics.r100, res.rom.metrics.r100);
  row("R@1000", res.random.metrics.r1000, res.rom.metrics.r1000);
  row("stop/punct share of masks", res.random.mask_stats.fraction(), res.rom.mask_stats.fraction());
  row("final pre-training loss", res.random.final_pretrain_loss, res.rom.final_pretrain_loss);
  res.report_markdown = md;

  {
    auto out = detail::open_output(cfg.output_dir / "compare.json");
    out << res.report_json;
  }
  {
    auto out = detail::open_output(cfg.output_dir / "compare.md");
    out << res.report_markdown;
  }
  write_manifest(cfg.output_dir, cfg, "compare");
  return res;
}

}  // namespace romlab
