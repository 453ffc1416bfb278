// rom_lab: command-line driver for the ROM masking lab.
//
// Exit codes: 0 success, 2 bad configuration or arguments, 3 missing input,
// 1 anything else.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "romlab/pipeline.hpp"

namespace {

using namespace romlab;

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case Errc::invalid_config:
    case Errc::config_error: return 2;
    case Errc::missing_input: return 3;
    default: return 1;
  }
}

template <class Fn>
auto dispatch(Precision p, Fn&& fn) {
  return p == Precision::check64 ? fn(double{}) : fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ROM masking lab: term-weighted masked-LM pre-training for dense retrieval"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_file;
  ConfigOverrides flags;
  std::uint64_t seed = 0;
  std::string strategy, weights, out;
  int threads = -1;
  StageInputs inputs;
  std::string init, checkpoint, index, run;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "pipeline config JSON")->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory (overrides output_dir)");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--strategy", strategy, "masking strategy: random or rom");
    sub->add_option("--weights", weights, "term-weight file (JSONL, or attention dump if weights.source says so)");
    sub->add_option("--threads", threads, "worker threads (0 = ROM_LAB_THREADS or 1)")->check(CLI::NonNegativeNumber);
  };

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"build-vocab", "build the word vocabulary (vocab.json)"},
      {"weights", "estimate term weights (weights.jsonl)"},
      {"mask", "write one masked copy of the corpus (masked.jsonl)"},
      {"mask-stats", "stop-word/punctuation share of masked positions"},
      {"pretrain", "masked-LM pre-training"},
      {"warmup", "contrastive warm-up from a pre-trained checkpoint"},
      {"finetune", "dual-encoder fine-tuning on query/passage pairs"},
      {"encode", "encode the passage corpus into an index"},
      {"search", "exact top-k search for the evaluation queries"},
      {"eval", "score a run against judgments"},
      {"compare", "random vs ROM twin pipelines at equal budget"},
      {"synth", "write the synthetic retrieval dataset"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_common(sub);
    subs.push_back(sub);
  }
  for (auto* sub : subs) {
    const std::string n = sub->get_name();
    if (n == "warmup" || n == "finetune") sub->add_option("--init", init, "starting checkpoint directory");
    if (n == "encode" || n == "search") sub->add_option("--checkpoint", checkpoint, "model checkpoint directory");
    if (n == "search") sub->add_option("--index", index, "index file from encode");
    if (n == "eval") sub->add_option("--run", run, "TREC run file");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();
  if (sub->count("--seed")) flags.seed = seed;
  if (sub->count("--strategy")) flags.strategy = strategy;
  if (sub->count("--weights")) flags.weights = weights;
  if (sub->count("--out")) flags.out = out;
  if (sub->count("--threads")) flags.threads = threads;
  inputs.init_checkpoint = init;
  inputs.checkpoint = checkpoint;
  inputs.index = index;
  inputs.run = run;

  try {
    auto cfg = load_pipeline_config(config_file.empty() ? std::nullopt
                                                        : std::optional<std::filesystem::path>(config_file),
                                    flags);
    std::filesystem::create_directories(cfg.output_dir);

    if (cmd == "synth") {
      auto sc = cfg.synth;
      sc.seed = cfg.seed;
      write_synthetic(cfg.output_dir, generate_synthetic(sc));
      write_manifest(cfg.output_dir, cfg, cmd);
      std::cout << cfg.output_dir.string() << '\n';
      return 0;
    }

    if (cmd == "compare") {
      const auto res = dispatch(cfg.model.precision, [&](auto tag) {
        using T = decltype(tag);
        return run_compare<T>(cfg);
      });
      std::cout << res.report_markdown;
      return 0;
    }

    Workspace ws(cfg);
    std::filesystem::path artifact;
    std::string summary;
    if (cmd == "build-vocab") {
      artifact = stage_build_vocab(ws);
      summary = std::to_string(ws.vocab().size()) + " tokens";
    } else if (cmd == "weights") {
      artifact = stage_weights(ws);
      summary = std::to_string(ws.weights().size()) + " records";
    } else if (cmd == "mask") {
      artifact = stage_mask(ws);
    } else if (cmd == "mask-stats") {
      const auto r = compute_mask_stats(ws, cfg.masking);
      artifact = cfg.output_dir / ("mask_stats_" + r.strategy + ".json");
      write_json(artifact, masking_report_json(r));
      char buf[128];
      std::snprintf(buf, sizeof buf, "%s: %llu of %llu masked positions are stop words or punctuation (%.4f)",
                    r.strategy.c_str(), static_cast<unsigned long long>(r.stop_punct_masked),
                    static_cast<unsigned long long>(r.masked_total), r.fraction());
      summary = buf;
    } else if (cmd == "eval") {
      const auto m = compute_eval(ws, inputs);
      artifact = cfg.output_dir / "metrics.json";
      write_metrics_json(artifact, m);
      summary = metrics_json(m);
    } else {
      artifact = dispatch(cfg.model.precision, [&](auto tag) -> std::filesystem::path {
        using T = decltype(tag);
        if (cmd == "pretrain") return stage_pretrain<T>(ws);
        if (cmd == "warmup") return stage_warmup<T>(ws, inputs);
        if (cmd == "finetune") return stage_finetune<T>(ws, inputs);
        if (cmd == "encode") return stage_encode<T>(ws, inputs);
        return stage_search<T>(ws, inputs);
      });
    }
    write_manifest(cfg.output_dir, cfg, cmd);
    std::cout << artifact.string() << '\n';
    if (!summary.empty()) std::cout << summary << (summary.back() == '\n' ? "" : "\n");
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
