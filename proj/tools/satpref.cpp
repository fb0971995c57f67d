#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "satpref/pipeline.hpp"

namespace fs = std::filesystem;
using namespace satpref;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/default";
  std::string variant = "coper";
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_variant) {
  cmd->add_option("--config", c.config, "experiment config JSON (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
  if (with_variant) {
    cmd->add_option("--variant", c.variant, "base | ucot | coper")
        ->check(CLI::IsMember({"base", "ucot", "coper"}))
        ->capture_default_str();
  }
  cmd->add_flag("--quiet", c.quiet, "no progress lines on stderr");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? default_experiment_config() : load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

StageOptions options(const Common& c, const std::vector<std::string>& argv) {
  StageOptions o;
  o.out = c.out;
  o.command_line = argv;
  if (!c.quiet) o.log = [](const std::string& line) { std::cerr << line << std::endl; };
  return o;
}

void report(const StageResult& r) {
  std::cout << r.manifest.command << (r.skipped ? " (up to date)" : "") << "\n";
  for (const auto& a : r.manifest.outputs) std::cout << "  " << a.name << "  " << a.git_blob << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Preference-adaptive user-satisfaction estimation"};
  app.require_subcommand(1);

  Common common;
  std::string method = "sft";
  std::string split = "test";
  std::string model_path, corpus_path, label = "custom";
  bool subgroups = false, force = false;

  auto* gen = app.add_subcommand("gen-corpus", "generate and split the synthetic corpus, write rationales");
  add_common(gen, common, false);
  auto* sft = app.add_subcommand("train-sft", "supervised fine-tuning");
  add_common(sft, common, true);
  auto* m2pc = app.add_subcommand("run-m2pc", "EM clustering into majority/minority reference models");
  add_common(m2pc, common, true);
  auto* ppo = app.add_subcommand("train-ppo", "PPO with the SFT model as the single reference");
  add_common(ppo, common, true);
  auto* pada = app.add_subcommand("train-pada-ppo", "PPO with routed majority/minority references");
  add_common(pada, common, true);
  auto* eval = app.add_subcommand("evaluate", "group-wise F1 of a trained model");
  add_common(eval, common, true);
  auto* sub = app.add_subcommand("subgroups", "evaluation plus hidden-state subgroup analysis");
  add_common(sub, common, true);
  for (auto* cmd : {eval, sub}) {
    cmd->add_option("--method", method, "sft | m2pc | ppo | pada-ppo")
        ->check(CLI::IsMember({"sft", "m2pc", "ppo", "pada-ppo"}))
        ->capture_default_str();
    cmd->add_option("--split", split, "train | valid | test")->capture_default_str();
    cmd->add_option("--model", model_path, "checkpoint to evaluate instead of a pipeline method");
    cmd->add_option("--corpus", corpus_path, "corpus JSONL (with --model; default <out>/corpus.jsonl)");
    cmd->add_option("--label", label, "output name stem for --model")->capture_default_str();
  }
  eval->add_flag("--subgroups", subgroups, "include the subgroup report");
  auto* pipe = app.add_subcommand("pipeline", "gen -> sft -> m2pc -> rl -> eval, resumable");
  add_common(pipe, common, false);
  pipe->add_flag("--force", force, "rerun every stage");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const ExperimentConfig cfg = resolve(common);
    StageOptions o = options(common, args);
    o.force = force;
    const Variant v = *parse_variant(common.variant);
    DirectoryLock lock(o.out);
    if (*gen) report(stage_gen_corpus(cfg, o));
    else if (*sft) report(stage_train_sft(cfg, v, o));
    else if (*m2pc) report(stage_m2pc(cfg, v, o));
    else if (*ppo) report(stage_ppo(cfg, v, Method::Ppo, o));
    else if (*pada) report(stage_ppo(cfg, v, Method::PadaPpo, o));
    else if (*eval || *sub) {
      const auto sp = parse_split(split);
      if (!sp) throw ConfigError("unknown split '" + split + "'");
      const bool with_sub = subgroups || *sub;
      if (!model_path.empty()) {
        const fs::path corpus = corpus_path.empty() ? o.out / "corpus.jsonl" : fs::path(corpus_path);
        report(stage_evaluate_checkpoint(cfg, model_path, corpus, v, *sp, with_sub, label, o));
      } else {
        report(stage_evaluate(cfg, v, *parse_method(method), *sp, with_sub, o));
      }
    } else if (*pipe) {
      for (const auto& r : run_pipeline(cfg, o)) report(r);
      std::cout << "results: " << (o.out / "results.csv").string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
