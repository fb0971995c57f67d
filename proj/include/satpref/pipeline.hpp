#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "satpref/coper.hpp"
#include "satpref/corpus.hpp"
#include "satpref/eval.hpp"
#include "satpref/lm.hpp"
#include "satpref/m2pc.hpp"
#include "satpref/padappo.hpp"
#include "satpref/sft.hpp"

namespace satpref {

// Bad or missing configuration, or a request that cannot be served by the
// given inputs. The CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { Sft, M2pc, Ppo, PadaPpo };
std::string_view to_string(Method m);
std::optional<Method> parse_method(std::string_view s);

struct RationaleSettings {
  std::string source = "rule";  // "rule" or "external"
  double strategy_corruption = 0.0;
  ExternalClientConfig external;
};

struct PipelineSettings {
  std::vector<Variant> variants{Variant::Coper};
  std::vector<Method> methods{Method::Sft, Method::M2pc, Method::Ppo, Method::PadaPpo};
  Split eval_split = Split::Test;
  bool subgroups = false;
  int subgroup_k_min = 2;
  int subgroup_k_max = 20;
  int max_eval_examples = 0;   // 0 = the whole split
  int max_valid_examples = 300;  // for EM-iteration selection and PPO monitoring
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  GeneratorConfig generator;
  ModelConfig model;  // vocab_size is taken from the corpus vocabulary
  PromptConfig prompt;
  SftConfig sft;
  M2pcConfig m2pc;
  PpoConfig ppo;
  SamplingParams sampling;
  RationaleSettings rationales;
  PipelineSettings pipeline;
};

// Desk-scale defaults: a small f32 model and learning rates large enough to
// move it.
ExperimentConfig default_experiment_config();
ExperimentConfig experiment_config_from_json(std::string_view text);
std::string experiment_config_to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Settings that differ from the published setup, one line each.
std::vector<std::string> deviations_from_reference(const ExperimentConfig& c);

// ---------------------------------------------------------------------------
// Evaluation helpers

using Predictor = std::function<Prediction(const TrainingExample& ex, std::uint64_t seed)>;
Predictor model_predictor(const ModelState& model, const Vocabulary& vocab, Variant v, const PromptConfig& prompt,
                          const SamplingParams& sampling);
// Each input goes to the group model with the lower perplexity on its exchange.
Predictor routed_predictor(const ModelState& major, const ModelState& minor, const Vocabulary& vocab, Variant v,
                           const PromptConfig& prompt, const SamplingParams& sampling);

// Group of every user by the strict 60% rule over all of the user's examples.
std::map<std::string, Group> gold_groups(const Corpus& corpus);

struct SplitEvaluation {
  std::vector<const TrainingExample*> examples;
  std::vector<std::optional<int>> scores;
  std::vector<PredictedLabel> preds;
  std::vector<Satisfaction> golds;
  std::vector<Group> groups;
  GroupwiseReport report;
};
// max_examples > 0 keeps a seeded subset of the split (in corpus order).
SplitEvaluation evaluate_split(const Corpus& corpus, Split split, const Predictor& predictor, std::uint64_t seed,
                               int max_examples = 0);

std::string groupwise_to_json(const GroupwiseReport& r);
// One CSV row per available group: "<label>:minority", ":majority", ":combined".
std::vector<std::string> groupwise_csv_rows(const std::string& label, const GroupwiseReport& r);

// Clusters the hidden states of one group's examples and ranks the clusters.
SubgroupReport subgroup_report(const ModelState& model, const Vocabulary& vocab, const SplitEvaluation& evaluation,
                               Group group, Variant v, const PromptConfig& prompt, int k_min, int k_max,
                               std::uint64_t seed);
std::string subgroup_to_json(const SubgroupReport& r);

// ---------------------------------------------------------------------------
// Run manifests

struct Artifact {
  std::string name;  // path relative to the output directory
  std::string git_blob;
  std::string sha256;
  friend bool operator==(const Artifact&, const Artifact&) = default;
};
Artifact describe_artifact(const std::filesystem::path& dir, const std::string& name);

struct RunManifest {
  std::string command;
  std::vector<std::string> command_line;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<Artifact> inputs;
  std::vector<Artifact> outputs;
  double wall_seconds = 0.0;
  std::vector<std::string> deviations;
  std::string notes_json = "{}";  // stage-specific summary
};
std::string manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(std::string_view text);

// Holds <dir>/.lock for its lifetime; a second holder fails with ConfigError.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Stages. Every stage reads and writes fixed file names under `out`, writes
// manifest_<stage>.json and returns that manifest.

std::string sft_checkpoint_name(Variant v);
std::string ref_checkpoint_name(Variant v, Group g);
std::string policy_checkpoint_name(Variant v, Method m);

struct StageOptions {
  std::filesystem::path out;
  std::vector<std::string> command_line;
  bool force = false;  // run even when outputs are up to date
  std::function<void(const std::string&)> log;
};

struct StageResult {
  RunManifest manifest;
  bool skipped = false;
};

StageResult stage_gen_corpus(const ExperimentConfig& c, const StageOptions& o);
StageResult stage_train_sft(const ExperimentConfig& c, Variant v, const StageOptions& o);
StageResult stage_m2pc(const ExperimentConfig& c, Variant v, const StageOptions& o);
StageResult stage_ppo(const ExperimentConfig& c, Variant v, Method m, const StageOptions& o);
// Evaluates the checkpoint(s) of a method on the configured split.
StageResult stage_evaluate(const ExperimentConfig& c, Variant v, Method m, Split split, bool subgroups,
                           const StageOptions& o);
// Evaluates an arbitrary checkpoint against an arbitrary corpus file.
StageResult stage_evaluate_checkpoint(const ExperimentConfig& c, const std::filesystem::path& checkpoint,
                                      const std::filesystem::path& corpus, Variant v, Split split, bool subgroups,
                                      const std::string& label, const StageOptions& o);

// gen -> sft -> m2pc -> rl -> eval for every configured variant and method.
// Stages whose outputs are current are skipped; once a stage runs, every
// later stage runs too. Writes results.csv.
std::vector<StageResult> run_pipeline(const ExperimentConfig& c, const StageOptions& o);

}  // namespace satpref
