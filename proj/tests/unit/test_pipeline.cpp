#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "satpref/digest.hpp"
#include "satpref/pipeline.hpp"

using namespace satpref;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("satpref_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const char* kTiny = R"({
  "seed": 3,
  "generator": {"conversations": 40, "exchanges_per_conversation": 3},
  "model": {"embed_dim": 8, "num_layers": 1, "context_len": 160},
  "sft": {"max_epochs": 1},
  "m2pc": {"em_iterations": 1, "clusters_per_group": 2},
  "ppo": {"epochs": 1, "max_train_examples": 8},
  "pipeline": {"variants": ["ucot"], "max_eval_examples": 12, "max_valid_examples": 8}
})";

StageOptions quiet(const fs::path& out) {
  StageOptions o;
  o.out = out;
  return o;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SATPREF_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("experiment config parsing") {
  const ExperimentConfig d = default_experiment_config();
  CHECK(d.sampling.top_p == 0.85);
  CHECK(d.sampling.temperature == 0.7);
  CHECK(d.ppo.gamma == 0.95);
  CHECK(d.m2pc.clusters_per_group == 20);

  const ExperimentConfig t = experiment_config_from_json(kTiny);
  CHECK(t.seed == 3);
  CHECK(t.generator.conversations == 40);
  CHECK(t.model.embed_dim == 8);
  CHECK(t.model.num_heads == d.model.num_heads);
  CHECK(t.sft.lr == d.sft.lr);
  CHECK(t.pipeline.variants == std::vector<Variant>{Variant::Ucot});
  CHECK(experiment_config_to_json(experiment_config_from_json(experiment_config_to_json(t))) ==
        experiment_config_to_json(t));

  CHECK_THROWS_AS(experiment_config_from_json(R"({"sedd": 1})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(R"({"sft": {"lr": "fast"}})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(R"({"sampling": {"top_p": 0}})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(R"({"pipeline": {"variants": ["gpt"]}})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json("{"), ConfigError);
  try {
    load_experiment_config("/nonexistent/exp.json");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/exp.json") != std::string::npos);
  }

  const auto dev = deviations_from_reference(t);
  auto mentions = [&](const std::string& s) {
    for (const auto& line : dev) {
      if (line.find(s) != std::string::npos) return true;
    }
    return false;
  };
  CHECK(mentions("sft.lr"));
  CHECK(mentions("ppo.lr"));
  CHECK(mentions("synthetic corpus"));
}

TEST_CASE("manifest round trip and directory lock") {
  RunManifest m;
  m.command = "train-sft_ucot";
  m.command_line = {"satpref", "train-sft"};
  m.config_hash = "abc";
  m.seed = 9;
  m.inputs = {{"corpus.jsonl", "1", "2"}};
  m.outputs = {{"sft_ucot.ckpt", "3", "4"}};
  m.deviations = {"x"};
  m.notes_json = R"({"best_epoch":2})";
  const RunManifest back = manifest_from_json(manifest_to_json(m));
  CHECK(back.command == m.command);
  CHECK(back.inputs == m.inputs);
  CHECK(back.outputs == m.outputs);
  CHECK(back.deviations == m.deviations);
  CHECK(back.seed == 9);

  TempDir dir("lock");
  {
    DirectoryLock lock(dir.path);
    CHECK(fs::exists(dir.path / ".lock"));
    CHECK_THROWS_AS(DirectoryLock(dir.path), ConfigError);
  }
  CHECK_FALSE(fs::exists(dir.path / ".lock"));
  CHECK_NOTHROW(DirectoryLock(dir.path));
}

TEST_CASE("corpus generation stage") {
  const ExperimentConfig c = experiment_config_from_json(kTiny);
  TempDir a("gen_a"), b("gen_b");
  const StageResult ra = stage_gen_corpus(c, quiet(a.path));
  const StageResult rb = stage_gen_corpus(c, quiet(b.path));
  CHECK_FALSE(ra.skipped);
  CHECK(load_corpus(a.path / "corpus.jsonl").examples.size() == 120);
  CHECK(git_blob_id_file(a.path / "corpus.jsonl") == git_blob_id_file(b.path / "corpus.jsonl"));
  CHECK(sha256_file(a.path / "rationales.jsonl") == sha256_file(b.path / "rationales.jsonl"));
  CHECK(ra.manifest.outputs == rb.manifest.outputs);
  CHECK(fs::exists(a.path / "manifest_gen-corpus.json"));
  CHECK(stage_gen_corpus(c, quiet(a.path)).skipped);

  ExperimentConfig other = c;
  other.seed = 4;
  const StageResult rc = stage_gen_corpus(other, quiet(a.path));
  CHECK_FALSE(rc.skipped);
  CHECK(rc.manifest.outputs != ra.manifest.outputs);
}

TEST_CASE("stages need their inputs") {
  const ExperimentConfig c = experiment_config_from_json(kTiny);
  TempDir dir("missing");
  CHECK_THROWS_AS(stage_train_sft(c, Variant::Ucot, quiet(dir.path)), ConfigError);
  CHECK_THROWS_AS(stage_m2pc(c, Variant::Ucot, quiet(dir.path)), ConfigError);
}

TEST_CASE("an empty split is a configuration error") {
  Corpus corpus = corpus_from_jsonl(
      R"({"conversation_id": "c", "user_id": "u", "turn_index": 0, "context": "", "exchange": "seeker: hi", )"
      R"("strategy": "Question", "score": 4, "split": "train"})");
  const Predictor never = [](const TrainingExample&, std::uint64_t) { return Prediction{}; };
  CHECK_THROWS_AS(evaluate_split(corpus, Split::Test, never, 1), ConfigError);
  const SplitEvaluation e = evaluate_split(corpus, Split::Train, never, 1);
  CHECK(e.report.combined.absent == 1);
}

TEST_CASE("pipeline resumes and reruns what changed") {
  const ExperimentConfig c = experiment_config_from_json(kTiny);
  TempDir dir("resume");
  const auto first = run_pipeline(c, quiet(dir.path));
  for (const auto& r : first) CHECK_FALSE(r.skipped);
  CHECK(first.size() == 1 + 1 + 1 + 2 + 4);
  CHECK(fs::exists(dir.path / "results.csv"));
  CHECK(fs::exists(dir.path / "manifest_pipeline.json"));

  const auto second = run_pipeline(c, quiet(dir.path));
  for (const auto& r : second) CHECK(r.skipped);

  {
    std::ofstream f(dir.path / "ref_major_ucot.ckpt", std::ios::app | std::ios::binary);
    f << 'x';
  }
  const auto third = run_pipeline(c, quiet(dir.path));
  REQUIRE(third.size() == first.size());
  CHECK(third[0].skipped);
  CHECK(third[1].skipped);
  for (std::size_t i = 2; i < third.size(); ++i) CHECK_FALSE(third[i].skipped);
  CHECK(third[2].manifest.outputs == first[2].manifest.outputs);

  StageOptions forced = quiet(dir.path);
  forced.force = true;
  for (const auto& r : run_pipeline(c, forced)) CHECK_FALSE(r.skipped);
}

TEST_CASE("command-line exit codes") {
  TempDir dir("cli");
  const fs::path cfg = dir.path / "tiny.json";
  write_file(cfg, kTiny);
  const std::string out = " --out " + (dir.path / "out").string();
  CHECK(run_cli("") == 2);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("train-sft --config /nonexistent.json" + out) == 2);
  CHECK(run_cli("gen-corpus --config " + cfg.string() + out + " --quiet") == 0);
  CHECK(fs::exists(dir.path / "out" / "corpus.jsonl"));
  CHECK(run_cli("evaluate --split dev --config " + cfg.string() + out) == 2);
  CHECK(run_cli("train-sft --variant gpt --config " + cfg.string() + out) == 2);
  write_file(dir.path / "out" / ".lock", "other");
  CHECK(run_cli("gen-corpus --config " + cfg.string() + out) == 2);
}
