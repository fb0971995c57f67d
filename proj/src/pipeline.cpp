#include "satpref/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "satpref/digest.hpp"

namespace satpref {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Method m) {
  switch (m) {
    case Method::Sft: return "sft";
    case Method::M2pc: return "m2pc";
    case Method::Ppo: return "ppo";
    default: return "pada-ppo";
  }
}

std::optional<Method> parse_method(std::string_view s) {
  for (auto m : {Method::Sft, Method::M2pc, Method::Ppo, Method::PadaPpo}) {
    if (to_string(m) == s) return m;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.model.embed_dim = 32;
  c.model.num_layers = 2;
  c.model.num_heads = 2;
  c.model.context_len = 160;
  c.model.float_width = FloatWidth::F32;
  c.sft.lr = 1e-3;
  c.sft.max_epochs = 8;
  c.m2pc.m_step_lr = 1e-3;
  c.m2pc.em_iterations = 4;
  c.ppo.lr = 1e-4;
  c.ppo.max_train_examples = 800;
  c.ppo.kl_estimator = KlEstimator::Sample;
  return c;
}

namespace {

template <class F>
auto section(const json& j, const char* name, F parse) {
  try {
    return parse(j.dump());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config section '") + name + "': " + e.what());
  }
}

ExternalClientConfig external_from_json(const json& j) {
  ExternalClientConfig c;
  for (auto& [k, v] : j.items()) {
    if (k == "base_url") c.base_url = v.get<std::string>();
    else if (k == "model_name") c.model_name = v.get<std::string>();
    else if (k == "api_key_env_var") c.api_key_env_var = v.get<std::string>();
    else if (k == "timeout_seconds") c.timeout_seconds = v.get<double>();
    else if (k == "max_retries") c.max_retries = v.get<int>();
    else if (k == "max_concurrency") c.max_concurrency = v.get<int>();
    else if (k == "initial_backoff_ms") c.initial_backoff_ms = v.get<int>();
    else throw ConfigError("unknown rationales.external key '" + k + "'");
  }
  return c;
}

json external_to_json(const ExternalClientConfig& c) {
  return {{"base_url", c.base_url},
          {"model_name", c.model_name},
          {"api_key_env_var", c.api_key_env_var},
          {"timeout_seconds", c.timeout_seconds},
          {"max_retries", c.max_retries},
          {"max_concurrency", c.max_concurrency},
          {"initial_backoff_ms", c.initial_backoff_ms}};
}

json sampling_to_json(const SamplingParams& s) {
  return {{"top_p", s.top_p}, {"temperature", s.temperature}, {"greedy", s.greedy}};
}

SamplingParams sampling_from_json(const json& j) {
  SamplingParams s;
  for (auto& [k, v] : j.items()) {
    if (k == "top_p") s.top_p = v.get<double>();
    else if (k == "temperature") s.temperature = v.get<double>();
    else if (k == "greedy") s.greedy = v.get<bool>();
    else throw ConfigError("unknown sampling key '" + k + "'");
  }
  if (!(s.top_p > 0.0 && s.top_p <= 1.0)) throw ConfigError("sampling.top_p must be in (0, 1]");
  if (!(s.temperature > 0.0)) throw ConfigError("sampling.temperature must be positive");
  return s;
}

json model_to_json(const ModelConfig& m) {
  json j = json::parse(model_config_to_json(m));
  j.erase("vocab_size");
  j.erase("has_value_head");
  return j;
}

}  // namespace

ExperimentConfig experiment_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c = default_experiment_config();
  try {
    for (auto& [key, v] : j.items()) {
      if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "generator") c.generator = section(v, "generator", generator_config_from_json);
      else if (key == "model") {
        ModelConfig m = c.model;
        json merged = json::parse(model_config_to_json(m));
        for (auto& [mk, mv] : v.items()) merged[mk] = mv;
        c.model = section(merged, "model", model_config_from_json);
      } else if (key == "prompt") {
        for (auto& [pk, pv] : v.items()) {
          if (pk == "max_context_exchanges") c.prompt.max_context_exchanges = pv.get<int>();
          else throw ConfigError("unknown prompt key '" + pk + "'");
        }
        if (c.prompt.max_context_exchanges < 0) throw ConfigError("prompt.max_context_exchanges must be >= 0");
      } else if (key == "sft") {
        json merged = json::parse(sft_config_to_json(c.sft));
        for (auto& [k2, v2] : v.items()) merged[k2] = v2;
        c.sft = section(merged, "sft", sft_config_from_json);
      } else if (key == "m2pc") {
        json merged = json::parse(m2pc_config_to_json(c.m2pc));
        for (auto& [k2, v2] : v.items()) merged[k2] = v2;
        c.m2pc = section(merged, "m2pc", m2pc_config_from_json);
      } else if (key == "ppo") {
        json merged = json::parse(ppo_config_to_json(c.ppo));
        for (auto& [k2, v2] : v.items()) merged[k2] = v2;
        c.ppo = section(merged, "ppo", ppo_config_from_json);
      } else if (key == "sampling") {
        c.sampling = sampling_from_json(v);
      } else if (key == "rationales") {
        for (auto& [rk, rv] : v.items()) {
          if (rk == "source") c.rationales.source = rv.get<std::string>();
          else if (rk == "strategy_corruption") c.rationales.strategy_corruption = rv.get<double>();
          else if (rk == "external") c.rationales.external = external_from_json(rv);
          else throw ConfigError("unknown rationales key '" + rk + "'");
        }
        if (c.rationales.source != "rule" && c.rationales.source != "external") {
          throw ConfigError("rationales.source must be \"rule\" or \"external\"");
        }
        if (!(c.rationales.strategy_corruption >= 0.0 && c.rationales.strategy_corruption <= 1.0)) {
          throw ConfigError("rationales.strategy_corruption must be in [0, 1]");
        }
        if (c.rationales.source == "external") {
          section(external_to_json(c.rationales.external), "rationales.external", [](const std::string& s) {
            external_from_json(json::parse(s)).validate();
            return 0;
          });
        }
      } else if (key == "pipeline") {
        auto& p = c.pipeline;
        for (auto& [pk, pv] : v.items()) {
          if (pk == "variants") {
            p.variants.clear();
            for (const auto& s : pv) {
              auto var = parse_variant(s.get<std::string>());
              if (!var) throw ConfigError("unknown variant '" + s.get<std::string>() + "'");
              p.variants.push_back(*var);
            }
          } else if (pk == "methods") {
            p.methods.clear();
            for (const auto& s : pv) {
              auto m = parse_method(s.get<std::string>());
              if (!m) throw ConfigError("unknown method '" + s.get<std::string>() + "'");
              p.methods.push_back(*m);
            }
          } else if (pk == "eval_split") {
            auto s = parse_split(pv.get<std::string>());
            if (!s) throw ConfigError("unknown split '" + pv.get<std::string>() + "'");
            p.eval_split = *s;
          } else if (pk == "subgroups") p.subgroups = pv.get<bool>();
          else if (pk == "subgroup_k_min") p.subgroup_k_min = pv.get<int>();
          else if (pk == "subgroup_k_max") p.subgroup_k_max = pv.get<int>();
          else if (pk == "max_eval_examples") p.max_eval_examples = pv.get<int>();
          else if (pk == "max_valid_examples") p.max_valid_examples = pv.get<int>();
          else throw ConfigError("unknown pipeline key '" + pk + "'");
        }
        if (p.variants.empty() || p.methods.empty()) throw ConfigError("pipeline needs variants and methods");
        if (p.subgroup_k_min < 2 || p.subgroup_k_max < p.subgroup_k_min) {
          throw ConfigError("pipeline subgroup k range must satisfy 2 <= k_min <= k_max");
        }
        if (p.max_eval_examples < 0 || p.max_valid_examples < 0) {
          throw ConfigError("pipeline example caps must be non-negative");
        }
      } else {
        throw ConfigError("unknown config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config has a value of the wrong type: ") + e.what());
  } catch (const SchemaError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
  json variants = json::array(), methods = json::array();
  for (auto v : c.pipeline.variants) variants.push_back(std::string(to_string(v)));
  for (auto m : c.pipeline.methods) methods.push_back(std::string(to_string(m)));
  json j = {
      {"seed", c.seed},
      {"generator", json::parse(generator_config_to_json(c.generator))},
      {"model", model_to_json(c.model)},
      {"prompt", {{"max_context_exchanges", c.prompt.max_context_exchanges}}},
      {"sft", json::parse(sft_config_to_json(c.sft))},
      {"m2pc", json::parse(m2pc_config_to_json(c.m2pc))},
      {"ppo", json::parse(ppo_config_to_json(c.ppo))},
      {"sampling", sampling_to_json(c.sampling)},
      {"rationales",
       {{"source", c.rationales.source},
        {"strategy_corruption", c.rationales.strategy_corruption},
        {"external", external_to_json(c.rationales.external)}}},
      {"pipeline",
       {{"variants", variants},
        {"methods", methods},
        {"eval_split", std::string(to_string(c.pipeline.eval_split))},
        {"subgroups", c.pipeline.subgroups},
        {"subgroup_k_min", c.pipeline.subgroup_k_min},
        {"subgroup_k_max", c.pipeline.subgroup_k_max},
        {"max_eval_examples", c.pipeline.max_eval_examples},
        {"max_valid_examples", c.pipeline.max_valid_examples}}},
  };
  return j.dump(2);
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config file " + path.string() + ": " + e.what());
  }
  try {
    return experiment_config_from_json(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<std::string> deviations_from_reference(const ExperimentConfig& c) {
  std::vector<std::string> d;
  auto num = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  d.push_back("backbone: tiny decoder-only transformer (embed_dim " + std::to_string(c.model.embed_dim) +
              ", layers " + std::to_string(c.model.num_layers) + ", heads " + std::to_string(c.model.num_heads) +
              ", context " + std::to_string(c.model.context_len) + ") instead of an 8B model with LoRA");
  d.push_back(std::string("numerics: ") + (c.model.float_width == FloatWidth::F32 ? "f32" : "f64") +
              " parameter storage, no 8-bit quantization");
  d.push_back("data: synthetic corpus with planted group statistics instead of ESConv");
  if (c.prompt.max_context_exchanges >= 0) {
    d.push_back("prompt: context truncated to the last " + std::to_string(c.prompt.max_context_exchanges) +
                " exchanges");
  }
  if (c.sft.lr != 1e-4) d.push_back("sft.lr " + num(c.sft.lr) + " (reference 1e-4)");
  if (c.sft.batch != 8) d.push_back("sft.batch " + std::to_string(c.sft.batch) + " (reference 8)");
  if (c.sft.max_epochs != 15) d.push_back("sft.max_epochs " + std::to_string(c.sft.max_epochs) + " (reference 15)");
  if (c.sft.patience != 3) d.push_back("sft.patience " + std::to_string(c.sft.patience) + " (reference 3)");
  if (c.m2pc.m_step_lr != 1e-5) d.push_back("m2pc.m_step_lr " + num(c.m2pc.m_step_lr) + " (reference 1e-5)");
  if (c.m2pc.em_iterations != 10) {
    d.push_back("m2pc.em_iterations " + std::to_string(c.m2pc.em_iterations) + " (reference 10)");
  }
  if (c.m2pc.clusters_per_group != 20) {
    d.push_back("m2pc.clusters_per_group " + std::to_string(c.m2pc.clusters_per_group) + " (reference 20)");
  }
  if (c.m2pc.m_step_batch != 2 || c.m2pc.grad_accum != 4) d.push_back("m2pc batch/accumulation differ from 2/4");
  if (c.ppo.lr != 3e-7) d.push_back("ppo.lr " + num(c.ppo.lr) + " (reference 3e-7)");
  if (c.ppo.epochs != 5) d.push_back("ppo.epochs " + std::to_string(c.ppo.epochs) + " (reference 5)");
  if (c.ppo.batch != 2 || c.ppo.grad_accum != 2) d.push_back("ppo batch/accumulation differ from 2/2");
  if (c.ppo.max_train_examples > 0) {
    d.push_back("ppo trains on a seeded subset of " + std::to_string(c.ppo.max_train_examples) + " items");
  }
  if (c.ppo.gamma != 0.95 || c.ppo.gae_lambda != 1.0 || c.ppo.value_coeff != 0.1 || c.ppo.clip != 0.2 ||
      c.ppo.kl_coeff != 0.2) {
    d.push_back("ppo constants differ from gamma 0.95, lambda 1, c_vf 0.1, clip 0.2, kl 0.2");
  }
  d.push_back(std::string("ppo.kl_estimator ") + std::string(to_string(c.ppo.kl_estimator)));
  if (c.sampling.greedy) d.push_back("sampling: greedy decoding");
  else if (c.sampling.top_p != 0.85 || c.sampling.temperature != 0.7) {
    d.push_back("sampling top_p " + num(c.sampling.top_p) + ", temperature " + num(c.sampling.temperature) +
                " (reference 0.85 / 0.7)");
  }
  if (c.rationales.source == "rule") d.push_back("rationales: rule-based oracle instead of an external LLM");
  return d;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

Predictor model_predictor(const ModelState& model, const Vocabulary& vocab, Variant v, const PromptConfig& prompt,
                          const SamplingParams& sampling) {
  return [&model, &vocab, v, prompt, sampling](const TrainingExample& ex, std::uint64_t seed) {
    return predict(model, vocab, ex, v, prompt, sampling, seed);
  };
}

Predictor routed_predictor(const ModelState& major, const ModelState& minor, const Vocabulary& vocab, Variant v,
                           const PromptConfig& prompt, const SamplingParams& sampling) {
  return [&major, &minor, &vocab, v, prompt, sampling](const TrainingExample& ex, std::uint64_t seed) {
    const EncodedInput in = encode_input(ex, v, prompt, vocab);
    const Group g = route(in.tokens, in.exchange_begin, in.exchange_end, major, minor);
    return predict(g == Group::Majority ? major : minor, vocab, ex, v, prompt, sampling, seed);
  };
}

std::map<std::string, Group> gold_groups(const Corpus& corpus) {
  std::map<std::string, std::vector<const TrainingExample*>> by_user;
  for (const auto& e : corpus.examples) by_user[e.user_id].push_back(&e);
  std::map<std::string, Group> out;
  for (const auto& [u, exs] : by_user) out[u] = label_group(std::span<const TrainingExample* const>(exs));
  return out;
}

SplitEvaluation evaluate_split(const Corpus& corpus, Split split, const Predictor& predictor, std::uint64_t seed,
                               int max_examples) {
  SplitEvaluation ev;
  ev.examples = corpus.in_split(split);
  if (ev.examples.empty()) {
    throw ConfigError("corpus has no " + std::string(to_string(split)) + " examples");
  }
  if (max_examples > 0 && static_cast<std::size_t>(max_examples) < ev.examples.size()) {
    std::vector<std::size_t> idx(ev.examples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(derive_seed(seed, 0x5ab5));
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(max_examples));
    std::sort(idx.begin(), idx.end());
    std::vector<const TrainingExample*> kept;
    for (auto i : idx) kept.push_back(ev.examples[i]);
    ev.examples = std::move(kept);
  }
  const auto groups = gold_groups(corpus);
  for (std::size_t i = 0; i < ev.examples.size(); ++i) {
    const TrainingExample& ex = *ev.examples[i];
    const Prediction p = predictor(ex, derive_seed(seed, i));
    ev.scores.push_back(p.score);
    ev.preds.push_back(p.score ? PredictedLabel(binarize_score(*p.score)) : std::nullopt);
    ev.golds.push_back(binarize_score(ex.score));
    ev.groups.push_back(groups.at(ex.user_id));
  }
  ev.report = groupwise_eval(ev.preds, ev.golds, ev.groups);
  return ev;
}

namespace {

json f1_json(const F1Report& r) {
  auto cls = [](const ClassScores& s) {
    return json{{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
  };
  return {{"low", cls(r.low)},
          {"high", cls(r.high)},
          {"f1_low", r.f1_low()},
          {"f1_high", r.f1_high()},
          {"f1_weighted", r.f1_weighted},
          {"f1_macro", r.f1_macro},
          {"absent", r.absent}};
}

}  // namespace

std::string groupwise_to_json(const GroupwiseReport& r) {
  json j = {{"combined", f1_json(r.combined)}};
  j["minority"] = r.minority ? f1_json(*r.minority) : json(nullptr);
  j["majority"] = r.majority ? f1_json(*r.majority) : json(nullptr);
  if (!r.minority) j["empty_groups"].push_back("minority");
  if (!r.majority) j["empty_groups"].push_back("majority");
  return j.dump(2);
}

std::vector<std::string> groupwise_csv_rows(const std::string& label, const GroupwiseReport& r) {
  std::vector<std::string> rows;
  if (r.minority) rows.push_back(f1_csv_row(label + ",minority", *r.minority));
  if (r.majority) rows.push_back(f1_csv_row(label + ",majority", *r.majority));
  rows.push_back(f1_csv_row(label + ",combined", r.combined));
  return rows;
}

SubgroupReport subgroup_report(const ModelState& model, const Vocabulary& vocab, const SplitEvaluation& ev,
                               Group group, Variant v, const PromptConfig& prompt, int k_min, int k_max,
                               std::uint64_t seed) {
  std::vector<TokenSequence> inputs;
  std::vector<PredictedLabel> preds;
  std::vector<Satisfaction> golds;
  for (std::size_t i = 0; i < ev.examples.size(); ++i) {
    if (ev.groups[i] != group) continue;
    inputs.push_back(encode_input(*ev.examples[i], v, prompt, vocab).tokens);
    preds.push_back(ev.preds[i]);
    golds.push_back(ev.golds[i]);
  }
  if (inputs.size() < 2) {
    throw ConfigError("subgroup analysis needs at least 2 " + std::string(to_string(group)) + " examples");
  }
  const Points points = extract_hidden_states(model, inputs);
  return subgroup_analysis(points, preds, golds, k_min, k_max, seed);
}

std::string subgroup_to_json(const SubgroupReport& r) {
  json clusters = json::array();
  for (const auto& c : r.clusters) {
    clusters.push_back({{"id", c.id}, {"size", c.size}, {"weighted_f1", c.weighted_f1}, {"exceeds", c.exceeds}});
  }
  return json{{"chosen_k", r.chosen_k},
              {"silhouette", r.silhouette},
              {"baseline", r.baseline},
              {"clusters", clusters}}
      .dump(2);
}

// ---------------------------------------------------------------------------
// Manifests and locking

Artifact describe_artifact(const fs::path& dir, const std::string& name) {
  const std::string bytes = read_file(dir / name);
  return {name, git_blob_id(bytes), sha256_hex(bytes)};
}

namespace {

json artifacts_json(const std::vector<Artifact>& as) {
  json out = json::array();
  for (const auto& a : as) out.push_back({{"name", a.name}, {"git_blob", a.git_blob}, {"sha256", a.sha256}});
  return out;
}

std::vector<Artifact> artifacts_from(const json& j) {
  std::vector<Artifact> out;
  for (const auto& a : j) out.push_back({a.at("name"), a.at("git_blob"), a.at("sha256")});
  return out;
}

}  // namespace

std::string manifest_to_json(const RunManifest& m) {
  return json{{"command", m.command},
              {"command_line", m.command_line},
              {"config_hash", m.config_hash},
              {"seed", m.seed},
              {"inputs", artifacts_json(m.inputs)},
              {"outputs", artifacts_json(m.outputs)},
              {"wall_seconds", m.wall_seconds},
              {"deviations", m.deviations},
              {"notes", json::parse(m.notes_json)}}
      .dump(2);
}

RunManifest manifest_from_json(std::string_view text) {
  const json j = json::parse(text);
  RunManifest m;
  m.command = j.at("command");
  m.command_line = j.at("command_line").get<std::vector<std::string>>();
  m.config_hash = j.at("config_hash");
  m.seed = j.at("seed");
  m.inputs = artifacts_from(j.at("inputs"));
  m.outputs = artifacts_from(j.at("outputs"));
  m.wall_seconds = j.at("wall_seconds");
  m.deviations = j.at("deviations").get<std::vector<std::string>>();
  m.notes_json = j.at("notes").dump();
  return m;
}

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw ConfigError("output directory " + dir.string() + " is locked by another run (" + path_.string() +
                        "); remove the file if no run is active");
    }
    throw std::runtime_error("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// Stages

std::string sft_checkpoint_name(Variant v) { return "sft_" + std::string(to_string(v)) + ".ckpt"; }

std::string ref_checkpoint_name(Variant v, Group g) {
  return std::string(g == Group::Majority ? "ref_major_" : "ref_minor_") + std::string(to_string(v)) + ".ckpt";
}

std::string policy_checkpoint_name(Variant v, Method m) {
  return (m == Method::PadaPpo ? "pada_ppo_" : "ppo_") + std::string(to_string(v)) + ".ckpt";
}

namespace {

constexpr const char* kCorpusFile = "corpus.jsonl";
constexpr const char* kRationaleFile = "rationales.jsonl";

std::uint64_t variant_index(Variant v) { return static_cast<std::uint64_t>(v); }

std::string config_hash(const json& parts) { return sha256_hex(parts.dump()); }

json base_parts(const ExperimentConfig& c, const std::string& stage) {
  return {{"stage", stage}, {"seed", c.seed}};
}

class Stage {
 public:
  Stage(std::string command, const ExperimentConfig& c, const StageOptions& o, json hash_parts,
        std::vector<std::string> input_names)
      : command_(std::move(command)), options_(o), start_(std::chrono::steady_clock::now()) {
    manifest_.command = command_;
    manifest_.command_line = o.command_line;
    manifest_.config_hash = config_hash(hash_parts);
    manifest_.seed = c.seed;
    manifest_.deviations = deviations_from_reference(c);
    for (const auto& n : input_names) {
      if (!fs::exists(o.out / n)) {
        throw ConfigError(command_ + ": missing input " + (o.out / n).string() + " (run the earlier stage first)");
      }
      manifest_.inputs.push_back(describe_artifact(o.out, n));
    }
  }

  fs::path manifest_path() const { return options_.out / ("manifest_" + command_ + ".json"); }

  // The recorded manifest when it matches this configuration, these inputs
  // and the files currently on disk.
  std::optional<RunManifest> current() const {
    if (options_.force || !fs::exists(manifest_path())) return std::nullopt;
    RunManifest old;
    try {
      old = manifest_from_json(read_file(manifest_path()));
    } catch (const std::exception&) {
      return std::nullopt;
    }
    if (old.config_hash != manifest_.config_hash || old.inputs != manifest_.inputs) return std::nullopt;
    for (const auto& a : old.outputs) {
      if (!fs::exists(options_.out / a.name)) return std::nullopt;
      if (!(describe_artifact(options_.out, a.name) == a)) return std::nullopt;
    }
    return old;
  }

  void log(const std::string& line) const {
    if (options_.log) options_.log(command_ + ": " + line);
  }

  void write(const std::string& name, std::string_view bytes) {
    write_file(options_.out / name, bytes);
    outputs_.push_back(name);
  }

  void save(const std::string& name, const ModelState& model) {
    save_checkpoint(model, (options_.out / name).string());
    outputs_.push_back(name);
  }

  StageResult finish(const json& notes) {
    for (const auto& n : outputs_) manifest_.outputs.push_back(describe_artifact(options_.out, n));
    manifest_.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    manifest_.notes_json = notes.dump();
    write_file(manifest_path(), manifest_to_json(manifest_));
    log("done in " + std::to_string(manifest_.wall_seconds) + " s");
    return {manifest_, false};
  }

  const fs::path& out() const { return options_.out; }

 private:
  std::string command_;
  const StageOptions& options_;
  std::chrono::steady_clock::time_point start_;
  RunManifest manifest_;
  std::vector<std::string> outputs_;
};

std::optional<StageResult> skip_if_current(const Stage& s) {
  if (auto m = s.current()) {
    s.log("outputs up to date, skipped");
    return StageResult{*m, true};
  }
  return std::nullopt;
}

Corpus read_corpus(const fs::path& out) { return load_corpus(out / kCorpusFile); }

RationaleMap read_rationales(const fs::path& out, Variant v) {
  if (v != Variant::Coper) return {};
  return rationales_from_jsonl(read_file(out / kRationaleFile));
}

std::vector<std::string> sft_inputs(Variant v) {
  std::vector<std::string> in{kCorpusFile};
  if (v == Variant::Coper) in.push_back(kRationaleFile);
  return in;
}

ModelState read_model(const fs::path& path, const Corpus& corpus) {
  ModelState m = load_checkpoint(path.string());
  if (static_cast<std::size_t>(m.config.vocab_size) != corpus.vocabulary.size()) {
    throw ConfigError("vocabulary mismatch: checkpoint " + path.string() + " has vocab_size " +
                      std::to_string(m.config.vocab_size) + ", corpus vocabulary has " +
                      std::to_string(corpus.vocabulary.size()) + " tokens");
  }
  return m;
}

std::vector<SftItem> items_for(const Corpus& corpus, Split split, const RationaleMap& rationales, Variant v,
                               const PromptConfig& prompt) {
  const auto examples = corpus.in_split(split);
  return build_sft_dataset(examples, rationales, v, prompt, corpus.vocabulary);
}

json f1_summary(const GroupwiseReport& r) {
  json j = {{"combined_f1_weighted", r.combined.f1_weighted}, {"combined_f1_macro", r.combined.f1_macro}};
  if (r.minority) j["minority_f1_low"] = r.minority->f1_low();
  if (r.majority) j["majority_f1_weighted"] = r.majority->f1_weighted;
  return j;
}

std::string eval_csv_header() {
  const std::string h = f1_csv_header();
  return "variant,method,group" + h.substr(h.find(','));
}

}  // namespace

StageResult stage_gen_corpus(const ExperimentConfig& c, const StageOptions& o) {
  fs::create_directories(o.out);
  json parts = base_parts(c, "gen-corpus");
  parts["generator"] = json::parse(generator_config_to_json(c.generator));
  parts["rationales"] = {{"source", c.rationales.source}, {"corruption", c.rationales.strategy_corruption}};
  Stage s("gen-corpus", c, o, parts, {});
  if (auto r = skip_if_current(s)) return *r;

  Corpus corpus = split_corpus(generate_corpus(c.generator, derive_seed(c.seed, 1)), derive_seed(c.seed, 2));
  s.write(kCorpusFile, corpus_to_jsonl(corpus));
  s.log("wrote " + std::to_string(corpus.examples.size()) + " examples");

  RationaleMap rationales;
  if (c.rationales.source == "rule") {
    rationales = synthesize_corpus(corpus, derive_seed(c.seed, 3), c.rationales.strategy_corruption);
  } else {
    std::vector<const TrainingExample*> wanted;
    for (const auto& e : corpus.examples) {
      if (e.split != Split::Test) wanted.push_back(&e);
    }
    auto outcomes = synthesize_external_batch(c.rationales.external, wanted, default_synthesis_template(),
                                              [&](const std::string& line) { s.log(line); });
    for (std::size_t i = 0; i < wanted.size(); ++i) rationales[wanted[i]->key()] = outcomes[i].record;
  }
  s.write(kRationaleFile, rationales_to_jsonl(rationales));

  std::vector<CoperRecord> records;
  std::vector<Strategy> strategies;
  std::vector<int> scores;
  for (const auto& e : corpus.examples) {
    auto it = rationales.find(e.key());
    if (it == rationales.end()) continue;
    records.push_back(it->second);
    strategies.push_back(e.strategy);
    scores.push_back(e.score);
  }
  json notes = {{"examples", corpus.examples.size()},
                {"conversations", corpus.conversation_ids().size()},
                {"vocabulary_size", corpus.vocabulary.size()},
                {"vocabulary_digest", corpus.vocabulary.digest()},
                {"train", corpus.in_split(Split::Train).size()},
                {"valid", corpus.in_split(Split::Valid).size()},
                {"test", corpus.in_split(Split::Test).size()}};
  if (!records.empty()) {
    const RationaleEval re = evaluate_rationales(records, strategies, scores);
    notes["rationale_strategy_accuracy"] = re.strategy_accuracy;
    notes["rationale_logical_accuracy"] = re.logical_accuracy;
  }
  return s.finish(notes);
}

StageResult stage_train_sft(const ExperimentConfig& c, Variant v, const StageOptions& o) {
  json parts = base_parts(c, "train-sft");
  parts["variant"] = to_string(v);
  parts["model"] = model_to_json(c.model);
  parts["prompt"] = c.prompt.max_context_exchanges;
  parts["sft"] = json::parse(sft_config_to_json(c.sft));
  Stage s("train-sft_" + std::string(to_string(v)), c, o, parts, sft_inputs(v));
  if (auto r = skip_if_current(s)) return *r;

  const Corpus corpus = read_corpus(o.out);
  const RationaleMap rationales = read_rationales(o.out, v);
  const auto train = items_for(corpus, Split::Train, rationales, v, c.prompt);
  const auto valid = items_for(corpus, Split::Valid, rationales, v, c.prompt);
  if (train.empty() || valid.empty()) throw ConfigError("train-sft needs non-empty train and valid splits");
  ModelConfig mc = c.model;
  mc.vocab_size = static_cast<int>(corpus.vocabulary.size());
  mc.has_value_head = false;
  mc.validate();
  const ModelState init = init_model(mc, ModelRole::Sft, derive_seed(c.seed, 10 + variant_index(v)));
  const SftResult res = train_sft(init, train, valid, c.sft, derive_seed(c.seed, 20 + variant_index(v)),
                                  [&](const EpochLoss& e) {
                                    s.log("epoch " + std::to_string(e.epoch) + " train_nll " +
                                          std::to_string(e.train_nll) + " valid_nll " + std::to_string(e.valid_nll));
                                  });
  s.save(sft_checkpoint_name(v), res.model);
  std::ostringstream csv;
  csv << "epoch,train_nll,valid_nll\n";
  csv.precision(10);
  for (const auto& e : res.curve) csv << e.epoch << ',' << e.train_nll << ',' << e.valid_nll << '\n';
  s.write("sft_" + std::string(to_string(v)) + "_loss.csv", csv.str());
  return s.finish({{"best_epoch", res.best_epoch}, {"epochs_run", res.curve.size()}, {"steps", res.step_losses.size()}});
}

StageResult stage_m2pc(const ExperimentConfig& c, Variant v, const StageOptions& o) {
  json parts = base_parts(c, "run-m2pc");
  parts["variant"] = to_string(v);
  parts["m2pc"] = json::parse(m2pc_config_to_json(c.m2pc));
  parts["prompt"] = c.prompt.max_context_exchanges;
  parts["sampling"] = sampling_to_json(c.sampling);
  parts["max_valid_examples"] = c.pipeline.max_valid_examples;
  auto inputs = sft_inputs(v);
  inputs.push_back(sft_checkpoint_name(v));
  Stage s("run-m2pc_" + std::string(to_string(v)), c, o, parts, inputs);
  if (auto r = skip_if_current(s)) return *r;

  const Corpus corpus = read_corpus(o.out);
  const RationaleMap rationales = read_rationales(o.out, v);
  const ModelState base = read_model(o.out / sft_checkpoint_name(v), corpus);
  const auto train = items_for(corpus, Split::Train, rationales, v, c.prompt);
  const UserItems users = group_items_by_user(train, corpus);
  const auto provisional = provisional_groups(corpus, Split::Train);
  const std::uint64_t seed = derive_seed(c.seed, 30 + variant_index(v));

  std::map<std::string, Group> planted;
  for (const auto& [u, p] : corpus.users) {
    if (p.planted_group) planted[u] = *p.planted_group;
  }
  const PairScorer scorer = [&](const ModelState& major, const ModelState& minor) {
    const auto pred = routed_predictor(major, minor, corpus.vocabulary, v, c.prompt, c.sampling);
    return evaluate_split(corpus, Split::Valid, pred, derive_seed(seed, 99), c.pipeline.max_valid_examples)
        .report.combined.f1_weighted;
  };
  std::ostringstream csv;
  csv << "iteration,major_users,minor_users,valid_f1_weighted,major_loss,minor_loss,planted_cluster_agreement,"
         "planted_user_agreement\n";
  csv.precision(10);
  const M2pcResult res = run_m2pc(base, users, provisional, c.m2pc, seed, scorer, [&](const M2pcIteration& it) {
    csv << it.state.iteration << ',' << it.state.users_in(Group::Majority) << ','
        << it.state.users_in(Group::Minority) << ',';
    if (it.valid_f1) csv << *it.valid_f1;
    csv << ',' << it.major_report.mean_loss << ',' << it.minor_report.mean_loss << ',';
    if (!planted.empty()) {
      const auto a = planted_agreement(it.state, planted);
      csv << a.cluster_level << ',' << a.user_level;
    } else {
      csv << ',';
    }
    csv << '\n';
    s.log("iteration " + std::to_string(it.state.iteration) + " major " +
          std::to_string(it.state.users_in(Group::Majority)) + " minor " +
          std::to_string(it.state.users_in(Group::Minority)));
  });
  ModelState major = res.best_major, minor = res.best_minor;
  major.role = ModelRole::RefMajor;
  minor.role = ModelRole::RefMinor;
  s.save(ref_checkpoint_name(v, Group::Majority), major);
  s.save(ref_checkpoint_name(v, Group::Minority), minor);
  s.write("m2pc_" + std::string(to_string(v)) + "_history.json", cluster_history_to_json(res.history));
  s.write("m2pc_" + std::string(to_string(v)) + "_iterations.csv", csv.str());
  json notes = {{"best_iteration", res.best_iteration}, {"warnings", res.warnings}};
  if (!planted.empty()) {
    const auto a = planted_agreement(res.history[static_cast<std::size_t>(res.best_iteration)].state, planted);
    notes["best_planted_cluster_agreement"] = a.cluster_level;
    notes["best_planted_user_agreement"] = a.user_level;
  }
  return s.finish(notes);
}

StageResult stage_ppo(const ExperimentConfig& c, Variant v, Method m, const StageOptions& o) {
  if (m != Method::Ppo && m != Method::PadaPpo) throw std::invalid_argument("stage_ppo: method must be a PPO method");
  const std::string command = (m == Method::Ppo ? "train-ppo_" : "train-pada-ppo_") + std::string(to_string(v));
  json parts = base_parts(c, command);
  parts["ppo"] = json::parse(ppo_config_to_json(c.ppo));
  parts["prompt"] = c.prompt.max_context_exchanges;
  parts["sampling"] = sampling_to_json(c.sampling);
  parts["max_valid_examples"] = c.pipeline.max_valid_examples;
  auto inputs = sft_inputs(v);
  inputs.push_back(sft_checkpoint_name(v));
  if (m == Method::PadaPpo) {
    inputs.push_back(ref_checkpoint_name(v, Group::Majority));
    inputs.push_back(ref_checkpoint_name(v, Group::Minority));
  }
  Stage s(command, c, o, parts, inputs);
  if (auto r = skip_if_current(s)) return *r;

  const Corpus corpus = read_corpus(o.out);
  const RationaleMap rationales = read_rationales(o.out, v);
  const ModelState sft = read_model(o.out / sft_checkpoint_name(v), corpus);
  std::optional<ModelState> major, minor;
  References refs = References::one(sft);
  if (m == Method::PadaPpo) {
    major = read_model(o.out / ref_checkpoint_name(v, Group::Majority), corpus);
    minor = read_model(o.out / ref_checkpoint_name(v, Group::Minority), corpus);
    refs = References::routed(*major, *minor);
  }
  const auto train = items_for(corpus, Split::Train, rationales, v, c.prompt);
  const std::uint64_t seed = derive_seed(c.seed, 40 + variant_index(v));
  const PolicyValidator validator = [&](const ModelState& policy, PpoEpochMetrics& metrics) {
    const auto pred = model_predictor(policy, corpus.vocabulary, v, c.prompt, c.sampling);
    const auto ev = evaluate_split(corpus, Split::Valid, pred, derive_seed(seed, 99), c.pipeline.max_valid_examples);
    metrics.valid_f1_weighted = ev.report.combined.f1_weighted;
    if (ev.report.minority) metrics.valid_f1_low_minority = ev.report.minority->f1_low();
    s.log("epoch " + std::to_string(metrics.epoch) + " mean_reward " + std::to_string(metrics.mean_reward) +
          " mean_kl " + std::to_string(metrics.mean_kl));
  };
  PpoResult res;
  try {
    res = train_ppo(sft, refs, train, corpus.vocabulary, v, c.ppo, c.sampling, seed, validator);
  } catch (const PpoDiverged& e) {
    const std::string name = policy_checkpoint_name(v, m) + ".last_good";
    save_checkpoint(e.last_good(), (o.out / name).string());
    throw std::runtime_error(std::string(e.what()) + "; last good policy saved to " + (o.out / name).string());
  }
  s.save(policy_checkpoint_name(v, m), res.policy);
  const std::string stem = m == Method::PadaPpo ? "pada_ppo_" : "ppo_";
  s.write(stem + std::string(to_string(v)) + "_metrics.csv", ppo_metrics_csv(res.history));
  json notes = {{"optimizer_steps", res.step_losses.size()}, {"epochs", res.history.size()}};
  if (!res.history.empty()) {
    notes["final_mean_reward"] = res.history.back().mean_reward;
    notes["final_mean_kl"] = res.history.back().mean_kl;
  }
  return s.finish(notes);
}

namespace {

StageResult evaluate_with(Stage& s, const ExperimentConfig& c, const Corpus& corpus, const Predictor& predictor,
                          const ModelState& hidden_model, Variant v, Split split, bool subgroups,
                          const std::string& stem, const std::string& csv_label) {
  if (corpus.in_split(split).empty()) {
    throw ConfigError("corpus has no " + std::string(to_string(split)) + " examples");
  }
  const auto ev = evaluate_split(corpus, split, predictor, derive_seed(c.seed, 60), c.pipeline.max_eval_examples);
  json report = json::parse(groupwise_to_json(ev.report));
  report["split"] = to_string(split);
  report["examples"] = ev.examples.size();
  s.write("eval_" + stem + ".json", report.dump(2));
  std::string csv = eval_csv_header() + "\n";
  for (const auto& row : groupwise_csv_rows(csv_label, ev.report)) csv += row + "\n";
  s.write("eval_" + stem + ".csv", csv);
  json notes = f1_summary(ev.report);
  if (subgroups) {
    json sub;
    for (Group g : {Group::Minority, Group::Majority}) {
      try {
        const auto r = subgroup_report(hidden_model, corpus.vocabulary, ev, g, v, c.prompt, c.pipeline.subgroup_k_min,
                                       c.pipeline.subgroup_k_max, derive_seed(c.seed, 70));
        sub[std::string(to_string(g))] = json::parse(subgroup_to_json(r));
      } catch (const ConfigError& e) {
        sub[std::string(to_string(g))] = {{"error", e.what()}};
      }
    }
    s.write("subgroups_" + stem + ".json", sub.dump(2));
  }
  return s.finish(notes);
}

}  // namespace

StageResult stage_evaluate(const ExperimentConfig& c, Variant v, Method m, Split split, bool subgroups,
                           const StageOptions& o) {
  const std::string stem = std::string(to_string(v)) + "_" + std::string(to_string(m));
  json parts = base_parts(c, "evaluate");
  parts["method"] = to_string(m);
  parts["variant"] = to_string(v);
  parts["split"] = to_string(split);
  parts["subgroups"] = subgroups;
  parts["sampling"] = sampling_to_json(c.sampling);
  parts["prompt"] = c.prompt.max_context_exchanges;
  parts["max_eval_examples"] = c.pipeline.max_eval_examples;
  parts["k"] = {c.pipeline.subgroup_k_min, c.pipeline.subgroup_k_max};
  std::vector<std::string> inputs{kCorpusFile};
  if (m == Method::Sft) inputs.push_back(sft_checkpoint_name(v));
  else if (m == Method::M2pc) {
    inputs.push_back(ref_checkpoint_name(v, Group::Majority));
    inputs.push_back(ref_checkpoint_name(v, Group::Minority));
  } else {
    inputs.push_back(policy_checkpoint_name(v, m));
  }
  Stage s("evaluate_" + stem, c, o, parts, inputs);
  if (auto r = skip_if_current(s)) return *r;

  const Corpus corpus = read_corpus(o.out);
  const std::string label = std::string(to_string(v)) + "," + std::string(to_string(m));
  if (m == Method::M2pc) {
    const ModelState major = read_model(o.out / inputs[1], corpus);
    const ModelState minor = read_model(o.out / inputs[2], corpus);
    const auto pred = routed_predictor(major, minor, corpus.vocabulary, v, c.prompt, c.sampling);
    return evaluate_with(s, c, corpus, pred, major, v, split, subgroups, stem, label);
  }
  const ModelState model = read_model(o.out / inputs[1], corpus);
  const auto pred = model_predictor(model, corpus.vocabulary, v, c.prompt, c.sampling);
  return evaluate_with(s, c, corpus, pred, model, v, split, subgroups, stem, label);
}

StageResult stage_evaluate_checkpoint(const ExperimentConfig& c, const fs::path& checkpoint, const fs::path& corpus_path,
                                      Variant v, Split split, bool subgroups, const std::string& label,
                                      const StageOptions& o) {
  fs::create_directories(o.out);
  for (const auto& p : {checkpoint, corpus_path}) {
    if (!fs::exists(p)) throw ConfigError("evaluate: file not found: " + p.string());
  }
  // Inputs outside the output directory are hashed by content only.
  json parts = base_parts(c, "evaluate");
  parts["checkpoint_sha256"] = sha256_file(checkpoint);
  parts["corpus_sha256"] = sha256_file(corpus_path);
  parts["variant"] = to_string(v);
  parts["split"] = to_string(split);
  parts["subgroups"] = subgroups;
  parts["sampling"] = sampling_to_json(c.sampling);
  parts["prompt"] = c.prompt.max_context_exchanges;
  parts["max_eval_examples"] = c.pipeline.max_eval_examples;
  Stage s("evaluate_" + label, c, o, parts, {});
  if (auto r = skip_if_current(s)) return *r;
  const Corpus corpus = load_corpus(corpus_path);
  const ModelState model = read_model(checkpoint, corpus);
  const auto pred = model_predictor(model, corpus.vocabulary, v, c.prompt, c.sampling);
  return evaluate_with(s, c, corpus, pred, model, v, split, subgroups, label,
                       std::string(to_string(v)) + "," + label);
}

std::vector<StageResult> run_pipeline(const ExperimentConfig& c, const StageOptions& o) {
  std::vector<StageResult> results;
  StageOptions opts = o;
  auto run = [&](auto&& stage) {
    StageResult r = stage(opts);
    if (!r.skipped) opts.force = true;
    results.push_back(r);
    return r;
  };
  auto named = [&](const std::string& name, auto&& fn) {
    return [&, name, fn](const StageOptions& so) {
      try {
        return fn(so);
      } catch (const ConfigError& e) {
        throw ConfigError("stage " + name + " failed: " + e.what());
      } catch (const std::exception& e) {
        throw std::runtime_error("stage " + name + " failed: " + e.what());
      }
    };
  };
  const auto& methods = c.pipeline.methods;
  auto wants = [&](Method m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };

  run(named("gen-corpus", [&](const StageOptions& so) { return stage_gen_corpus(c, so); }));
  std::string csv = eval_csv_header() + "\n";
  for (Variant v : c.pipeline.variants) {
    const std::string vs(to_string(v));
    const bool force_before = opts.force;
    run(named("train-sft " + vs, [&](const StageOptions& so) { return stage_train_sft(c, v, so); }));
    if (wants(Method::M2pc) || wants(Method::PadaPpo)) {
      run(named("run-m2pc " + vs, [&](const StageOptions& so) { return stage_m2pc(c, v, so); }));
    }
    for (Method m : {Method::Ppo, Method::PadaPpo}) {
      if (!wants(m)) continue;
      run(named(std::string(to_string(m)) + " " + vs, [&](const StageOptions& so) { return stage_ppo(c, v, m, so); }));
    }
    for (Method m : methods) {
      run(named("evaluate " + vs + " " + std::string(to_string(m)), [&](const StageOptions& so) {
        return stage_evaluate(c, v, m, c.pipeline.eval_split, c.pipeline.subgroups, so);
      }));
      const std::string text = read_file(o.out / ("eval_" + vs + "_" + std::string(to_string(m)) + ".csv"));
      csv += text.substr(text.find('\n') + 1);
    }
    // Variants are independent chains below the shared corpus.
    opts.force = force_before;
  }
  write_file(o.out / "results.csv", csv);

  RunManifest m;
  m.command = "pipeline";
  m.command_line = o.command_line;
  m.config_hash = sha256_hex(experiment_config_to_json(c));
  m.seed = c.seed;
  m.deviations = deviations_from_reference(c);
  double wall = 0.0;
  std::vector<std::string> seen;
  for (const auto& r : results) {
    wall += r.skipped ? 0.0 : r.manifest.wall_seconds;
    for (const auto& a : r.manifest.outputs) {
      if (std::find(seen.begin(), seen.end(), a.name) != seen.end()) continue;
      seen.push_back(a.name);
      m.outputs.push_back(describe_artifact(o.out, a.name));
    }
  }
  m.outputs.push_back(describe_artifact(o.out, "results.csv"));
  m.wall_seconds = wall;
  json stages = json::array();
  for (const auto& r : results) stages.push_back({{"stage", r.manifest.command}, {"skipped", r.skipped}});
  m.notes_json = json{{"stages", stages}}.dump();
  write_file(o.out / "manifest_pipeline.json", manifest_to_json(m));
  return results;
}

}  // namespace satpref
