#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "satpref/corpus.hpp"
#include "satpref/lm.hpp"

namespace satpref {

enum class Variant { Base, Ucot, Coper };
std::string_view to_string(Variant v);
std::optional<Variant> parse_variant(std::string_view s);

enum class Match { Matched, PartiallyMatched, NotMatched };
std::string_view to_string(Match m);  // the vocabulary token
std::optional<Match> parse_match(std::string_view token);

struct CoperRecord {
  std::string intent;
  Strategy strategy = Strategy::Question;
  Match match = Match::Matched;
  std::string reason;
  int score = 1;

  bool valid() const;
  friend bool operator==(const CoperRecord&, const CoperRecord&) = default;
};

// Rationale records keyed by TrainingExample::key().
using RationaleMap = std::map<std::string, CoperRecord>;

std::string_view strategy_token(Strategy s);
std::optional<Strategy> strategy_from_token(std::string_view token);
std::string_view score_token(int score);
std::optional<int> score_from_token(std::string_view token);

struct PromptConfig {
  // Earlier exchanges kept in front of the current one (most recent last).
  int max_context_exchanges = 2;
};

// Dialogue text shown to the model: truncated context then the exchange.
std::string dialogue_text(const TrainingExample& ex, const PromptConfig& config);
// Context verbatim followed by the four-step instruction.
std::string format_ucot_prompt(std::string_view context);
std::string format_base_prompt(std::string_view context);
std::string format_prompt(std::string_view context, Variant v);

// "<bos> dialogue prompt", plus where the exchange tokens sit inside it.
struct EncodedInput {
  TokenSequence tokens;
  std::size_t exchange_begin = 0;
  std::size_t exchange_end = 0;
};
EncodedInput encode_input(const TrainingExample& ex, Variant v, const PromptConfig& config, const Vocabulary& vocab);

// "intent: ... strategy: ... match: ... reason: ... score: score_k <eos>"
std::string coper_text(const CoperRecord& record);
TokenSequence serialize_coper(const CoperRecord& record, const Vocabulary& vocab);

struct Prediction {
  std::optional<CoperRecord> record;
  std::optional<int> score;
  // Index (in the generated tokens) of the score token that was used.
  std::optional<std::size_t> score_position;
};
Prediction parse_prediction(std::span<const TokenId> generated, const Vocabulary& vocab);

struct SftItem {
  std::string key;
  TokenSequence tokens;     // input followed by target
  std::vector<bool> mask;   // true on target positions
  std::size_t input_len = 0;
  std::size_t exchange_begin = 0;
  std::size_t exchange_end = 0;
  std::size_t score_position = 0;  // index of the score token in `tokens`
  int gold_score = 1;
};

// CoPeR targets need a rationale for every example; Base/UCoT targets are
// the score token alone.
std::vector<SftItem> build_sft_dataset(std::span<const TrainingExample* const> examples, const RationaleMap& rationales,
                                       Variant variant, const PromptConfig& prompt, const Vocabulary& vocab);

// Masks over an item that split its loss into the score term and the
// remaining (rationale and end-of-sequence) target tokens.
std::vector<bool> score_only_mask(const SftItem& item);
std::vector<bool> rationale_mask(const SftItem& item);

struct SftConfig {
  double lr = 1e-4;
  int batch = 8;
  int max_epochs = 15;
  int patience = 3;
  double weight_decay = 0.0;

  void validate() const;
};
SftConfig sft_config_from_json(std::string_view text);
std::string sft_config_to_json(const SftConfig& c);

struct EpochLoss {
  int epoch = 0;
  double train_nll = 0.0;
  double valid_nll = 0.0;
};

struct SftResult {
  ModelState model;                // best-validation weights
  std::vector<EpochLoss> curve;
  int best_epoch = 0;
  std::vector<double> step_losses;  // per optimizer step, mean NLL per token
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mean per-token masked NLL over a set of items (no gradients).
double mean_nll(const ModelState& model, std::span<const SftItem> items);

using EpochCallback = std::function<void(const EpochLoss&)>;
SftResult train_sft(ModelState model, std::span<const SftItem> train, std::span<const SftItem> valid,
                    const SftConfig& config, std::uint64_t seed, const EpochCallback& on_epoch = {});

// Generation budget that fits a full target of the variant.
int generation_budget(Variant v);
Prediction predict(const ModelState& model, const Vocabulary& vocab, const TrainingExample& ex, Variant v,
                   const PromptConfig& prompt, const SamplingParams& sampling, std::uint64_t seed);

}  // namespace satpref
