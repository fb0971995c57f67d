#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "satpref/vocabulary.hpp"

namespace satpref {

enum class Strategy {
  Question,
  RestatementOrParaphrasing,
  ProvidingSuggestions,
  Information,
  ReflectionOfFeelings,
  SelfDisclosure,
  AffirmationAndReassurance,
};
inline constexpr std::size_t kStrategyCount = 7;

enum class Orientation { Cognition, Emotion };
enum class Group { Majority, Minority };
enum class Satisfaction { Low, High };
enum class Split { Train, Valid, Test };

Orientation orientation_of(Strategy s);
std::string_view to_string(Strategy s);  // ESConv label, e.g. "Reflection of Feelings"
std::string_view to_string(Orientation o);
std::string_view to_string(Group g);
std::string_view to_string(Split s);
std::optional<Strategy> parse_strategy(std::string_view name);  // case/space/underscore tolerant
std::optional<Group> parse_group(std::string_view name);
std::optional<Split> parse_split(std::string_view name);
std::array<Strategy, kStrategyCount> all_strategies();

// Raised for any malformed corpus record or generator config.
class SchemaError : public std::runtime_error {
 public:
  SchemaError(std::string field, std::size_t line, const std::string& what)
      : std::runtime_error(what), field_(std::move(field)), line_(line) {}
  const std::string& field() const { return field_; }
  std::size_t line() const { return line_; }

 private:
  std::string field_;
  std::size_t line_;
};

struct TrainingExample {
  std::string conversation_id;
  std::string user_id;
  int turn_index = 0;
  std::string context;   // token text of earlier exchanges of the same conversation
  std::string exchange;  // "seeker: ... supporter: ..."
  Strategy strategy = Strategy::Question;
  int score = 1;
  Split split = Split::Train;
  std::optional<Group> planted_group;

  std::string key() const { return conversation_id + "#" + std::to_string(turn_index); }
  friend bool operator==(const TrainingExample&, const TrainingExample&) = default;
};

// Score distribution over 1..5 (index 0 is score 1).
using ScoreDistribution = std::array<double, 5>;

struct UserProfile {
  std::string user_id;
  std::optional<Group> planted_group;
  ScoreDistribution cognition{};
  ScoreDistribution emotion{};

  const ScoreDistribution& for_orientation(Orientation o) const {
    return o == Orientation::Cognition ? cognition : emotion;
  }
};

struct Corpus {
  std::vector<TrainingExample> examples;
  std::map<std::string, UserProfile> users;
  Vocabulary vocabulary = Vocabulary::builtin();

  std::vector<const TrainingExample*> in_split(Split s) const;
  std::vector<std::string> conversation_ids() const;  // first-appearance order
};

struct GeneratorConfig {
  int conversations = 1300;
  int exchanges_per_conversation = 5;
  double majority_fraction = 0.814;
  // Probability that a seeker's intent phrase comes from the pool typical of
  // the seeker's group (practical for majority, emotional for minority).
  double intent_signal = 0.75;
  // P(score >= 4) per (group, strategy orientation).
  double p_high_majority_cognition = 0.91;
  double p_high_majority_emotion = 0.94;
  double p_high_minority_cognition = 0.33;
  double p_high_minority_emotion = 0.44;

  double p_high(Group g, Orientation o) const;
  void validate() const;  // throws SchemaError
};

GeneratorConfig generator_config_from_json(std::string_view json_text);
std::string generator_config_to_json(const GeneratorConfig& config);

ScoreDistribution score_distribution(const GeneratorConfig& config, Group g, Orientation o);

// One conversation per user; every example starts in the Train split.
Corpus generate_corpus(const GeneratorConfig& config, std::uint64_t seed);

Satisfaction binarize_score(int score);
Group label_group(std::span<const TrainingExample> user_examples);
Group label_group(std::span<const TrainingExample* const> user_examples);

// Per-user provisional group from the examples in `split`.
std::map<std::string, Group> provisional_groups(const Corpus& corpus, Split split);

// Conversations shuffled by seed and partitioned 8:1:1 (floor for train and
// valid, remainder to test).
Corpus split_corpus(Corpus corpus, std::uint64_t seed);

// Orientation of the seeker's intent phrase in an exchange, when it comes
// from one of the template pools.
std::optional<Orientation> intent_orientation(std::string_view exchange);

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
std::string corpus_to_jsonl(const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& path);
Corpus corpus_from_jsonl(std::string_view text);

}  // namespace satpref
