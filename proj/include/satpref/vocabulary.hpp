#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace satpref {

using TokenId = int;
using TokenSequence = std::vector<TokenId>;

// Closed word lists that every template in the project draws from.
namespace lexicon {

inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kUnk = "<unk>";

inline constexpr std::string_view kSeeker = "seeker:";
inline constexpr std::string_view kSupporter = "supporter:";

inline constexpr std::string_view kIntentField = "intent:";
inline constexpr std::string_view kStrategyField = "strategy:";
inline constexpr std::string_view kMatchField = "match:";
inline constexpr std::string_view kReasonField = "reason:";
inline constexpr std::string_view kScoreField = "score:";

// Seeker intents. The practical pool is typical of majority users in the
// synthetic corpus, the emotional pool of minority users.
std::span<const std::string_view> practical_intents();
std::span<const std::string_view> emotional_intents();
std::span<const std::string_view> topics();
// Three supporter utterances per strategy, indexed by Strategy order.
std::span<const std::string_view> supporter_phrases(std::size_t strategy_index);

// Prompt skeletons (token text).
std::string_view base_prompt();
std::string_view ucot_prompt();
std::span<const std::string_view> ucot_step_markers();

// CoPeR label tokens.
std::span<const std::string_view> strategy_tokens();
std::span<const std::string_view> match_tokens();
std::span<const std::string_view> score_tokens();

// Rationale sentence fragments.
std::string_view intent_rationale(bool emotional);
std::string_view reason_rationale(bool emotional_strategy, int match_index);

}  // namespace lexicon

std::vector<std::string> split_tokens(std::string_view text);

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  // Specials, markers and every template word, in a fixed order.
  static const Vocabulary& builtin();
  // builtin() followed by unseen tokens of `texts`, sorted.
  static Vocabulary extended(std::span<const std::string> texts);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id(std::string_view token) const;  // throws on unknown
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId pad() const { return pad_; }
  TokenId bos() const { return bos_; }
  TokenId eos() const { return eos_; }
  TokenId unk() const { return unk_; }

  // Unknown words map to <unk>.
  TokenSequence encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  // Hex digest of the ordered token list.
  std::string digest() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId pad_ = -1, bos_ = -1, eos_ = -1, unk_ = -1;
};

}  // namespace satpref
