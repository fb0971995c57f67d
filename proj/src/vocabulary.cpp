#include "satpref/vocabulary.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <set>
#include <sstream>
#include <stdexcept>

#include "satpref/digest.hpp"

namespace satpref {
namespace lexicon {
namespace {

constexpr std::array<std::string_view, 6> kPracticalIntents = {
    "i need advice",          "what should i do",        "help me plan my next step",
    "i want to fix this",     "how can i solve this",    "i need a clear answer",
};

constexpr std::array<std::string_view, 6> kEmotionalIntents = {
    "i feel so alone",        "nobody understands me",   "i am really hurting",
    "i just need comfort",    "i feel scared tonight",   "i am overwhelmed and sad",
};

constexpr std::array<std::string_view, 6> kTopics = {
    "about work", "about school", "about family", "about my partner", "about money", "about friends",
};

constexpr std::array<std::array<std::string_view, 3>, 7> kSupporterPhrases = {{
    // Question
    {"what happened then ?", "how long has this been going on ?", "who do you talk to ?"},
    // Restatement or Paraphrasing
    {"so you are saying it feels unfair", "it sounds like you mean that", "in other words you feel stuck"},
    // Providing Suggestions
    {"maybe you could try talking to them", "perhaps a short walk could help", "you might write down a plan"},
    // Information
    {"many people face this situation", "research shows routines help", "there are free services for this"},
    // Reflection of Feelings
    {"you seem really frustrated", "that sounds painful for you", "you must feel exhausted"},
    // Self-disclosure
    {"i once felt the same way", "i have been there too", "something similar happened to me"},
    // Affirmation and Reassurance
    {"you are doing your best", "it will get better", "you are stronger than you think"},
}};

constexpr std::array<std::string_view, 4> kUcotSteps = {"step1", "step2", "step3", "step4"};

constexpr std::array<std::string_view, 7> kStrategyTokens = {
    "strategy_question",   "strategy_restatement", "strategy_suggestion", "strategy_information",
    "strategy_reflection", "strategy_disclosure",  "strategy_affirmation",
};

constexpr std::array<std::string_view, 3> kMatchTokens = {"matched", "partially_matched", "not_matched"};

constexpr std::array<std::string_view, 5> kScoreTokens = {"score_1", "score_2", "score_3", "score_4", "score_5"};

constexpr std::array<std::array<std::string_view, 3>, 2> kReasons = {{
    {"cognitive reply meets the need", "cognitive reply partly meets the need", "cognitive reply misses the need"},
    {"emotional reply meets the need", "emotional reply partly meets the need", "emotional reply misses the need"},
}};

}  // namespace

std::span<const std::string_view> practical_intents() { return kPracticalIntents; }
std::span<const std::string_view> emotional_intents() { return kEmotionalIntents; }
std::span<const std::string_view> topics() { return kTopics; }

std::span<const std::string_view> supporter_phrases(std::size_t strategy_index) {
  return kSupporterPhrases.at(strategy_index);
}

std::string_view base_prompt() { return "[base] rate seeker satisfaction"; }
std::string_view ucot_prompt() {
  return "[ucot] step1 infer intent step2 identify strategy step3 judge match step4 predict score";
}
std::span<const std::string_view> ucot_step_markers() { return kUcotSteps; }

std::span<const std::string_view> strategy_tokens() { return kStrategyTokens; }
std::span<const std::string_view> match_tokens() { return kMatchTokens; }
std::span<const std::string_view> score_tokens() { return kScoreTokens; }

std::string_view intent_rationale(bool emotional) {
  return emotional ? "seeks emotional comfort" : "seeks practical guidance";
}

std::string_view reason_rationale(bool emotional_strategy, int match_index) {
  return kReasons.at(emotional_strategy ? 1 : 0).at(static_cast<std::size_t>(match_index));
}

}  // namespace lexicon

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw std::invalid_argument("duplicate vocabulary token '" + tokens_[i] + "'");
  }
  auto special = [&](std::string_view t) {
    auto f = find(t);
    if (!f) throw std::invalid_argument("vocabulary lacks special token " + std::string(t));
    return *f;
  };
  pad_ = special(lexicon::kPad);
  bos_ = special(lexicon::kBos);
  eos_ = special(lexicon::kEos);
  unk_ = special(lexicon::kUnk);
}

const Vocabulary& Vocabulary::builtin() {
  static const Vocabulary vocab = [] {
    std::vector<std::string> tokens;
    std::set<std::string> seen;
    auto add_text = [&](std::string_view text) {
      for (auto& t : split_tokens(text)) {
        if (seen.insert(t).second) tokens.push_back(t);
      }
    };
    for (auto s : {lexicon::kPad, lexicon::kBos, lexicon::kEos, lexicon::kUnk, lexicon::kSeeker,
                   lexicon::kSupporter, lexicon::kIntentField, lexicon::kStrategyField, lexicon::kMatchField,
                   lexicon::kReasonField, lexicon::kScoreField}) {
      add_text(s);
    }
    for (auto s : lexicon::score_tokens()) add_text(s);
    for (auto s : lexicon::match_tokens()) add_text(s);
    for (auto s : lexicon::strategy_tokens()) add_text(s);
    add_text(lexicon::base_prompt());
    add_text(lexicon::ucot_prompt());
    for (auto s : lexicon::practical_intents()) add_text(s);
    for (auto s : lexicon::emotional_intents()) add_text(s);
    for (auto s : lexicon::topics()) add_text(s);
    for (std::size_t k = 0; k < 7; ++k) {
      for (auto s : lexicon::supporter_phrases(k)) add_text(s);
    }
    for (bool e : {false, true}) {
      add_text(lexicon::intent_rationale(e));
      for (int m = 0; m < 3; ++m) add_text(lexicon::reason_rationale(e, m));
    }
    return Vocabulary(std::move(tokens));
  }();
  return vocab;
}

Vocabulary Vocabulary::extended(std::span<const std::string> texts) {
  const Vocabulary& base = builtin();
  std::set<std::string> extra;
  for (const auto& text : texts) {
    for (auto& t : split_tokens(text)) {
      if (!base.find(t)) extra.insert(t);
    }
  }
  if (extra.empty()) return base;
  std::vector<std::string> tokens = base.tokens();
  tokens.insert(tokens.end(), extra.begin(), extra.end());
  return Vocabulary(std::move(tokens));
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto f = find(token);
  if (!f) throw std::out_of_range("unknown token '" + std::string(token) + "'");
  return *f;
}

TokenSequence Vocabulary::encode(std::string_view text) const {
  TokenSequence out;
  for (auto& t : split_tokens(text)) out.push_back(find(t).value_or(unk_));
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

std::string Vocabulary::digest() const {
  std::string joined;
  for (const auto& t : tokens_) {
    joined += t;
    joined.push_back('\n');
  }
  return sha256_hex(joined);
}

}  // namespace satpref
