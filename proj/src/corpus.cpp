#include "satpref/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "json.hpp"
#include "satpref/digest.hpp"
#include "satpref/rng.hpp"

namespace satpref {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kStrategyCount> kStrategyNames = {
    "Question",
    "Restatement or Paraphrasing",
    "Providing Suggestions",
    "Information",
    "Reflection of Feelings",
    "Self-disclosure",
    "Affirmation and Reassurance",
};

std::string normalize_label(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c))) out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

}  // namespace

Orientation orientation_of(Strategy s) {
  switch (s) {
    case Strategy::Question:
    case Strategy::RestatementOrParaphrasing:
    case Strategy::ProvidingSuggestions:
    case Strategy::Information:
      return Orientation::Cognition;
    default:
      return Orientation::Emotion;
  }
}

std::string_view to_string(Strategy s) { return kStrategyNames[static_cast<std::size_t>(s)]; }
std::string_view to_string(Orientation o) { return o == Orientation::Cognition ? "Cognition" : "Emotion"; }
std::string_view to_string(Group g) { return g == Group::Majority ? "Majority" : "Minority"; }
std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    default: return "test";
  }
}

std::optional<Strategy> parse_strategy(std::string_view name) {
  const std::string key = normalize_label(name);
  for (std::size_t i = 0; i < kStrategyCount; ++i) {
    if (normalize_label(kStrategyNames[i]) == key) return static_cast<Strategy>(i);
  }
  return std::nullopt;
}

std::optional<Group> parse_group(std::string_view name) {
  const std::string key = normalize_label(name);
  if (key == "majority" || key == "major") return Group::Majority;
  if (key == "minority" || key == "minor") return Group::Minority;
  return std::nullopt;
}

std::optional<Split> parse_split(std::string_view name) {
  const std::string key = normalize_label(name);
  if (key == "train") return Split::Train;
  if (key == "valid" || key == "validation") return Split::Valid;
  if (key == "test") return Split::Test;
  return std::nullopt;
}

std::array<Strategy, kStrategyCount> all_strategies() {
  std::array<Strategy, kStrategyCount> out{};
  for (std::size_t i = 0; i < kStrategyCount; ++i) out[i] = static_cast<Strategy>(i);
  return out;
}

std::vector<const TrainingExample*> Corpus::in_split(Split s) const {
  std::vector<const TrainingExample*> out;
  for (const auto& e : examples) {
    if (e.split == s) out.push_back(&e);
  }
  return out;
}

std::vector<std::string> Corpus::conversation_ids() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& e : examples) {
    if (seen.insert(e.conversation_id).second) out.push_back(e.conversation_id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generator config

double GeneratorConfig::p_high(Group g, Orientation o) const {
  if (g == Group::Majority) {
    return o == Orientation::Cognition ? p_high_majority_cognition : p_high_majority_emotion;
  }
  return o == Orientation::Cognition ? p_high_minority_cognition : p_high_minority_emotion;
}

void GeneratorConfig::validate() const {
  if (conversations < 0) throw SchemaError("conversations", 0, "conversations must be non-negative");
  if (exchanges_per_conversation <= 0) {
    throw SchemaError("exchanges_per_conversation", 0, "exchanges_per_conversation must be positive");
  }
  auto prob = [](const char* name, double p) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw SchemaError(name, 0, std::string(name) + " must lie in [0,1], got " + std::to_string(p));
    }
  };
  prob("majority_fraction", majority_fraction);
  prob("intent_signal", intent_signal);
  prob("p_high_majority_cognition", p_high_majority_cognition);
  prob("p_high_majority_emotion", p_high_majority_emotion);
  prob("p_high_minority_cognition", p_high_minority_cognition);
  prob("p_high_minority_emotion", p_high_minority_emotion);
}

GeneratorConfig generator_config_from_json(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw SchemaError("", 0, std::string("generator config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("", 0, "generator config must be a JSON object");
  GeneratorConfig c;
  for (auto& [key, value] : j.items()) {
    auto number = [&]() {
      if (!value.is_number()) throw SchemaError(key, 0, "generator config field '" + key + "' must be a number");
      return value.get<double>();
    };
    auto integer = [&]() {
      if (!value.is_number_integer()) {
        throw SchemaError(key, 0, "generator config field '" + key + "' must be an integer");
      }
      return value.get<int>();
    };
    if (key == "conversations") c.conversations = integer();
    else if (key == "exchanges_per_conversation") c.exchanges_per_conversation = integer();
    else if (key == "majority_fraction") c.majority_fraction = number();
    else if (key == "intent_signal") c.intent_signal = number();
    else if (key == "p_high_majority_cognition") c.p_high_majority_cognition = number();
    else if (key == "p_high_majority_emotion") c.p_high_majority_emotion = number();
    else if (key == "p_high_minority_cognition") c.p_high_minority_cognition = number();
    else if (key == "p_high_minority_emotion") c.p_high_minority_emotion = number();
    else throw SchemaError(key, 0, "unknown generator config key '" + key + "'");
  }
  c.validate();
  return c;
}

std::string generator_config_to_json(const GeneratorConfig& c) {
  json j = {
      {"conversations", c.conversations},
      {"exchanges_per_conversation", c.exchanges_per_conversation},
      {"majority_fraction", c.majority_fraction},
      {"intent_signal", c.intent_signal},
      {"p_high_majority_cognition", c.p_high_majority_cognition},
      {"p_high_majority_emotion", c.p_high_majority_emotion},
      {"p_high_minority_cognition", c.p_high_minority_cognition},
      {"p_high_minority_emotion", c.p_high_minority_emotion},
  };
  return j.dump(2);
}

ScoreDistribution score_distribution(const GeneratorConfig& config, Group g, Orientation o) {
  const double high = config.p_high(g, o);
  const double low = 1.0 - high;
  // Majority/emotion keeps the published 0.63 : 0.31 split of the high mass;
  // every other cell splits high mass 2:1 between scores 4 and 5.
  double share4 = 2.0 / 3.0;
  if (g == Group::Majority && o == Orientation::Emotion) share4 = 0.63 / 0.94;
  return {low / 3.0, low / 3.0, low / 3.0, high * share4, high * (1.0 - share4)};
}

// ---------------------------------------------------------------------------
// Generation

namespace {

std::string render_exchange(Rng& rng, Group group, Strategy strategy, double intent_signal) {
  const bool typical = rng.bernoulli(intent_signal);
  const bool emotional = (group == Group::Minority) == typical;
  auto pool = emotional ? lexicon::emotional_intents() : lexicon::practical_intents();
  const auto intent = pool[rng.below(pool.size())];
  const auto topic = lexicon::topics()[rng.below(lexicon::topics().size())];
  const auto phrases = lexicon::supporter_phrases(static_cast<std::size_t>(strategy));
  const auto reply = phrases[rng.below(phrases.size())];
  std::string out;
  out.reserve(96);
  out += lexicon::kSeeker;
  out += ' ';
  out += intent;
  out += ' ';
  out += topic;
  out += ' ';
  out += lexicon::kSupporter;
  out += ' ';
  out += reply;
  return out;
}

std::string numbered(char prefix, int i, int width) {
  std::string digits = std::to_string(i);
  if (static_cast<int>(digits.size()) < width) digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  return prefix + digits;
}

}  // namespace

Corpus generate_corpus(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();
  Corpus corpus;
  Rng rng(seed);
  const int width = std::max(4, static_cast<int>(std::to_string(config.conversations).size()));
  corpus.examples.reserve(static_cast<std::size_t>(config.conversations) *
                          static_cast<std::size_t>(config.exchanges_per_conversation));
  for (int c = 0; c < config.conversations; ++c) {
    const Group group = rng.bernoulli(config.majority_fraction) ? Group::Majority : Group::Minority;
    UserProfile profile;
    profile.user_id = numbered('u', c, width);
    profile.planted_group = group;
    profile.cognition = score_distribution(config, group, Orientation::Cognition);
    profile.emotion = score_distribution(config, group, Orientation::Emotion);

    const std::string conversation_id = numbered('c', c, width);
    std::string context;
    for (int t = 0; t < config.exchanges_per_conversation; ++t) {
      TrainingExample e;
      e.conversation_id = conversation_id;
      e.user_id = profile.user_id;
      e.turn_index = t;
      e.strategy = static_cast<Strategy>(rng.below(kStrategyCount));
      e.exchange = render_exchange(rng, group, e.strategy, config.intent_signal);
      const auto& dist = profile.for_orientation(orientation_of(e.strategy));
      e.score = static_cast<int>(rng.categorical(dist)) + 1;
      e.context = context;
      e.planted_group = group;
      if (!context.empty()) context.push_back(' ');
      context += e.exchange;
      corpus.examples.push_back(std::move(e));
    }
    corpus.users.emplace(profile.user_id, std::move(profile));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Labels and splits

Satisfaction binarize_score(int score) {
  if (score < 1 || score > 5) throw std::out_of_range("score " + std::to_string(score) + " outside [1,5]");
  return score <= 3 ? Satisfaction::Low : Satisfaction::High;
}

namespace {

template <class Get>
Group label_group_impl(std::size_t n, Get get) {
  if (n == 0) throw std::invalid_argument("label_group: empty example list");
  const std::string& user = get(0).user_id;
  std::size_t high = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const TrainingExample& e = get(i);
    if (e.user_id != user) throw std::invalid_argument("label_group: examples span several users");
    if (binarize_score(e.score) == Satisfaction::High) ++high;
  }
  // Strictly more than 60% high scores; integer form avoids 0.6 rounding.
  return 10 * high > 6 * n ? Group::Majority : Group::Minority;
}

}  // namespace

Group label_group(std::span<const TrainingExample> user_examples) {
  return label_group_impl(user_examples.size(), [&](std::size_t i) -> const TrainingExample& {
    return user_examples[i];
  });
}

Group label_group(std::span<const TrainingExample* const> user_examples) {
  return label_group_impl(user_examples.size(), [&](std::size_t i) -> const TrainingExample& {
    return *user_examples[i];
  });
}

std::map<std::string, Group> provisional_groups(const Corpus& corpus, Split split) {
  std::map<std::string, std::vector<const TrainingExample*>> by_user;
  for (const auto& e : corpus.examples) {
    if (e.split == split) by_user[e.user_id].push_back(&e);
  }
  std::map<std::string, Group> out;
  for (auto& [user, list] : by_user) out.emplace(user, label_group(std::span<const TrainingExample* const>(list)));
  return out;
}

Corpus split_corpus(Corpus corpus, std::uint64_t seed) {
  std::vector<std::string> ids = corpus.conversation_ids();
  if (ids.size() < 10) {
    throw std::invalid_argument("split_corpus needs at least 10 conversations, got " + std::to_string(ids.size()));
  }
  Rng rng(seed);
  rng.shuffle(ids);
  const std::size_t n_train = ids.size() * 8 / 10;
  const std::size_t n_valid = ids.size() / 10;
  std::map<std::string, Split> assignment;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    assignment[ids[i]] = i < n_train ? Split::Train : (i < n_train + n_valid ? Split::Valid : Split::Test);
  }
  for (auto& e : corpus.examples) e.split = assignment.at(e.conversation_id);
  return corpus;
}

std::optional<Orientation> intent_orientation(std::string_view exchange) {
  std::string_view rest = exchange;
  const std::string prefix = std::string(lexicon::kSeeker) + " ";
  if (rest.substr(0, prefix.size()) != prefix) return std::nullopt;
  rest.remove_prefix(prefix.size());
  auto starts = [&](std::string_view phrase) {
    return rest.size() > phrase.size() && rest.substr(0, phrase.size()) == phrase && rest[phrase.size()] == ' ';
  };
  for (auto p : lexicon::practical_intents()) {
    if (starts(p)) return Orientation::Cognition;
  }
  for (auto p : lexicon::emotional_intents()) {
    if (starts(p)) return Orientation::Emotion;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// JSONL persistence

std::string corpus_to_jsonl(const Corpus& corpus) {
  std::string out;
  for (const auto& e : corpus.examples) {
    json j = {
        {"conversation_id", e.conversation_id},
        {"user_id", e.user_id},
        {"turn_index", e.turn_index},
        {"context", e.context},
        {"exchange", e.exchange},
        {"strategy", std::string(to_string(e.strategy))},
        {"score", e.score},
        {"split", std::string(to_string(e.split))},
    };
    if (e.planted_group) j["planted_group"] = std::string(to_string(*e.planted_group));
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) { write_file(path, corpus_to_jsonl(corpus)); }

namespace {

TrainingExample parse_record(const std::string& line, std::size_t line_no) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw SchemaError("", line_no, "line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
  }
  if (!j.is_object()) throw SchemaError("", line_no, "line " + std::to_string(line_no) + ": record is not an object");
  static const std::set<std::string> kKnown = {"conversation_id", "user_id", "turn_index", "context", "exchange",
                                               "strategy",        "score",   "split",      "planted_group"};
  auto fail = [&](const std::string& field, const std::string& msg) -> SchemaError {
    return SchemaError(field, line_no, "line " + std::to_string(line_no) + ": field '" + field + "': " + msg);
  };
  for (auto& [key, value] : j.items()) {
    if (!kKnown.count(key)) throw fail(key, "unknown key");
  }
  auto str = [&](const char* field) {
    if (!j.contains(field)) throw fail(field, "missing");
    if (!j[field].is_string()) throw fail(field, "must be a string");
    return j[field].get<std::string>();
  };
  auto integer = [&](const char* field) {
    if (!j.contains(field)) throw fail(field, "missing");
    if (!j[field].is_number_integer()) throw fail(field, "must be an integer");
    return j[field].get<long long>();
  };
  TrainingExample e;
  e.conversation_id = str("conversation_id");
  e.user_id = str("user_id");
  const long long turn = integer("turn_index");
  if (turn < 0) throw fail("turn_index", "must be non-negative");
  e.turn_index = static_cast<int>(turn);
  e.context = str("context");
  e.exchange = str("exchange");
  const std::string strategy = str("strategy");
  auto s = parse_strategy(strategy);
  if (!s) throw fail("strategy", "unknown strategy '" + strategy + "'");
  e.strategy = *s;
  const long long score = integer("score");
  if (score < 1 || score > 5) throw fail("score", "value " + std::to_string(score) + " outside [1,5]");
  e.score = static_cast<int>(score);
  const std::string split = str("split");
  auto sp = parse_split(split);
  if (!sp) throw fail("split", "unknown split '" + split + "'");
  e.split = *sp;
  if (j.contains("planted_group") && !j["planted_group"].is_null()) {
    const std::string g = str("planted_group");
    auto pg = parse_group(g);
    if (!pg) throw fail("planted_group", "unknown group '" + g + "'");
    e.planted_group = *pg;
  }
  return e;
}

ScoreDistribution smoothed(const std::array<int, 5>& counts) {
  double total = 5.0;
  for (int c : counts) total += c;
  ScoreDistribution d{};
  for (std::size_t i = 0; i < 5; ++i) d[i] = (counts[i] + 1.0) / total;
  return d;
}

}  // namespace

Corpus corpus_from_jsonl(std::string_view text) {
  Corpus corpus;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    corpus.examples.push_back(parse_record(line, line_no));
  }

  std::map<std::string, std::array<std::array<int, 5>, 2>> counts;
  std::map<std::string, std::string> split_of_conversation;
  for (const auto& e : corpus.examples) {
    auto [it, inserted] = corpus.users.try_emplace(e.user_id);
    UserProfile& p = it->second;
    if (inserted) {
      p.user_id = e.user_id;
      p.planted_group = e.planted_group;
    } else if (p.planted_group != e.planted_group) {
      throw SchemaError("planted_group", 0, "user " + e.user_id + " has inconsistent planted_group values");
    }
    auto [sit, fresh] = split_of_conversation.emplace(e.conversation_id, std::string(to_string(e.split)));
    if (!fresh && sit->second != to_string(e.split)) {
      throw SchemaError("split", 0, "conversation " + e.conversation_id + " spans several splits");
    }
    counts[e.user_id][orientation_of(e.strategy) == Orientation::Cognition ? 0 : 1]
          [static_cast<std::size_t>(e.score - 1)]++;
  }
  for (auto& [user, p] : corpus.users) {
    p.cognition = smoothed(counts[user][0]);
    p.emotion = smoothed(counts[user][1]);
  }

  std::vector<std::string> texts;
  texts.reserve(corpus.examples.size() * 2);
  for (const auto& e : corpus.examples) {
    texts.push_back(e.context);
    texts.push_back(e.exchange);
  }
  corpus.vocabulary = Vocabulary::extended(texts);
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path) { return corpus_from_jsonl(read_file(path)); }

}  // namespace satpref
