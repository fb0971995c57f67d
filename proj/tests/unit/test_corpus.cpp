#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "satpref/corpus.hpp"
#include "satpref/digest.hpp"
#include "satpref/rng.hpp"

using namespace satpref;

namespace {

TrainingExample with_score(const std::string& user, int score) {
  TrainingExample e;
  e.conversation_id = user;
  e.user_id = user;
  e.score = score;
  return e;
}

std::vector<TrainingExample> user_with(int high, int total) {
  std::vector<TrainingExample> out;
  for (int i = 0; i < total; ++i) out.push_back(with_score("u", i < high ? 4 + i % 2 : 1 + i % 3));
  return out;
}

struct Cell {
  double high = 0;
  double n = 0;
};

// Empirical high-score rate per (group, orientation) over the first `n`
// exchanges of each cell.
std::map<std::pair<Group, Orientation>, Cell> cell_rates(const Corpus& c, std::size_t n) {
  std::map<std::pair<Group, Orientation>, Cell> cells;
  for (const auto& e : c.examples) {
    auto& cell = cells[{*e.planted_group, orientation_of(e.strategy)}];
    if (cell.n >= static_cast<double>(n)) continue;
    cell.n += 1;
    if (e.score >= 4) cell.high += 1;
  }
  return cells;
}

}  // namespace

TEST_CASE("strategy orientation") {
  const std::set<Strategy> cognition{Strategy::Question, Strategy::RestatementOrParaphrasing,
                                     Strategy::ProvidingSuggestions, Strategy::Information};
  for (Strategy s : all_strategies()) {
    CHECK((orientation_of(s) == Orientation::Cognition) == (cognition.count(s) == 1));
    CHECK(parse_strategy(to_string(s)) == s);
  }
  CHECK(parse_strategy("reflection_of_feelings") == Strategy::ReflectionOfFeelings);
  CHECK_FALSE(parse_strategy("Hugging").has_value());
}

TEST_CASE("binarization threshold") {
  CHECK(binarize_score(3) == Satisfaction::Low);
  CHECK(binarize_score(4) == Satisfaction::High);
  CHECK(binarize_score(1) == Satisfaction::Low);
  for (int s = 1; s <= 5; ++s) CHECK((binarize_score(s) == Satisfaction::Low) == (s <= 3));
  CHECK_THROWS(binarize_score(0));
  CHECK_THROWS(binarize_score(6));
}

TEST_CASE("group labelling by the strict sixty percent rule") {
  CHECK(label_group(user_with(7, 10)) == Group::Majority);
  CHECK(label_group(user_with(6, 10)) == Group::Minority);
  CHECK(label_group(user_with(0, 5)) == Group::Minority);
  CHECK(label_group(user_with(4, 5)) == Group::Majority);
  CHECK_THROWS(label_group(std::span<const TrainingExample>{}));
  auto mixed = user_with(2, 3);
  mixed[1].user_id = "other";
  CHECK_THROWS(label_group(mixed));
}

TEST_CASE("group labelling ignores order") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int total = 1 + static_cast<int>(rng.below(12));
    auto ex = user_with(static_cast<int>(rng.below(static_cast<std::uint64_t>(total) + 1)), total);
    const Group g = label_group(ex);
    rng.shuffle(ex);
    CHECK(label_group(ex) == g);
    std::vector<const TrainingExample*> ptrs;
    for (const auto& e : ex) ptrs.push_back(&e);
    CHECK(label_group(std::span<const TrainingExample* const>(ptrs)) == g);
  }
}

TEST_CASE("score distributions are normalized and match the table") {
  const GeneratorConfig g;
  for (Group grp : {Group::Majority, Group::Minority}) {
    for (Orientation o : {Orientation::Cognition, Orientation::Emotion}) {
      const auto d = score_distribution(g, grp, o);
      double sum = 0;
      for (double p : d) sum += p;
      CHECK(std::abs(sum - 1.0) <= 1e-9);
      CHECK(d[3] + d[4] == doctest::Approx(g.p_high(grp, o)).epsilon(1e-12));
    }
  }
  CHECK(g.p_high(Group::Majority, Orientation::Cognition) == 0.91);
  CHECK(g.p_high(Group::Majority, Orientation::Emotion) == 0.94);
  CHECK(g.p_high(Group::Minority, Orientation::Cognition) == 0.33);
  CHECK(g.p_high(Group::Minority, Orientation::Emotion) == 0.44);
  const auto me = score_distribution(g, Group::Majority, Orientation::Emotion);
  CHECK(me[3] / me[4] == doctest::Approx(0.63 / 0.31).epsilon(1e-12));
}

TEST_CASE("generated corpus reproduces the planted cell rates") {
  GeneratorConfig g;
  g.conversations = 6000;
  const Corpus c = generate_corpus(g, 11);
  const auto cells = cell_rates(c, 2000);
  const Cell me = cells.at({Group::Majority, Orientation::Emotion});
  const Cell mc = cells.at({Group::Minority, Orientation::Cognition});
  REQUIRE(me.n == 2000);
  REQUIRE(mc.n == 2000);
  CHECK(std::abs(me.high / me.n - 0.94) <= 0.02);
  CHECK(std::abs(mc.high / mc.n - 0.33) <= 0.02);
}

TEST_CASE("cell rates converge within three over root n") {
  GeneratorConfig g;
  g.conversations = 24000;
  g.majority_fraction = 0.5;
  const Corpus c = generate_corpus(g, 12);
  for (std::size_t n : {500u, 2000u, 8000u}) {
    for (const auto& [key, cell] : cell_rates(c, n)) {
      REQUIRE(cell.n == static_cast<double>(n));
      CHECK(std::abs(cell.high / cell.n - g.p_high(key.first, key.second)) <= 3.0 / std::sqrt(cell.n));
    }
  }
}

TEST_CASE("generator structure") {
  GeneratorConfig g;
  g.conversations = 40;
  const Corpus c = generate_corpus(g, 13);
  CHECK(c.examples.size() == 200);
  CHECK(c.users.size() == 40);
  std::map<std::string, std::vector<const TrainingExample*>> by_conv;
  for (const auto& e : c.examples) {
    CHECK(c.users.count(e.user_id) == 1);
    CHECK(e.split == Split::Train);
    CHECK(e.planted_group == c.users.at(e.user_id).planted_group);
    by_conv[e.conversation_id].push_back(&e);
    for (const auto& tok : split_tokens(e.exchange)) CHECK(c.vocabulary.find(tok).has_value());
  }
  for (const auto& [id, ex] : by_conv) {
    std::string context;
    for (std::size_t i = 0; i < ex.size(); ++i) {
      CHECK(ex[i]->turn_index == static_cast<int>(i));
      CHECK(ex[i]->context == context);
      context += (context.empty() ? "" : " ") + ex[i]->exchange;
    }
  }
  for (const auto& [id, u] : c.users) {
    for (const auto* d : {&u.cognition, &u.emotion}) {
      double s = 0;
      for (double p : *d) s += p;
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("generator edge cases") {
  GeneratorConfig g;
  g.conversations = 0;
  CHECK(generate_corpus(g, 1).examples.empty());
  g.conversations = 30;
  CHECK(corpus_to_jsonl(generate_corpus(g, 9)) == corpus_to_jsonl(generate_corpus(g, 9)));
  CHECK(corpus_to_jsonl(generate_corpus(g, 9)) != corpus_to_jsonl(generate_corpus(g, 10)));
  GeneratorConfig bad;
  bad.conversations = -1;
  CHECK_THROWS_AS(bad.validate(), SchemaError);
  bad = GeneratorConfig{};
  bad.exchanges_per_conversation = 0;
  CHECK_THROWS_AS(generate_corpus(bad, 1), SchemaError);
  bad = GeneratorConfig{};
  bad.p_high_minority_emotion = 1.2;
  CHECK_THROWS_AS(bad.validate(), SchemaError);
  bad = GeneratorConfig{};
  bad.majority_fraction = -0.1;
  CHECK_THROWS_AS(bad.validate(), SchemaError);
}

TEST_CASE("generator config JSON") {
  GeneratorConfig g = generator_config_from_json(R"({"conversations": 12, "p_high_minority_emotion": 0.5})");
  CHECK(g.conversations == 12);
  CHECK(g.p_high_minority_emotion == 0.5);
  CHECK(g.p_high_majority_emotion == 0.94);
  const GeneratorConfig back = generator_config_from_json(generator_config_to_json(g));
  CHECK(generator_config_to_json(back) == generator_config_to_json(g));
  CHECK_THROWS_AS(generator_config_from_json(R"({"conversation": 12})"), SchemaError);
  CHECK_THROWS_AS(generator_config_from_json(R"({"conversations": 1.5})"), SchemaError);
}

TEST_CASE("conversation-level 8:1:1 split") {
  GeneratorConfig g;
  g.exchanges_per_conversation = 2;
  for (auto [n, tr, va, te] : std::vector<std::array<int, 4>>{{100, 80, 10, 10}, {10, 8, 1, 1}, {25, 20, 2, 3}}) {
    g.conversations = n;
    const Corpus c = split_corpus(generate_corpus(g, 14), 15);
    std::map<Split, std::set<std::string>> convs;
    for (const auto& e : c.examples) convs[e.split].insert(e.conversation_id);
    CHECK(convs[Split::Train].size() == static_cast<std::size_t>(tr));
    CHECK(convs[Split::Valid].size() == static_cast<std::size_t>(va));
    CHECK(convs[Split::Test].size() == static_cast<std::size_t>(te));
  }
  g.conversations = 50;
  const Corpus base = generate_corpus(g, 16);
  CHECK(corpus_to_jsonl(split_corpus(base, 3)) == corpus_to_jsonl(split_corpus(base, 3)));
  g.conversations = 9;
  CHECK_THROWS(split_corpus(generate_corpus(g, 1), 1));
}

TEST_CASE("splits never divide a conversation") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    GeneratorConfig g;
    g.conversations = 10 + static_cast<int>(rng.below(60));
    g.exchanges_per_conversation = 1 + static_cast<int>(rng.below(6));
    const Corpus c = split_corpus(generate_corpus(g, rng.below(1000)), rng.below(1000));
    std::map<std::string, Split> seen;
    for (const auto& e : c.examples) {
      auto [it, fresh] = seen.emplace(e.conversation_id, e.split);
      CHECK(it->second == e.split);
    }
  }
}

TEST_CASE("JSONL round trip") {
  GeneratorConfig g;
  g.conversations = 30;
  const Corpus c = split_corpus(generate_corpus(g, 18), 19);
  const auto path = std::filesystem::temp_directory_path() / "satpref_roundtrip.jsonl";
  save_corpus(c, path);
  const Corpus back = load_corpus(path);
  std::filesystem::remove(path);
  CHECK(back.examples == c.examples);
  CHECK(back.vocabulary == c.vocabulary);
  CHECK(back.users.size() == c.users.size());
  for (const auto& [id, u] : back.users) CHECK(u.planted_group == c.users.at(id).planted_group);
  CHECK(corpus_to_jsonl(back) == corpus_to_jsonl(c));
}

TEST_CASE("loader validation") {
  const std::string good =
      R"({"conversation_id": "c", "user_id": "u", "turn_index": 0, "context": "", "exchange": "seeker: hi", )"
      R"("strategy": "Question", "score": 4, "split": "train"})";
  CHECK(corpus_from_jsonl(good).examples.size() == 1);

  auto schema_field = [](const std::string& text) {
    try {
      corpus_from_jsonl(text);
    } catch (const SchemaError& e) {
      return std::make_pair(e.field(), e.line());
    }
    return std::make_pair(std::string("<none>"), std::size_t{0});
  };
  std::string six = good;
  six.replace(six.find("\"score\": 4"), 10, "\"score\": 6");
  CHECK(schema_field(good + "\n" + six).first == "score");
  CHECK(schema_field(good + "\n" + six).second == 2);
  std::string strat = good;
  strat.replace(strat.find("Question"), 8, "Hugging");
  CHECK(schema_field(strat).first == "strategy");
  std::string extra = good;
  extra.insert(extra.size() - 1, R"(, "mood": "ok")");
  CHECK(schema_field(extra).first == "mood");
  CHECK(schema_field(good + "\n{not json").second == 2);
  std::string missing = good;
  missing.replace(missing.find("\"user_id\": \"u\", "), 15, "");
  CHECK(schema_field(missing).first == "user_id");
}

TEST_CASE("ESConv-shaped fixture without planted groups") {
  const Corpus c = load_corpus(std::filesystem::path(SATPREF_FIXTURES) / "esconv_sample.jsonl");
  REQUIRE(c.examples.size() == 3);
  for (const auto& e : c.examples) CHECK_FALSE(e.planted_group.has_value());
  CHECK(c.users.size() == 2);
  CHECK_FALSE(c.users.at("esc-17").planted_group.has_value());
  CHECK(c.examples[1].strategy == Strategy::ReflectionOfFeelings);
  CHECK(c.examples[2].strategy == Strategy::SelfDisclosure);
  CHECK(c.examples[2].split == Split::Test);
  CHECK(c.vocabulary.find("job").has_value());
  CHECK(c.vocabulary.size() > Vocabulary::builtin().size());
  CHECK(c.in_split(Split::Test).size() == 1);
  CHECK(c.conversation_ids() == std::vector<std::string>{"esc-17", "esc-40"});
}
