#include "satpref/coper.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "satpref/rng.hpp"

namespace satpref {

using nlohmann::json;

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Match expected_match(int gold_score) {
  if (gold_score < 1 || gold_score > 5) throw std::out_of_range("expected_match: score " + std::to_string(gold_score));
  if (gold_score >= 4) return Match::Matched;
  if (gold_score >= 2) return Match::PartiallyMatched;
  return Match::NotMatched;
}

bool logically_consistent(Match m, int gold_score) { return expected_match(gold_score) == m; }

CoperRecord synthesize_rule_based(const TrainingExample& ex, const UserProfile& profile, std::uint64_t seed,
                                  double strategy_corruption) {
  if (strategy_corruption < 0.0 || strategy_corruption > 1.0) {
    throw std::invalid_argument("strategy corruption rate must be in [0, 1]");
  }
  CoperRecord r;
  r.score = ex.score;
  r.match = expected_match(ex.score);
  r.strategy = ex.strategy;
  if (strategy_corruption > 0.0) {
    Rng rng(derive_seed(seed, fnv1a(ex.key())));
    if (rng.bernoulli(strategy_corruption)) {
      const auto shift = 1 + rng.below(kStrategyCount - 1);
      r.strategy = static_cast<Strategy>((static_cast<std::size_t>(ex.strategy) + shift) % kStrategyCount);
    }
  }
  bool emotional_intent;
  if (auto o = intent_orientation(ex.exchange)) {
    emotional_intent = *o == Orientation::Emotion;
  } else if (profile.planted_group) {
    emotional_intent = *profile.planted_group == Group::Minority;
  } else {
    emotional_intent = orientation_of(ex.strategy) == Orientation::Emotion;
  }
  r.intent = std::string(lexicon::intent_rationale(emotional_intent));
  r.reason = std::string(lexicon::reason_rationale(orientation_of(ex.strategy) == Orientation::Emotion,
                                                   static_cast<int>(r.match)));
  return r;
}

RationaleMap synthesize_corpus(const Corpus& corpus, std::uint64_t seed, double strategy_corruption) {
  RationaleMap out;
  for (const auto& ex : corpus.examples) {
    out.emplace(ex.key(), synthesize_rule_based(ex, corpus.users.at(ex.user_id), seed, strategy_corruption));
  }
  return out;
}

double strategy_accuracy(std::span<const CoperRecord> records, std::span<const Strategy> gold) {
  if (records.size() != gold.size()) throw std::invalid_argument("strategy_accuracy: length mismatch");
  if (records.empty()) throw std::invalid_argument("strategy_accuracy: empty input");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < records.size(); ++i) ok += records[i].strategy == gold[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(records.size());
}

double logical_accuracy(std::span<const CoperRecord> records, std::span<const int> gold_scores) {
  if (records.size() != gold_scores.size()) throw std::invalid_argument("logical_accuracy: length mismatch");
  if (records.empty()) throw std::invalid_argument("logical_accuracy: empty input");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < records.size(); ++i) ok += logically_consistent(records[i].match, gold_scores[i]) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(records.size());
}

RationaleEval evaluate_rationales(std::span<const CoperRecord> records, std::span<const Strategy> gold_strategies,
                                  std::span<const int> gold_scores) {
  return {strategy_accuracy(records, gold_strategies), logical_accuracy(records, gold_scores), records.size()};
}

// ---------------------------------------------------------------------------
// Cache

namespace {

json record_to_json(const CoperRecord& r) {
  return {{"intent", r.intent},
          {"strategy", std::string(to_string(r.strategy))},
          {"match", std::string(to_string(r.match))},
          {"reason", r.reason},
          {"score", r.score}};
}

CoperRecord record_from_json(const json& j) {
  CoperRecord r;
  r.intent = j.at("intent").get<std::string>();
  auto s = parse_strategy(j.at("strategy").get<std::string>());
  if (!s) throw std::invalid_argument("unknown strategy in rationale record");
  r.strategy = *s;
  auto m = parse_match(j.at("match").get<std::string>());
  if (!m) throw std::invalid_argument("unknown match label in rationale record");
  r.match = *m;
  r.reason = j.at("reason").get<std::string>();
  r.score = j.at("score").get<int>();
  if (!r.valid()) throw std::invalid_argument("invalid rationale record");
  return r;
}

}  // namespace

std::string rationales_to_jsonl(const RationaleMap& rationales) {
  std::string out;
  for (const auto& [key, r] : rationales) {
    out += json{{"key", key}, {"record", record_to_json(r)}}.dump();
    out += '\n';
  }
  return out;
}

RationaleMap rationales_from_jsonl(std::string_view text) {
  RationaleMap out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      json j = json::parse(line);
      out[j.at("key").get<std::string>()] = record_from_json(j.at("record"));
    } catch (const std::exception& e) {
      throw std::invalid_argument("rationale cache line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// External client

void ExternalClientConfig::validate() const {
  if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0) {
    throw std::invalid_argument("external client base_url must start with http:// or https://");
  }
  if (max_retries < 0) throw std::invalid_argument("external client max_retries must be >= 0");
  if (max_concurrency < 1) throw std::invalid_argument("external client max_concurrency must be >= 1");
  if (!(timeout_seconds > 0.0)) throw std::invalid_argument("external client timeout must be positive");
  if (api_key_env_var.empty()) throw std::invalid_argument("external client api_key_env_var is empty");
}

std::string default_synthesis_template() {
  std::ostringstream ss;
  ss << "You explain why a help seeker gave a satisfaction score to a supporter's reply.\n"
     << "Answer with exactly one fenced block of key: value lines:\n"
     << "```\n"
     << "intent: <the seeker's underlying need, a few words>\n"
     << "strategy: <one of:";
  bool first = true;
  for (auto s : all_strategies()) {
    ss << (first ? " " : ", ") << to_string(s);
    first = false;
  }
  ss << ">\n"
     << "match: <matched | partially matched | not matched>\n"
     << "reason: <why the reply did or did not meet the need>\n"
     << "score: <the given score, 1-5>\n"
     << "```\n";
  return ss.str();
}

std::string render_synthesis_request(const TrainingExample& ex) {
  std::ostringstream ss;
  if (!ex.context.empty()) ss << "Earlier turns: " << ex.context << "\n";
  ss << "Exchange: " << ex.exchange << "\n"
     << "Given score: " << ex.score << "\n";
  return ss.str();
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::optional<Match> parse_match_label(std::string s) {
  s = lower(std::move(s));
  std::string norm;
  for (char c : s) {
    if (std::isalpha(static_cast<unsigned char>(c))) norm += c;
  }
  if (norm == "matched") return Match::Matched;
  if (norm == "partiallymatched") return Match::PartiallyMatched;
  if (norm == "notmatched" || norm == "didnotmatch") return Match::NotMatched;
  return std::nullopt;
}

}  // namespace

CoperRecord parse_synthesis_reply(const std::string& reply) {
  std::string_view body = reply;
  if (auto open = body.find("```"); open != std::string_view::npos) {
    auto line_end = body.find('\n', open);
    if (line_end == std::string_view::npos) throw ReplyParseError("unterminated fenced block", reply);
    auto close = body.find("```", line_end + 1);
    if (close == std::string_view::npos) throw ReplyParseError("unterminated fenced block", reply);
    body = body.substr(line_end + 1, close - line_end - 1);
  }
  std::map<std::string, std::string> fields;
  std::size_t pos = 0;
  while (pos <= body.size()) {
    auto nl = body.find('\n', pos);
    if (nl == std::string_view::npos) nl = body.size();
    std::string_view line = body.substr(pos, nl - pos);
    pos = nl + 1;
    auto colon = line.find(':');
    if (colon == std::string_view::npos) continue;
    fields[lower(trim(line.substr(0, colon)))] = trim(line.substr(colon + 1));
  }
  for (const char* k : {"intent", "strategy", "match", "reason", "score"}) {
    if (fields[k].empty()) throw ReplyParseError(std::string("reply lacks field '") + k + "'", reply);
  }
  CoperRecord r;
  r.intent = fields["intent"];
  r.reason = fields["reason"];
  auto strategy = parse_strategy(fields["strategy"]);
  if (!strategy) strategy = strategy_from_token(fields["strategy"]);
  if (!strategy) throw ReplyParseError("strategy '" + fields["strategy"] + "' is not one of the 7 labels", reply);
  r.strategy = *strategy;
  auto match = parse_match_label(fields["match"]);
  if (!match) throw ReplyParseError("match '" + fields["match"] + "' is not a known label", reply);
  r.match = *match;
  const std::string& score = fields["score"];
  if (score.size() != 1 || score[0] < '1' || score[0] > '5') {
    throw ReplyParseError("score '" + score + "' is not an integer in 1-5", reply);
  }
  r.score = score[0] - '0';
  return r;
}

namespace {

struct Endpoint {
  std::string scheme_host_port;
  std::string path;
};

Endpoint split_url(const std::string& base) {
  const auto scheme_end = base.find("://");
  const auto path_start = base.find('/', scheme_end + 3);
  Endpoint e;
  e.scheme_host_port = base.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : base.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  e.path = prefix + "/v1/chat/completions";
  return e;
}

bool retryable(int status) { return status == 429 || status >= 500; }

}  // namespace

ExternalOutcome synthesize_external(const ExternalClientConfig& config, const TrainingExample& ex,
                                    const std::string& prompt_template, const LogSink& log) {
  config.validate();
  const char* key = std::getenv(config.api_key_env_var.c_str());
  if (key == nullptr || *key == '\0') {
    throw ExternalRequestError("environment variable " + config.api_key_env_var + " is not set", 0);
  }
  const Endpoint endpoint = split_url(config.base_url);
  httplib::Client client(endpoint.scheme_host_port);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(config.timeout_seconds));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  client.set_bearer_token_auth(key);

  const json body = {
      {"model", config.model_name},
      {"temperature", 0},
      {"messages",
       json::array({{{"role", "system"}, {"content", prompt_template}},
                    {{"role", "user"}, {"content", render_synthesis_request(ex)}}})},
  };
  const std::string payload = body.dump();
  std::string last_error;
  for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
    if (attempt > 0) {
      const auto delay = std::chrono::milliseconds(static_cast<long long>(config.initial_backoff_ms) << (attempt - 1));
      if (log) log(ex.key() + ": retry " + std::to_string(attempt) + " after " + last_error);
      std::this_thread::sleep_for(delay);
    }
    auto res = client.Post(endpoint.path, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (retryable(res->status)) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw ExternalRequestError("HTTP " + std::to_string(res->status) + " from chat completions endpoint",
                                 attempt + 1);
    }
    std::string content;
    try {
      content = json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const std::exception& e) {
      throw ReplyParseError(std::string("malformed completion response: ") + e.what(), res->body);
    }
    ExternalOutcome out{parse_synthesis_reply(content), attempt};
    if (out.record.score != ex.score) {
      throw ReplyParseError("reply score " + std::to_string(out.record.score) + " differs from the given score " +
                                std::to_string(ex.score),
                            content);
    }
    return out;
  }
  throw ExternalRequestError("giving up after " + std::to_string(config.max_retries + 1) + " attempts: " + last_error,
                             config.max_retries + 1);
}

std::vector<ExternalOutcome> synthesize_external_batch(const ExternalClientConfig& config,
                                                       std::span<const TrainingExample* const> examples,
                                                       const std::string& prompt_template, const LogSink& log) {
  config.validate();
  std::vector<ExternalOutcome> results(examples.size());
  std::vector<std::exception_ptr> errors(examples.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  LogSink locked_log;
  if (log) {
    locked_log = [&](const std::string& msg) {
      std::lock_guard lock(log_mutex);
      log(msg);
    };
  }
  auto worker = [&] {
    for (std::size_t i = next++; i < examples.size(); i = next++) {
      try {
        results[i] = synthesize_external(config, *examples[i], prompt_template, locked_log);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(config.max_concurrency), examples.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

}  // namespace satpref
