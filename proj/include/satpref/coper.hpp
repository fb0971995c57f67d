#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "satpref/corpus.hpp"
#include "satpref/sft.hpp"

namespace satpref {

// Match label implied by a gold score: 4-5 matched, 2-3 partially, 1 not.
Match expected_match(int gold_score);
bool logically_consistent(Match m, int gold_score);

// Deterministic rationale conditioned on the gold score. With a positive
// corruption rate the strategy is replaced by a different one at that rate.
CoperRecord synthesize_rule_based(const TrainingExample& ex, const UserProfile& profile, std::uint64_t seed,
                                  double strategy_corruption = 0.0);
RationaleMap synthesize_corpus(const Corpus& corpus, std::uint64_t seed, double strategy_corruption = 0.0);

struct RationaleEval {
  double strategy_accuracy = 0.0;
  double logical_accuracy = 0.0;
  std::size_t n = 0;
};

double strategy_accuracy(std::span<const CoperRecord> records, std::span<const Strategy> gold);
double logical_accuracy(std::span<const CoperRecord> records, std::span<const int> gold_scores);
RationaleEval evaluate_rationales(std::span<const CoperRecord> records, std::span<const Strategy> gold_strategies,
                                  std::span<const int> gold_scores);

// Rationale cache: one JSON object per line with "key" and "record".
std::string rationales_to_jsonl(const RationaleMap& rationales);
RationaleMap rationales_from_jsonl(std::string_view text);

// ---------------------------------------------------------------------------
// OpenAI-compatible chat-completions client.

struct ExternalClientConfig {
  std::string base_url;  // scheme://host[:port][/prefix]
  std::string model_name = "gpt-4.1-mini";
  std::string api_key_env_var = "COPER_API_KEY";
  double timeout_seconds = 30.0;
  int max_retries = 3;
  int max_concurrency = 4;
  int initial_backoff_ms = 200;

  void validate() const;
};

class ExternalRequestError : public std::runtime_error {
 public:
  ExternalRequestError(const std::string& what, int attempts) : std::runtime_error(what), attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

class ReplyParseError : public std::runtime_error {
 public:
  ReplyParseError(const std::string& what, std::string raw) : std::runtime_error(what), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

struct ExternalOutcome {
  CoperRecord record;
  int retries = 0;
};

// System prompt asking for a fenced key:value block with the four rationale
// fields and the score.
std::string default_synthesis_template();
std::string render_synthesis_request(const TrainingExample& ex);

// Parses the first fenced block of a reply (or the whole reply when there
// is no fence). Throws ReplyParseError.
CoperRecord parse_synthesis_reply(const std::string& reply);

using LogSink = std::function<void(const std::string&)>;

ExternalOutcome synthesize_external(const ExternalClientConfig& client, const TrainingExample& ex,
                                    const std::string& prompt_template, const LogSink& log = {});

// Bounded concurrent synthesis; results in input order. A failed item
// rethrows its error after all in-flight requests finish.
std::vector<ExternalOutcome> synthesize_external_batch(const ExternalClientConfig& client,
                                                       std::span<const TrainingExample* const> examples,
                                                       const std::string& prompt_template, const LogSink& log = {});

}  // namespace satpref
