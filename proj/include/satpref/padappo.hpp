#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "satpref/corpus.hpp"
#include "satpref/lm.hpp"
#include "satpref/sft.hpp"

namespace satpref {

// Exact: full-distribution KL at each state. Sample: log-ratio of the
// policy and reference probabilities of the action actually taken.
enum class KlEstimator { Exact, Sample };
std::string_view to_string(KlEstimator k);
std::optional<KlEstimator> parse_kl_estimator(std::string_view s);

struct PpoConfig {
  double gae_lambda = 1.0;
  double gamma = 0.95;
  double value_coeff = 0.1;
  double clip = 0.2;
  double kl_coeff = 0.2;
  double lr = 3e-7;
  int epochs = 5;
  int batch = 2;
  int grad_accum = 2;
  int inner_epochs = 1;          // optimization passes per rollout batch
  int max_train_examples = 0;    // 0 = every training item, else a seeded subset
  KlEstimator kl_estimator = KlEstimator::Exact;

  void validate() const;
};
PpoConfig ppo_config_from_json(std::string_view text);
std::string ppo_config_to_json(const PpoConfig& c);

// +1 when the predicted score equals the gold score, -1 otherwise (absent included).
double terminal_reward(std::optional<int> predicted, int gold);
// Full-distribution KL(policy || ref) between two log-probability rows.
double kl_per_token(std::span<const double> policy_logprobs, std::span<const double> ref_logprobs);
std::vector<double> total_rewards(std::span<const double> rewards, std::span<const double> kls, double kl_coeff);

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};
// Bootstrap value after the final action is 0.
Advantages gae(std::span<const double> total_rewards, std::span<const double> values, double gamma, double lambda);

double value_loss(std::span<const double> values_new, std::span<const double> values_old,
                  std::span<const double> returns, double clip);
double policy_loss(std::span<const double> ratios, std::span<const double> advantages, double clip);
// Derivatives of the two losses with respect to values_new and to the
// per-action log-probabilities (ratios = exp(logp_new - logp_old)).
std::vector<double> value_loss_grad(std::span<const double> values_new, std::span<const double> values_old,
                                    std::span<const double> returns, double clip);
std::vector<double> policy_loss_grad_logp(std::span<const double> ratios, std::span<const double> advantages,
                                          double clip);

// Either both group references (routed) or a single reference.
struct References {
  const ModelState* major = nullptr;
  const ModelState* minor = nullptr;
  const ModelState* single = nullptr;

  static References routed(const ModelState& major, const ModelState& minor) { return {&major, &minor, nullptr}; }
  static References one(const ModelState& ref) { return {nullptr, nullptr, &ref}; }
  bool is_routed() const { return single == nullptr; }
};

struct Trajectory {
  std::string key;
  TokenSequence state_prefix;  // input tokens
  TokenSequence actions;       // generated tokens up to and including the score token
  TokenSequence generated;     // everything the policy emitted
  std::vector<double> logp_policy, logp_old, logp_ref, kl, values, rewards, total_rewards, advantages, returns;
  Group route_tag = Group::Majority;
  int gold_score = 1;
  std::optional<int> predicted_score;

  bool consistent() const;
};

Trajectory rollout(const ModelState& policy, const References& refs, const SftItem& item, const Vocabulary& vocab,
                   Variant variant, const SamplingParams& sampling, const PpoConfig& config, std::uint64_t seed);

struct PpoLoss {
  double policy = 0.0;
  double value = 0.0;
  double total = 0.0;
  Gradients gradients;  // empty unless requested
};
// Clipped policy loss plus weighted value loss of one trajectory under the current policy,
// with logp_old / values / returns frozen from the rollout.
PpoLoss ppo_loss(const ModelState& policy, const Trajectory& traj, const PpoConfig& config, bool with_gradients);

struct PpoEpochMetrics {
  int epoch = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  std::size_t trajectories = 0;
  std::optional<double> valid_f1_low_minority;
  std::optional<double> valid_f1_weighted;
};

struct PpoResult {
  ModelState policy;
  std::vector<PpoEpochMetrics> history;
  std::vector<double> step_losses;
};

class PpoDiverged : public std::runtime_error {
 public:
  PpoDiverged(const std::string& what, ModelState last_good) : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const ModelState& last_good() const { return last_good_; }

 private:
  ModelState last_good_;
};

// Fills validation fields of the metrics for the current policy.
using PolicyValidator = std::function<void(const ModelState& policy, PpoEpochMetrics& metrics)>;

// Starts from `policy` (a value head is appended when absent).
PpoResult train_ppo(ModelState policy, const References& refs, std::span<const SftItem> train_items,
                    const Vocabulary& vocab, Variant variant, const PpoConfig& config, const SamplingParams& sampling,
                    std::uint64_t seed, const PolicyValidator& validator = {});

std::string ppo_metrics_csv(std::span<const PpoEpochMetrics> history);

}  // namespace satpref
