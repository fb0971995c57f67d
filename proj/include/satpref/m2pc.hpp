#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "satpref/corpus.hpp"
#include "satpref/lm.hpp"
#include "satpref/sft.hpp"

namespace satpref {

struct M2pcConfig {
  int clusters_per_group = 20;
  int em_iterations = 10;
  double m_step_lr = 1e-5;
  int m_step_batch = 2;
  int grad_accum = 4;

  void validate() const;
};
M2pcConfig m2pc_config_from_json(std::string_view text);
std::string m2pc_config_to_json(const M2pcConfig& c);

struct UserCluster {
  std::vector<std::string> users;  // sorted
  Group initial_tag = Group::Majority;
};

// Majority plays the "Major" model, Minority the "Minor" model.
struct ClusterState {
  int iteration = 0;
  std::vector<UserCluster> clusters;
  std::vector<Group> assignments;                 // one per cluster
  std::vector<std::array<double, 2>> perplexity;  // {Major, Minor} per cluster; empty at t=0

  std::size_t users_in(Group g) const;
  std::map<std::string, Group> user_assignments() const;
};

// Per-user SFT items, the unit both EM steps work on.
using UserItems = std::map<std::string, std::vector<const SftItem*>>;
UserItems group_items_by_user(std::span<const SftItem> items, const Corpus& corpus);

// Tokens scored when measuring how well a model explains a user: the
// exchange and the target, conditioned on context and prompt.
ScoredSequence user_scoring_sequence(const SftItem& item);
double user_perplexity(const ModelState& model, std::span<const SftItem* const> items);

// Majority users are subsampled to the minority count; each group is then
// dealt into min(clusters_per_group, n) clusters whose sizes differ by <= 1.
ClusterState init_clusters(const std::map<std::string, Group>& provisional, const M2pcConfig& config,
                           std::uint64_t seed);

// Assigns each cluster to the model with the lower mean per-user
// perplexity; ties keep the incumbent.
ClusterState e_step(const ModelState& major, const ModelState& minor, const ClusterState& state,
                    const UserItems& users);

struct MStepReport {
  std::set<std::string> keys_used;  // every item key the model was trained on
  std::size_t steps = 0;
  double mean_loss = 0.0;  // mean per-token NLL over the pass
  bool skipped = false;    // no users assigned
};

// One pass of NLL fine-tuning over the items of the users assigned to `group`,
// on the same tokens the E-step scores.
ModelState m_step(ModelState model, Group group, const ClusterState& state, const UserItems& users,
                  const M2pcConfig& config, std::uint64_t seed, MStepReport* report = nullptr);

// Per-input routing on the exchange tokens only; ties go to Major.
Group route(const SftItem& item, const ModelState& major, const ModelState& minor);
Group route(std::span<const TokenId> input, std::size_t exchange_begin, std::size_t exchange_end,
            const ModelState& major, const ModelState& minor);

struct PlantedAgreement {
  double cluster_level = 0.0;  // clusters whose assignment equals their members' majority planted group
  double user_level = 0.0;     // users whose cluster assignment equals their planted group
};
PlantedAgreement planted_agreement(const ClusterState& state, const std::map<std::string, Group>& planted);

struct M2pcIteration {
  ClusterState state;
  MStepReport major_report;
  MStepReport minor_report;
  std::optional<double> valid_f1;  // weighted F1 of routed predictions
};

struct M2pcResult {
  ModelState major;
  ModelState minor;
  std::vector<M2pcIteration> history;  // em_iterations + 1 entries, t = 0 first
  int best_iteration = 0;
  ModelState best_major;
  ModelState best_minor;
  std::vector<std::string> warnings;
};

// Scores a pair of group models on validation data (higher is better).
using PairScorer = std::function<double(const ModelState& major, const ModelState& minor)>;
using IterationCallback = std::function<void(const M2pcIteration&)>;

// Each iteration runs the M-step on the current assignments, then the
// E-step. The best iteration (t >= 1) maximizes the scorer; without a
// scorer the last iteration is taken.
M2pcResult run_m2pc(const ModelState& base, const UserItems& users, const std::map<std::string, Group>& provisional,
                    const M2pcConfig& config, std::uint64_t seed, const PairScorer& scorer = {},
                    const IterationCallback& on_iteration = {});

std::string cluster_history_to_json(std::span<const M2pcIteration> history);

}  // namespace satpref
