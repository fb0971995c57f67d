#include "satpref/m2pc.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace satpref {

using nlohmann::json;

void M2pcConfig::validate() const {
  if (clusters_per_group < 1) throw std::invalid_argument("m2pc.clusters_per_group must be >= 1");
  if (em_iterations < 0) throw std::invalid_argument("m2pc.em_iterations must be >= 0");
  if (!(m_step_lr >= 0.0)) throw std::invalid_argument("m2pc.m_step_lr must be non-negative");
  if (m_step_batch < 1) throw std::invalid_argument("m2pc.m_step_batch must be >= 1");
  if (grad_accum < 1) throw std::invalid_argument("m2pc.grad_accum must be >= 1");
}

M2pcConfig m2pc_config_from_json(std::string_view text) {
  auto j = json::parse(text);
  M2pcConfig c;
  for (auto& [k, v] : j.items()) {
    if (k == "clusters_per_group") c.clusters_per_group = v.get<int>();
    else if (k == "em_iterations") c.em_iterations = v.get<int>();
    else if (k == "m_step_lr") c.m_step_lr = v.get<double>();
    else if (k == "m_step_batch") c.m_step_batch = v.get<int>();
    else if (k == "grad_accum") c.grad_accum = v.get<int>();
    else throw std::invalid_argument("unknown m2pc config key '" + k + "'");
  }
  c.validate();
  return c;
}

std::string m2pc_config_to_json(const M2pcConfig& c) {
  return json{{"clusters_per_group", c.clusters_per_group},
              {"em_iterations", c.em_iterations},
              {"m_step_lr", c.m_step_lr},
              {"m_step_batch", c.m_step_batch},
              {"grad_accum", c.grad_accum}}
      .dump();
}

std::size_t ClusterState::users_in(Group g) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    if (assignments[c] == g) n += clusters[c].users.size();
  }
  return n;
}

std::map<std::string, Group> ClusterState::user_assignments() const {
  std::map<std::string, Group> out;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    for (const auto& u : clusters[c].users) out[u] = assignments[c];
  }
  return out;
}

UserItems group_items_by_user(std::span<const SftItem> items, const Corpus& corpus) {
  std::map<std::string, std::string> owner;
  for (const auto& ex : corpus.examples) owner[ex.key()] = ex.user_id;
  UserItems out;
  for (const auto& item : items) {
    auto it = owner.find(item.key);
    if (it == owner.end()) throw std::invalid_argument("group_items_by_user: item " + item.key + " not in corpus");
    out[it->second].push_back(&item);
  }
  return out;
}

ScoredSequence user_scoring_sequence(const SftItem& item) {
  ScoredSequence s{item.tokens, item.mask};
  for (std::size_t t = item.exchange_begin; t < item.exchange_end; ++t) s.mask[t] = true;
  return s;
}

double user_perplexity(const ModelState& model, std::span<const SftItem* const> items) {
  std::vector<ScoredSequence> seqs;
  seqs.reserve(items.size());
  for (const SftItem* item : items) seqs.push_back(user_scoring_sequence(*item));
  return perplexity(model, std::span<const ScoredSequence>(seqs));
}

ClusterState init_clusters(const std::map<std::string, Group>& provisional, const M2pcConfig& config,
                           std::uint64_t seed) {
  config.validate();
  std::vector<std::string> major, minor;
  for (const auto& [u, g] : provisional) (g == Group::Majority ? major : minor).push_back(u);
  if (major.empty() || minor.empty()) {
    throw std::invalid_argument("init_clusters: both provisional groups need at least one user (majority " +
                                std::to_string(major.size()) + ", minority " + std::to_string(minor.size()) + ")");
  }
  Rng rng(seed);
  const std::size_t m = std::min(major.size(), minor.size());
  rng.shuffle(major);
  rng.shuffle(minor);
  major.resize(m);
  minor.resize(m);
  ClusterState state;
  const std::size_t k = std::min(m, static_cast<std::size_t>(config.clusters_per_group));
  for (auto [users, tag] : {std::pair{&major, Group::Majority}, std::pair{&minor, Group::Minority}}) {
    std::vector<UserCluster> part(k);
    for (std::size_t i = 0; i < users->size(); ++i) part[i % k].users.push_back((*users)[i]);
    for (auto& c : part) {
      std::sort(c.users.begin(), c.users.end());
      c.initial_tag = tag;
      state.clusters.push_back(std::move(c));
      state.assignments.push_back(tag);
    }
  }
  return state;
}

ClusterState e_step(const ModelState& major, const ModelState& minor, const ClusterState& state,
                    const UserItems& users) {
  ClusterState next = state;
  next.iteration = state.iteration + 1;
  next.perplexity.assign(state.clusters.size(), {0.0, 0.0});
  for (std::size_t c = 0; c < state.clusters.size(); ++c) {
    double sum_major = 0.0, sum_minor = 0.0;
    std::size_t n = 0;
    for (const auto& u : state.clusters[c].users) {
      auto it = users.find(u);
      if (it == users.end() || it->second.empty()) continue;
      sum_major += user_perplexity(major, it->second);
      sum_minor += user_perplexity(minor, it->second);
      ++n;
    }
    if (n == 0) continue;  // nothing to judge by: keep the incumbent
    const double pm = sum_major / static_cast<double>(n);
    const double pn = sum_minor / static_cast<double>(n);
    next.perplexity[c] = {pm, pn};
    if (pm < pn) next.assignments[c] = Group::Majority;
    else if (pn < pm) next.assignments[c] = Group::Minority;
  }
  return next;
}

ModelState m_step(ModelState model, Group group, const ClusterState& state, const UserItems& users,
                  const M2pcConfig& config, std::uint64_t seed, MStepReport* report) {
  config.validate();
  std::vector<const SftItem*> items;
  for (std::size_t c = 0; c < state.clusters.size(); ++c) {
    if (state.assignments[c] != group) continue;
    for (const auto& u : state.clusters[c].users) {
      auto it = users.find(u);
      if (it != users.end()) items.insert(items.end(), it->second.begin(), it->second.end());
    }
  }
  MStepReport local;
  MStepReport& r = report ? *report : local;
  r = MStepReport{};
  if (items.empty()) {
    r.skipped = true;
    return model;
  }
  Rng rng(seed);
  rng.shuffle(items);
  AdamWState opt;
  AdamWConfig adam;
  adam.lr = config.m_step_lr;
  const auto micro = static_cast<std::size_t>(config.m_step_batch);
  Gradients acc;
  int pending = 0;
  double total_loss = 0.0;
  std::size_t total_tokens = 0;
  auto flush = [&] {
    scale_gradients(acc, 1.0 / pending);
    optimizer_step(model, acc, opt, adam);
    acc.clear();
    pending = 0;
    ++r.steps;
  };
  for (std::size_t b = 0; b < items.size(); b += micro) {
    const std::size_t e = std::min(items.size(), b + micro);
    Gradients g;
    double loss = 0.0;
    std::size_t tokens = 0;
    for (std::size_t i = b; i < e; ++i) {
      const ScoredSequence seq = user_scoring_sequence(*items[i]);
      NllResult res = nll_and_grads(model, seq.tokens, seq.mask);
      loss += res.loss;
      tokens += res.tokens;
      accumulate(g, res.gradients);
      r.keys_used.insert(items[i]->key);
    }
    total_loss += loss;
    total_tokens += tokens;
    accumulate(acc, g, 1.0 / static_cast<double>(tokens));
    if (++pending == config.grad_accum) flush();
  }
  if (pending > 0) flush();
  r.mean_loss = total_loss / static_cast<double>(total_tokens);
  return model;
}

Group route(std::span<const TokenId> input, std::size_t exchange_begin, std::size_t exchange_end,
            const ModelState& major, const ModelState& minor) {
  if (exchange_begin < 1 || exchange_end <= exchange_begin || exchange_end > input.size()) {
    throw std::invalid_argument("route: bad exchange range");
  }
  ScoredSequence s{TokenSequence(input.begin(), input.begin() + static_cast<std::ptrdiff_t>(exchange_end)),
                   std::vector<bool>(exchange_end, false)};
  for (std::size_t t = exchange_begin; t < exchange_end; ++t) s.mask[t] = true;
  const double a = log_likelihood(major, s).sum;
  const double b = log_likelihood(minor, s).sum;
  return b > a ? Group::Minority : Group::Majority;
}

Group route(const SftItem& item, const ModelState& major, const ModelState& minor) {
  return route(item.tokens, item.exchange_begin, item.exchange_end, major, minor);
}

PlantedAgreement planted_agreement(const ClusterState& state, const std::map<std::string, Group>& planted) {
  PlantedAgreement a;
  std::size_t clusters = 0, cluster_ok = 0, users = 0, user_ok = 0;
  for (std::size_t c = 0; c < state.clusters.size(); ++c) {
    std::size_t maj = 0, min = 0;
    for (const auto& u : state.clusters[c].users) {
      auto it = planted.find(u);
      if (it == planted.end()) continue;
      (it->second == Group::Majority ? maj : min)++;
      ++users;
      user_ok += it->second == state.assignments[c] ? 1 : 0;
    }
    if (maj + min == 0) continue;
    ++clusters;
    const bool ok = maj == min || (maj > min) == (state.assignments[c] == Group::Majority);
    cluster_ok += ok ? 1 : 0;
  }
  if (clusters == 0) throw std::invalid_argument("planted_agreement: no user has a planted group");
  a.cluster_level = static_cast<double>(cluster_ok) / static_cast<double>(clusters);
  a.user_level = static_cast<double>(user_ok) / static_cast<double>(users);
  return a;
}

M2pcResult run_m2pc(const ModelState& base, const UserItems& users, const std::map<std::string, Group>& provisional,
                    const M2pcConfig& config, std::uint64_t seed, const PairScorer& scorer,
                    const IterationCallback& on_iteration) {
  config.validate();
  M2pcResult r;
  r.major = base;
  r.major.role = ModelRole::RefMajor;
  r.minor = base;
  r.minor.role = ModelRole::RefMinor;
  M2pcIteration first;
  first.state = init_clusters(provisional, config, derive_seed(seed, 0));
  r.history.push_back(first);
  if (on_iteration) on_iteration(r.history.back());
  double best = -1.0;
  for (int t = 1; t <= config.em_iterations; ++t) {
    M2pcIteration it;
    const ClusterState& prev = r.history.back().state;
    const auto ts = static_cast<std::uint64_t>(t);
    r.major = m_step(std::move(r.major), Group::Majority, prev, users, config, derive_seed(seed, 2 * ts),
                     &it.major_report);
    r.minor = m_step(std::move(r.minor), Group::Minority, prev, users, config, derive_seed(seed, 2 * ts + 1),
                     &it.minor_report);
    for (auto [rep, name] : {std::pair{&it.major_report, "Major"}, std::pair{&it.minor_report, "Minor"}}) {
      if (rep->skipped) {
        r.warnings.push_back("iteration " + std::to_string(t) + ": no users assigned to " + name +
                             ", model left unchanged");
      }
    }
    it.state = e_step(r.major, r.minor, prev, users);
    if (scorer) it.valid_f1 = scorer(r.major, r.minor);
    const double score = it.valid_f1.value_or(static_cast<double>(t));
    if (score > best) {
      best = score;
      r.best_iteration = t;
      r.best_major = r.major;
      r.best_minor = r.minor;
    }
    r.history.push_back(std::move(it));
    if (on_iteration) on_iteration(r.history.back());
  }
  if (config.em_iterations == 0) {
    r.best_major = r.major;
    r.best_minor = r.minor;
  }
  return r;
}

std::string cluster_history_to_json(std::span<const M2pcIteration> history) {
  json out = json::array();
  for (const auto& it : history) {
    json clusters = json::array();
    for (std::size_t c = 0; c < it.state.clusters.size(); ++c) {
      json entry = {{"users", it.state.clusters[c].users},
                    {"initial_tag", std::string(to_string(it.state.clusters[c].initial_tag))},
                    {"assignment", std::string(to_string(it.state.assignments[c]))}};
      if (!it.state.perplexity.empty()) {
        entry["ppl_major"] = it.state.perplexity[c][0];
        entry["ppl_minor"] = it.state.perplexity[c][1];
      }
      clusters.push_back(std::move(entry));
    }
    json row = {{"iteration", it.state.iteration},
                {"major_users", it.state.users_in(Group::Majority)},
                {"minor_users", it.state.users_in(Group::Minority)},
                {"clusters", std::move(clusters)}};
    if (it.valid_f1) row["valid_f1_weighted"] = *it.valid_f1;
    if (it.state.iteration > 0) {
      row["m_step"] = {{"major_steps", it.major_report.steps},
                       {"minor_steps", it.minor_report.steps},
                       {"major_loss", it.major_report.mean_loss},
                       {"minor_loss", it.minor_report.mean_loss}};
    }
    out.push_back(std::move(row));
  }
  return out.dump(2);
}

}  // namespace satpref
