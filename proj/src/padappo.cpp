#include "satpref/padappo.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "satpref/m2pc.hpp"

namespace satpref {

using nlohmann::json;

std::string_view to_string(KlEstimator k) { return k == KlEstimator::Exact ? "exact" : "sample"; }

std::optional<KlEstimator> parse_kl_estimator(std::string_view s) {
  if (s == "exact") return KlEstimator::Exact;
  if (s == "sample") return KlEstimator::Sample;
  return std::nullopt;
}

void PpoConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("ppo.gamma must be in (0, 1]");
  if (!(gae_lambda > 0.0 && gae_lambda <= 1.0)) throw std::invalid_argument("ppo.gae_lambda must be in (0, 1]");
  if (!(clip > 0.0)) throw std::invalid_argument("ppo.clip must be positive");
  if (!(kl_coeff >= 0.0)) throw std::invalid_argument("ppo.kl_coeff must be non-negative");
  if (!(value_coeff >= 0.0)) throw std::invalid_argument("ppo.value_coeff must be non-negative");
  if (!(lr >= 0.0)) throw std::invalid_argument("ppo.lr must be non-negative");
  if (epochs < 0) throw std::invalid_argument("ppo.epochs must be non-negative");
  if (batch < 1 || grad_accum < 1 || inner_epochs < 1) {
    throw std::invalid_argument("ppo.batch, ppo.grad_accum and ppo.inner_epochs must be positive");
  }
  if (max_train_examples < 0) throw std::invalid_argument("ppo.max_train_examples must be non-negative");
}

PpoConfig ppo_config_from_json(std::string_view text) {
  auto j = json::parse(text);
  PpoConfig c;
  for (auto& [k, v] : j.items()) {
    if (k == "gae_lambda") c.gae_lambda = v.get<double>();
    else if (k == "gamma") c.gamma = v.get<double>();
    else if (k == "value_coeff") c.value_coeff = v.get<double>();
    else if (k == "clip") c.clip = v.get<double>();
    else if (k == "kl_coeff") c.kl_coeff = v.get<double>();
    else if (k == "lr") c.lr = v.get<double>();
    else if (k == "epochs") c.epochs = v.get<int>();
    else if (k == "batch") c.batch = v.get<int>();
    else if (k == "grad_accum") c.grad_accum = v.get<int>();
    else if (k == "inner_epochs") c.inner_epochs = v.get<int>();
    else if (k == "max_train_examples") c.max_train_examples = v.get<int>();
    else if (k == "kl_estimator") {
      auto e = parse_kl_estimator(v.get<std::string>());
      if (!e) throw std::invalid_argument("ppo.kl_estimator must be \"exact\" or \"sample\"");
      c.kl_estimator = *e;
    }
    else throw std::invalid_argument("unknown ppo config key '" + k + "'");
  }
  c.validate();
  return c;
}

std::string ppo_config_to_json(const PpoConfig& c) {
  return json{{"gae_lambda", c.gae_lambda}, {"gamma", c.gamma},       {"value_coeff", c.value_coeff},
              {"clip", c.clip},             {"kl_coeff", c.kl_coeff}, {"lr", c.lr},
              {"epochs", c.epochs},         {"batch", c.batch},       {"grad_accum", c.grad_accum},
              {"inner_epochs", c.inner_epochs}, {"max_train_examples", c.max_train_examples},
              {"kl_estimator", std::string(to_string(c.kl_estimator))}}
      .dump();
}

// ---------------------------------------------------------------------------
// Formulas

double terminal_reward(std::optional<int> predicted, int gold) { return predicted && *predicted == gold ? 1.0 : -1.0; }

namespace {

void check_normalized(std::span<const double> row, const char* which) {
  double z = 0.0;
  for (double v : row) z += std::exp(v);
  if (std::abs(z - 1.0) > 1e-6) {
    throw std::invalid_argument(std::string("kl_per_token: ") + which + " row sums to " + std::to_string(z));
  }
}

void same_length(std::size_t a, std::size_t b, const char* op) {
  if (a != b) throw std::invalid_argument(std::string(op) + ": length mismatch");
}

}  // namespace

double kl_per_token(std::span<const double> p, std::span<const double> q) {
  same_length(p.size(), q.size(), "kl_per_token");
  check_normalized(p, "policy");
  check_normalized(q, "reference");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::exp(p[i]);
    if (pi > 0.0) kl += pi * (p[i] - q[i]);
  }
  return std::max(kl, 0.0);
}

std::vector<double> total_rewards(std::span<const double> rewards, std::span<const double> kls, double kl_coeff) {
  same_length(rewards.size(), kls.size(), "total_rewards");
  std::vector<double> out(rewards.size());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = rewards[t] - kl_coeff * kls[t];
  return out;
}

Advantages gae(std::span<const double> r, std::span<const double> v, double gamma, double lambda) {
  same_length(r.size(), v.size(), "gae");
  if (r.empty()) throw std::invalid_argument("gae: empty episode");
  const std::size_t T = r.size();
  Advantages out;
  out.advantages.resize(T);
  out.returns.resize(T);
  double running = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const double next_v = t + 1 < T ? v[t + 1] : 0.0;
    const double delta = r[t] + gamma * next_v - v[t];
    running = delta + gamma * lambda * running;
    out.advantages[t] = running;
    out.returns[t] = running + v[t];
  }
  return out;
}

double value_loss(std::span<const double> vn, std::span<const double> vo, std::span<const double> ret, double clip) {
  same_length(vn.size(), vo.size(), "value_loss");
  same_length(vn.size(), ret.size(), "value_loss");
  if (vn.empty()) throw std::invalid_argument("value_loss: empty input");
  double s = 0.0;
  for (std::size_t t = 0; t < vn.size(); ++t) {
    const double a = vn[t] - ret[t];
    const double b = vo[t] + std::clamp(vn[t] - vo[t], -clip, clip) - ret[t];
    s += std::max(a * a, b * b);
  }
  return 0.5 * s / static_cast<double>(vn.size());
}

std::vector<double> value_loss_grad(std::span<const double> vn, std::span<const double> vo,
                                    std::span<const double> ret, double clip) {
  same_length(vn.size(), vo.size(), "value_loss_grad");
  same_length(vn.size(), ret.size(), "value_loss_grad");
  const double n = static_cast<double>(vn.size());
  std::vector<double> g(vn.size());
  for (std::size_t t = 0; t < vn.size(); ++t) {
    const double diff = vn[t] - vo[t];
    const double a = vn[t] - ret[t];
    const double b = vo[t] + std::clamp(diff, -clip, clip) - ret[t];
    if (a * a >= b * b) g[t] = a / n;
    else g[t] = std::abs(diff) < clip ? b / n : 0.0;
  }
  return g;
}

double policy_loss(std::span<const double> ratios, std::span<const double> adv, double clip) {
  same_length(ratios.size(), adv.size(), "policy_loss");
  if (ratios.empty()) throw std::invalid_argument("policy_loss: empty input");
  double s = 0.0;
  for (std::size_t t = 0; t < ratios.size(); ++t) {
    if (!(ratios[t] > 0.0)) throw std::invalid_argument("policy_loss: non-positive ratio");
    s += std::min(ratios[t] * adv[t], std::clamp(ratios[t], 1.0 - clip, 1.0 + clip) * adv[t]);
  }
  return -s / static_cast<double>(ratios.size());
}

std::vector<double> policy_loss_grad_logp(std::span<const double> ratios, std::span<const double> adv, double clip) {
  same_length(ratios.size(), adv.size(), "policy_loss_grad_logp");
  const double n = static_cast<double>(ratios.size());
  std::vector<double> g(ratios.size());
  for (std::size_t t = 0; t < ratios.size(); ++t) {
    const double rho = ratios[t];
    const double unclipped = rho * adv[t];
    const double clipped = std::clamp(rho, 1.0 - clip, 1.0 + clip) * adv[t];
    double d_rho;
    if (unclipped <= clipped) d_rho = adv[t];
    else d_rho = (rho > 1.0 - clip && rho < 1.0 + clip) ? adv[t] : 0.0;
    g[t] = -d_rho * rho / n;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Rollout

bool Trajectory::consistent() const {
  const std::size_t T = actions.size();
  for (const auto* v : {&logp_policy, &logp_old, &logp_ref, &kl, &values, &rewards, &total_rewards, &advantages,
                        &returns}) {
    if (v->size() != T) return false;
  }
  if (T == 0) return false;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    if (rewards[t] != 0.0) return false;
  }
  return rewards[T - 1] != 0.0;
}

namespace {

TokenSequence scoring_prefix(const Trajectory& traj) {
  TokenSequence seq = traj.state_prefix;
  seq.insert(seq.end(), traj.actions.begin(), traj.actions.end() - 1);
  return seq;
}

}  // namespace

Trajectory rollout(const ModelState& policy, const References& refs, const SftItem& item, const Vocabulary& vocab,
                   Variant variant, const SamplingParams& sampling, const PpoConfig& config, std::uint64_t seed) {
  if (!policy.config.has_value_head) throw std::invalid_argument("rollout: policy needs a value head");
  Trajectory traj;
  traj.key = item.key;
  traj.gold_score = item.gold_score;
  traj.state_prefix.assign(item.tokens.begin(), item.tokens.begin() + static_cast<std::ptrdiff_t>(item.input_len));
  const ModelState* ref = refs.single;
  if (refs.is_routed()) {
    if (!refs.major || !refs.minor) throw std::invalid_argument("rollout: routed mode needs both references");
    traj.route_tag = route(item, *refs.major, *refs.minor);
    ref = traj.route_tag == Group::Majority ? refs.major : refs.minor;
  } else if (!ref) {
    throw std::invalid_argument("rollout: no reference model");
  }

  SamplingParams p = sampling;
  const int room = policy.config.context_len - static_cast<int>(item.input_len);
  if (room < 1) throw std::invalid_argument("rollout: input fills the context window");
  p.max_new_tokens = std::min({p.max_new_tokens, generation_budget(variant), room});
  traj.generated = sample(policy, traj.state_prefix, p, seed, vocab.eos());
  const Prediction pred = parse_prediction(traj.generated, vocab);
  traj.predicted_score = pred.score;
  const std::size_t T = pred.score_position ? *pred.score_position + 1 : traj.generated.size();
  traj.actions.assign(traj.generated.begin(), traj.generated.begin() + static_cast<std::ptrdiff_t>(T));

  const TokenSequence prefix = scoring_prefix(traj);
  ForwardPass pol(policy, prefix, false);
  const Matrix ref_lp = forward_logprobs(*ref, prefix);
  const std::vector<double> values = pol.values();
  const std::size_t base = item.input_len - 1;
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t row = base + t;
    const auto a = static_cast<std::size_t>(traj.actions[t]);
    traj.logp_policy.push_back(pol.logprobs()(row, a));
    traj.logp_ref.push_back(ref_lp(row, a));
    traj.kl.push_back(config.kl_estimator == KlEstimator::Exact
                          ? kl_per_token(pol.logprobs().row(row), ref_lp.row(row))
                          : traj.logp_policy.back() - traj.logp_ref.back());
    traj.values.push_back(values[row]);
    traj.rewards.push_back(0.0);
  }
  traj.logp_old = traj.logp_policy;
  traj.rewards.back() = terminal_reward(traj.predicted_score, traj.gold_score);
  traj.total_rewards = total_rewards(traj.rewards, traj.kl, config.kl_coeff);
  Advantages adv = gae(traj.total_rewards, traj.values, config.gamma, config.gae_lambda);
  traj.advantages = std::move(adv.advantages);
  traj.returns = std::move(adv.returns);
  return traj;
}

PpoLoss ppo_loss(const ModelState& policy, const Trajectory& traj, const PpoConfig& config, bool with_gradients) {
  if (!traj.consistent()) throw std::invalid_argument("ppo_loss: inconsistent trajectory");
  const TokenSequence prefix = scoring_prefix(traj);
  ForwardPass pass(policy, prefix, with_gradients);
  const std::size_t T = traj.actions.size();
  const std::size_t base = traj.state_prefix.size() - 1;
  const std::vector<double> values = pass.values();
  std::vector<double> ratios(T), v_new(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double lp = pass.logprobs()(base + t, static_cast<std::size_t>(traj.actions[t]));
    ratios[t] = std::exp(lp - traj.logp_old[t]);
    v_new[t] = values[base + t];
  }
  PpoLoss out;
  out.policy = policy_loss(ratios, traj.advantages, config.clip);
  out.value = value_loss(v_new, traj.values, traj.returns, config.clip);
  out.total = out.policy + config.value_coeff * out.value;
  if (with_gradients) {
    const auto gp = policy_loss_grad_logp(ratios, traj.advantages, config.clip);
    const auto gv = value_loss_grad(v_new, traj.values, traj.returns, config.clip);
    Matrix d_lp(prefix.size(), static_cast<std::size_t>(policy.config.vocab_size));
    std::vector<double> d_v(prefix.size(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      d_lp(base + t, static_cast<std::size_t>(traj.actions[t])) = gp[t];
      d_v[base + t] = config.value_coeff * gv[t];
    }
    out.gradients = pass.backward(&d_lp, d_v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

PpoResult train_ppo(ModelState policy, const References& refs, std::span<const SftItem> train_items,
                    const Vocabulary& vocab, Variant variant, const PpoConfig& config, const SamplingParams& sampling,
                    std::uint64_t seed, const PolicyValidator& validator) {
  config.validate();
  if (train_items.empty()) throw std::invalid_argument("train_ppo: no training items");
  PpoResult result;
  policy = with_value_head(std::move(policy));
  policy.role = ModelRole::Policy;

  std::vector<std::size_t> pool(train_items.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  if (config.max_train_examples > 0 && static_cast<std::size_t>(config.max_train_examples) < pool.size()) {
    Rng pick(derive_seed(seed, 0x5eed));
    pick.shuffle(pool);
    pool.resize(static_cast<std::size_t>(config.max_train_examples));
    std::sort(pool.begin(), pool.end());
  }

  AdamWState opt;
  AdamWConfig adam;
  adam.lr = config.lr;
  const auto micro = static_cast<std::size_t>(config.batch);
  const std::size_t rollout_batch = micro * static_cast<std::size_t>(config.grad_accum);
  std::uint64_t rollout_id = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng order_rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order = pool;
    order_rng.shuffle(order);
    PpoEpochMetrics metrics;
    metrics.epoch = epoch;
    double reward_sum = 0.0, kl_sum = 0.0;
    std::size_t kl_count = 0;
    for (std::size_t b = 0; b < order.size(); b += rollout_batch) {
      const std::size_t e = std::min(order.size(), b + rollout_batch);
      std::vector<Trajectory> trajs;
      for (std::size_t i = b; i < e; ++i) {
        trajs.push_back(rollout(policy, refs, train_items[order[i]], vocab, variant, sampling, config,
                                derive_seed(seed, 1'000'000 + rollout_id++)));
        reward_sum += trajs.back().rewards.back();
        for (double k : trajs.back().kl) kl_sum += k;
        kl_count += trajs.back().kl.size();
      }
      metrics.trajectories += trajs.size();
      const ModelState last_good = policy;
      for (int inner = 0; inner < config.inner_epochs; ++inner) {
        Gradients acc;
        int pending = 0;
        double step_loss = 0.0;
        auto flush = [&] {
          scale_gradients(acc, 1.0 / pending);
          optimizer_step(policy, acc, opt, adam);
          if (!policy.all_finite()) throw PpoDiverged("train_ppo: non-finite parameters", last_good);
          result.step_losses.push_back(step_loss / pending);
          acc.clear();
          pending = 0;
          step_loss = 0.0;
        };
        for (std::size_t m = 0; m < trajs.size(); m += micro) {
          const std::size_t me = std::min(trajs.size(), m + micro);
          Gradients g;
          double loss = 0.0;
          for (std::size_t i = m; i < me; ++i) {
            PpoLoss l = ppo_loss(policy, trajs[i], config, true);
            if (!std::isfinite(l.total)) {
              throw PpoDiverged("train_ppo: non-finite loss in epoch " + std::to_string(epoch), last_good);
            }
            loss += l.total;
            accumulate(g, l.gradients);
          }
          const double n = static_cast<double>(me - m);
          accumulate(acc, g, 1.0 / n);
          step_loss += loss / n;
          if (++pending == config.grad_accum) flush();
        }
        if (pending > 0) flush();
      }
    }
    metrics.mean_reward = reward_sum / static_cast<double>(metrics.trajectories);
    metrics.mean_kl = kl_count ? kl_sum / static_cast<double>(kl_count) : 0.0;
    if (validator) validator(policy, metrics);
    result.history.push_back(metrics);
  }
  result.policy = std::move(policy);
  return result;
}

std::string ppo_metrics_csv(std::span<const PpoEpochMetrics> history) {
  std::ostringstream ss;
  ss << "epoch,mean_reward,mean_kl,trajectories,valid_f1_low_minority,valid_f1_weighted\n";
  for (const auto& m : history) {
    ss << m.epoch << ',' << m.mean_reward << ',' << m.mean_kl << ',' << m.trajectories << ',';
    if (m.valid_f1_low_minority) ss << *m.valid_f1_low_minority;
    ss << ',';
    if (m.valid_f1_weighted) ss << *m.valid_f1_weighted;
    ss << '\n';
  }
  return ss.str();
}

}  // namespace satpref
