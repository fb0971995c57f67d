// One PASS/FAIL line per acceptance criterion. Exit status is non-zero when
// any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "satpref/coper.hpp"
#include "satpref/corpus.hpp"
#include "satpref/digest.hpp"
#include "satpref/eval.hpp"
#include "satpref/lm.hpp"
#include "satpref/m2pc.hpp"
#include "satpref/padappo.hpp"
#include "satpref/pipeline.hpp"
#include "satpref/sft.hpp"

using namespace satpref;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const std::string& title, const std::function<void(Outcome&)>& body) {
  const auto start = Clock::now();
  Outcome o;
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  if (!o.pass) ++failures;
  std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << title << "  (" << std::fixed
            << std::setprecision(1) << secs << " s)" << o.detail.str() << std::endl;
}

std::string fmt(double v, int digits = 3) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

ModelState randomized(const ModelConfig& c, std::uint64_t seed, double scale) {
  ModelState m = init_model(c, ModelRole::Sft, seed);
  Rng rng(derive_seed(seed, 1));
  for (auto& p : m.parameters) {
    for (double& v : p.value.data) v += scale * rng.normal();
  }
  return m;
}

// ---------------------------------------------------------------------------

void formula_oracles(Outcome& o) {
  Rng rng(1);
  double worst_gae = 0;
  for (int ep = 0; ep < 1000; ++ep) {
    const std::size_t T = 1 + rng.below(8);
    std::vector<double> r(T), v(T);
    for (auto& x : r) x = rng.normal();
    for (auto& x : v) x = rng.normal();
    const double g = rng.uniform(), l = rng.uniform();
    const Advantages a = gae(r, v, g, l);
    for (std::size_t t = 0; t < T; ++t) {
      double want = 0;
      for (std::size_t k = t; k < T; ++k) {
        const double delta = r[k] + g * (k + 1 < T ? v[k + 1] : 0.0) - v[k];
        want += std::pow(g * l, static_cast<double>(k - t)) * delta;
      }
      worst_gae = std::max(worst_gae, std::abs(a.advantages[t] - want));
      worst_gae = std::max(worst_gae, std::abs(a.returns[t] - (want + v[t])));
    }
  }
  o.require(worst_gae <= 1e-10, "GAE double sum");

  ModelConfig c;
  c.vocab_size = 13;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.context_len = 24;
  double worst_ppl = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const ModelState m = randomized(c, 100 + static_cast<std::uint64_t>(trial), 0.3);
    std::vector<TokenSequence> seqs(1 + rng.below(4));
    double logsum = 0;
    std::size_t n = 0;
    for (auto& s : seqs) {
      const std::size_t len = 2 + rng.below(20);
      for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<TokenId>(rng.below(13)));
      const Matrix lp = forward_logprobs(m, s);
      for (std::size_t t = 1; t < len; ++t) logsum += lp(t - 1, static_cast<std::size_t>(s[t]));
      n += len - 1;
    }
    const double want = std::exp(-logsum / static_cast<double>(n));
    worst_ppl = std::max(worst_ppl, std::abs(perplexity(m, std::span<const TokenSequence>(seqs)) - want) / want);
  }
  o.require(worst_ppl <= 1e-9, "perplexity formula");

  const std::vector<double> same{0.3, -0.2};
  o.require(value_loss(same, same, same, 0.2) == 0.0, "value loss zero case");
  o.require(std::abs(value_loss(std::vector<double>{0.5}, std::vector<double>{0.0}, std::vector<double>{0.0}, 0.2) -
                     0.125) <= 1e-15,
            "value loss 0.125");
  o.require(std::abs(policy_loss(std::vector<double>{1, 1}, std::vector<double>{0.4, 1.0}, 0.2) + 0.7) <= 1e-15,
            "policy loss identity ratio");
  o.require(std::abs(policy_loss(std::vector<double>{1.5}, std::vector<double>{1.0}, 0.2) + 1.2) <= 1e-15,
            "policy loss upper clip");
  o.require(std::abs(policy_loss(std::vector<double>{0.5}, std::vector<double>{-1.0}, 0.2) - 0.8) <= 1e-15,
            "policy loss lower clip");
  const auto two = gae(std::vector<double>{0.0, 1.0}, std::vector<double>{0.5, 0.2}, 0.95, 1.0);
  o.require(std::abs(two.advantages[0] - 0.45) <= 1e-15 && std::abs(two.advantages[1] - 0.8) <= 1e-15,
            "two-step GAE");
  o.detail << " gae err " << worst_gae << ", ppl rel err " << worst_ppl;
}

void gradient_integrity(Outcome& o) {
  ModelConfig c;
  c.vocab_size = 17;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.context_len = 24;
  c.float_width = FloatWidth::F64;
  ModelState m = with_value_head(randomized(c, 7, 0.2));
  Rng rng(8);

  TokenSequence toks;
  for (int i = 0; i < 14; ++i) toks.push_back(static_cast<TokenId>(rng.below(17)));
  std::vector<bool> mask(toks.size(), false);
  for (std::size_t t = 5; t < toks.size(); ++t) mask[t] = true;

  Trajectory tr;
  tr.state_prefix.assign(toks.begin(), toks.begin() + 8);
  tr.actions.assign(toks.begin() + 8, toks.end());
  tr.generated = tr.actions;
  {
    const Matrix lp = forward_logprobs(m, toks);
    const auto values = value_estimates(m, toks);
    for (std::size_t t = 0; t < tr.actions.size(); ++t) {
      const double here = lp(7 + t, static_cast<std::size_t>(tr.actions[t]));
      tr.logp_policy.push_back(here);
      tr.logp_old.push_back(here + (t % 2 ? 0.05 : -0.05));
      tr.logp_ref.push_back(here);
      tr.kl.push_back(0.0);
      tr.values.push_back(values[7 + t] + 0.05 * rng.normal());
      tr.rewards.push_back(t + 1 == tr.actions.size() ? 1.0 : 0.0);
      tr.advantages.push_back(rng.normal());
      tr.returns.push_back(rng.normal());
    }
    tr.total_rewards = tr.rewards;
  }
  PpoConfig cfg;

  const NllResult nll = nll_and_grads(m, toks, mask);
  const PpoLoss ppo = ppo_loss(m, tr, cfg, true);
  double worst_nll = 0, worst_ppo = 0, worst_zero = 0;
  std::size_t checked = 0, zero_entries = 0;
  for (std::size_t p = 0; p < m.parameters.size(); ++p) {
    const std::size_t n = m.parameters[p].value.size();
    for (int k = 0; k < 4; ++k) {
      const std::size_t i = k == 0 ? 0 : rng.below(n);
      double& x = m.parameters[p].value.data[i];
      const double saved = x, h = 1e-5;
      x = saved + h;
      const double nu = nll_and_grads(m, toks, mask).loss, pu = ppo_loss(m, tr, cfg, false).total;
      x = saved - h;
      const double nd = nll_and_grads(m, toks, mask).loss, pd = ppo_loss(m, tr, cfg, false).total;
      x = saved;
      // exactly-zero gradients (key biases, value head under NLL) leave only
      // rounding noise in the difference quotient; those get an absolute bound
      auto check = [&](double fd, double g, double& worst) {
        if (std::max(std::abs(fd), std::abs(g)) < 1e-8) {
          ++zero_entries;
          worst_zero = std::max(worst_zero, std::abs(fd - g));
          return;
        }
        worst = std::max(worst, std::abs(fd - g) / (std::abs(fd) + std::abs(g)));
      };
      check((nu - nd) / (2 * h), nll.gradients[p].data[i], worst_nll);
      check((pu - pd) / (2 * h), ppo.gradients[p].data[i], worst_ppo);
      ++checked;
    }
  }
  o.require(worst_nll <= 1e-4, "NLL gradient");
  o.require(worst_ppo <= 1e-4, "PPO gradient");
  o.require(worst_zero <= 1e-9, "zero-gradient entries");
  o.detail << " " << m.parameters.size() << " tensors, " << checked << " entries; worst rel err nll " << worst_nll
           << ", ppo " << worst_ppo << "; " << zero_entries << " zero-gradient checks, worst abs " << worst_zero;
}

void metric_fidelity(Outcome& o) {
  Rng rng(3);
  std::size_t mismatches = 0;
  double worst_identity = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<PredictedLabel> p;
    std::vector<Satisfaction> g;
    for (std::size_t i = 0; i < n; ++i) {
      const auto u = rng.below(3);
      p.push_back(u == 0 ? PredictedLabel{} : PredictedLabel{u == 1 ? Satisfaction::Low : Satisfaction::High});
      g.push_back(rng.below(2) ? Satisfaction::Low : Satisfaction::High);
    }
    auto f1 = [&](Satisfaction c) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (p[i] == c && g[i] == c) ++tp;
        if (p[i] == c && g[i] != c) ++fp;
        if (p[i] != c && g[i] == c) ++fn;
      }
      if (tp == 0) return 0.0;
      const double prec = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double rec = static_cast<double>(tp) / static_cast<double>(tp + fn);
      return 2 * prec * rec / (prec + rec);
    };
    const F1Report r = f1_report(p, g);
    if (r.f1_low() != f1(Satisfaction::Low) || r.f1_high() != f1(Satisfaction::High)) ++mismatches;
    const double sl = static_cast<double>(r.low.support), sh = static_cast<double>(r.high.support);
    worst_identity = std::max(worst_identity, std::abs(r.f1_macro - (r.f1_low() + r.f1_high()) / 2));
    worst_identity =
        std::max(worst_identity, std::abs(r.f1_weighted - (sl * r.f1_low() + sh * r.f1_high()) / (sl + sh)));
  }
  o.require(mismatches == 0, "brute-force F1");
  o.require(worst_identity <= 1e-12, "macro/weighted identities");
  o.detail << " 1000 label sets, " << mismatches << " mismatches, identity err " << worst_identity;
}

void nesting(Outcome& o) {
  const Corpus corpus = split_corpus(generate_corpus(GeneratorConfig{}, derive_seed(1, 1)), derive_seed(1, 2));
  const RationaleMap rat = synthesize_corpus(corpus, derive_seed(1, 3));
  auto train = corpus.in_split(Split::Train);
  train.resize(200);
  const auto coper = build_sft_dataset(train, rat, Variant::Coper, PromptConfig{}, corpus.vocabulary);
  const auto ucot = build_sft_dataset(train, rat, Variant::Ucot, PromptConfig{}, corpus.vocabulary);
  ModelConfig c;
  c.vocab_size = static_cast<int>(corpus.vocabulary.size());
  c.embed_dim = 16;
  c.context_len = 160;
  const ModelState m = randomized(c, 11, 0.1);
  double worst = 0, worst_input = 0;
  for (std::size_t i = 0; i < coper.size(); ++i) {
    const double full = -log_likelihood(m, {coper[i].tokens, coper[i].mask}).sum;
    const double score = -log_likelihood(m, {coper[i].tokens, score_only_mask(coper[i])}).sum;
    const double rationale = -log_likelihood(m, {coper[i].tokens, rationale_mask(coper[i])}).sum;
    worst = std::max(worst, std::abs(full - (score + rationale)));
    const bool same_input = std::equal(ucot[i].tokens.begin(), ucot[i].tokens.begin() + static_cast<std::ptrdiff_t>(ucot[i].input_len),
                                       coper[i].tokens.begin());
    if (!same_input) worst_input = 1;
  }
  o.require(worst <= 1e-9, "loss decomposition");
  o.require(worst_input == 0, "identical inputs across modes");
  o.detail << " " << coper.size() << " items, worst |coper - (score + rationale)| " << worst;
}

void logical_mapping(Outcome& o) {
  const Match table[5] = {Match::NotMatched, Match::PartiallyMatched, Match::PartiallyMatched, Match::Matched,
                          Match::Matched};
  int cases = 0, correct = 0;
  for (int s = 1; s <= 5; ++s) {
    for (Match m : {Match::Matched, Match::PartiallyMatched, Match::NotMatched}) {
      ++cases;
      correct += logically_consistent(m, s) == (m == table[s - 1]);
    }
  }
  o.require(correct == 15, "15-case table");
  const Corpus corpus = split_corpus(generate_corpus(GeneratorConfig{}, derive_seed(1, 1)), derive_seed(1, 2));
  const RationaleMap rat = synthesize_corpus(corpus, derive_seed(1, 3));
  std::vector<CoperRecord> recs;
  std::vector<Strategy> strategies;
  std::vector<int> scores;
  for (const auto& e : corpus.examples) {
    recs.push_back(rat.at(e.key()));
    strategies.push_back(e.strategy);
    scores.push_back(e.score);
  }
  const RationaleEval ev = evaluate_rationales(recs, strategies, scores);
  o.require(ev.strategy_accuracy == 1.0 && ev.logical_accuracy == 1.0, "rule-based oracle accuracies");
  o.detail << " " << correct << "/" << cases << " table cases; oracle strategy " << ev.strategy_accuracy
           << ", logical " << ev.logical_accuracy << " over " << ev.n << " records";
}

void reproducibility(Outcome& o) {
  struct Run {
    std::string corpus_blob;
    std::vector<double> losses;
  };
  auto run = [] {
    Run r;
    const Corpus corpus = split_corpus(generate_corpus(GeneratorConfig{}, derive_seed(1, 1)), derive_seed(1, 2));
    r.corpus_blob = git_blob_id(corpus_to_jsonl(corpus));
    auto train = corpus.in_split(Split::Train);
    train.resize(800);
    const auto items = build_sft_dataset(train, {}, Variant::Ucot, PromptConfig{}, corpus.vocabulary);
    const auto valid = build_sft_dataset(corpus.in_split(Split::Valid), {}, Variant::Ucot, PromptConfig{},
                                         corpus.vocabulary);
    ModelConfig c;
    c.vocab_size = static_cast<int>(corpus.vocabulary.size());
    c.embed_dim = 16;
    c.context_len = 160;
    c.float_width = FloatWidth::F64;
    SftConfig cfg;
    cfg.lr = 1e-3;
    cfg.max_epochs = 1;
    r.losses = train_sft(init_model(c, ModelRole::Sft, 5), items, valid, cfg, 6).step_losses;
    r.losses.resize(std::min<std::size_t>(100, r.losses.size()));
    return r;
  };
  const Run a = run(), b = run();
  o.require(a.corpus_blob == b.corpus_blob, "corpus digest");
  o.require(a.losses.size() == 100, "100 steps");
  o.require(a.losses == b.losses, "bitwise step losses");
  o.detail << " corpus blob " << a.corpus_blob << ", loss[0] " << std::setprecision(17) << a.losses.front()
           << ", loss[99] " << a.losses.back() << ", loss-sequence sha256 "
           << sha256_hex(std::string(reinterpret_cast<const char*>(a.losses.data()), a.losses.size() * sizeof(double)))
                  .substr(0, 16);
}

void subgroup_machinery(Outcome& o) {
  Rng rng(9);
  Points pts;
  std::vector<int> truth;
  for (int i = 0; i < 60; ++i) {
    const double cx = i < 30 ? 0.0 : 40.0;
    pts.push_back({cx + rng.normal(), rng.normal()});
    truth.push_back(i < 30 ? 0 : 1);
  }
  const KMeansResult km = kmeanspp(pts, 2, 4);
  bool recovered = true;
  for (std::size_t i = 0; i < pts.size(); ++i) recovered &= (km.assignments[i] == km.assignments[0]) == (truth[i] == 0);
  o.require(recovered, "two-blob recovery");

  const Points four{{0, 0}, {0, 1}, {3, 0}, {3, 1}};
  const double b = (3.0 + std::sqrt(10.0)) / 2.0;
  const double sil = silhouette(four, std::vector<int>{0, 0, 1, 1});
  o.require(std::abs(sil - (b - 1.0) / b) <= 1e-12, "silhouette hand value");

  std::vector<int> asg;
  std::vector<PredictedLabel> p;
  std::vector<Satisfaction> g;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 10; ++i) {
      asg.push_back(c);
      g.push_back(i % 2 ? Satisfaction::High : Satisfaction::Low);
      p.push_back(i % 4 < 2 ? Satisfaction::High : Satisfaction::Low);
    }
  }
  for (int i = 0; i < 4; ++i) {
    asg.push_back(2);
    g.push_back(i % 2 ? Satisfaction::High : Satisfaction::Low);
    p.push_back(g.back());
  }
  const SubgroupReport r = rank_subgroups(asg, p, g);
  o.require(r.clusters.size() == 3 && r.clusters[2].id == 2 && r.clusters[2].exceeds && !r.clusters[0].exceeds &&
                !r.clusters[1].exceeds,
            "bold criterion flag");
  o.detail << " silhouette " << fmt(sil, 12) << ", baseline " << fmt(r.baseline) << ", small cluster F1 "
           << fmt(r.clusters[2].weighted_f1);
}

// ---------------------------------------------------------------------------
// Criteria 4 and 5 share a corpus, an SFT base and the M2PC references.

struct Shared {
  ExperimentConfig config = default_experiment_config();
  Corpus corpus;
  std::vector<SftItem> train, valid;
  ModelState sft;
  std::map<std::string, Group> planted;
  struct Refs {
    ModelState major, minor;
    int best_iteration = 0;
    PlantedAgreement agreement;
  };
  std::vector<Refs> refs;
  static constexpr Variant kVariant = Variant::Ucot;

  double minority_f1_low(const Predictor& predictor) const {
    const SplitEvaluation e = evaluate_split(corpus, Split::Test, predictor, derive_seed(config.seed, 60));
    return e.report.minority ? e.report.minority->f1_low() : 0.0;
  }
};

void prepare(Shared& s) {
  const auto& c = s.config;
  s.corpus = split_corpus(generate_corpus(c.generator, derive_seed(c.seed, 1)), derive_seed(c.seed, 2));
  for (const auto& [id, u] : s.corpus.users) s.planted[id] = *u.planted_group;
  s.train = build_sft_dataset(s.corpus.in_split(Split::Train), {}, Shared::kVariant, c.prompt, s.corpus.vocabulary);
  s.valid = build_sft_dataset(s.corpus.in_split(Split::Valid), {}, Shared::kVariant, c.prompt, s.corpus.vocabulary);
  ModelConfig mc = c.model;
  mc.vocab_size = static_cast<int>(s.corpus.vocabulary.size());
  const SftResult r = train_sft(init_model(mc, ModelRole::Sft, derive_seed(c.seed, 11)), s.train, s.valid, c.sft,
                                derive_seed(c.seed, 21), [](const EpochLoss& e) {
                                  std::cout << "  sft epoch " << e.epoch << " train " << fmt(e.train_nll, 4)
                                            << " valid " << fmt(e.valid_nll, 4) << std::endl;
                                });
  s.sft = r.model;
}

void planted_recovery(Shared& s, Outcome& o) {
  const auto& c = s.config;
  const UserItems users = group_items_by_user(s.train, s.corpus);
  const auto provisional = provisional_groups(s.corpus, Split::Train);
  int ok = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const PairScorer scorer = [&](const ModelState& major, const ModelState& minor) {
      const Predictor p = routed_predictor(major, minor, s.corpus.vocabulary, Shared::kVariant, c.prompt, c.sampling);
      return evaluate_split(s.corpus, Split::Valid, p, derive_seed(seed, 50), c.pipeline.max_valid_examples)
          .report.combined.f1_weighted;
    };
    const M2pcResult r = run_m2pc(s.sft, users, provisional, c.m2pc, derive_seed(seed, 30), scorer);
    Shared::Refs refs{r.best_major, r.best_minor, r.best_iteration,
                      planted_agreement(r.history[static_cast<std::size_t>(r.best_iteration)].state, s.planted)};
    ok += refs.agreement.cluster_level >= 0.9;
    o.detail << " seed " << seed << ": best t=" << refs.best_iteration << " cluster agreement "
             << fmt(refs.agreement.cluster_level) << " (user-level " << fmt(refs.agreement.user_level) << ");";
    s.refs.push_back(std::move(refs));
  }
  o.require(ok == 3, "agreement >= 0.9 in every seed");
  o.detail << " " << c.m2pc.em_iterations << " EM iterations";
}

void directional_pada(Shared& s, Outcome& o) {
  const auto& c = s.config;
  const auto& vocab = s.corpus.vocabulary;
  const double sft_f1 = s.minority_f1_low(model_predictor(s.sft, vocab, Shared::kVariant, c.prompt, c.sampling));
  o.detail << " SFT minority F1_low " << fmt(sft_f1) << ";";
  auto compare = [&](KlEstimator est, std::ostringstream& out) {
    PpoConfig pc = c.ppo;
    pc.kl_estimator = est;
    int wins = 0;
    for (std::size_t i = 0; i < s.refs.size(); ++i) {
      const std::uint64_t seed = derive_seed(i + 1, 40);
      const PpoResult plain = train_ppo(s.sft, References::one(s.sft), s.train, vocab, Shared::kVariant, pc,
                                        c.sampling, seed);
      const PpoResult pada = train_ppo(s.sft, References::routed(s.refs[i].major, s.refs[i].minor), s.train, vocab,
                                       Shared::kVariant, pc, c.sampling, seed);
      const double a = s.minority_f1_low(model_predictor(plain.policy, vocab, Shared::kVariant, c.prompt, c.sampling));
      const double b = s.minority_f1_low(model_predictor(pada.policy, vocab, Shared::kVariant, c.prompt, c.sampling));
      wins += b >= a;
      out << " seed " << i + 1 << ": ppo " << fmt(a) << " vs pada " << fmt(b) << ";";
    }
    return wins;
  };
  const int wins = compare(KlEstimator::Sample, o.detail);
  o.require(wins >= 2, "PAda-PPO >= PPO in at least 2 of 3 seeds");
  o.detail << " " << wins << "/3 with the sample KL estimator";

  std::ostringstream exact;
  const int exact_wins = compare(KlEstimator::Exact, exact);
  std::cout << "  info: exact KL estimator," << exact.str() << " " << exact_wins << "/3" << std::endl;
}

}  // namespace

int main() {
  std::cout << std::setprecision(6);
  report(1, "formula oracles (GAE, perplexity, PPO losses)", formula_oracles);
  report(2, "gradient integrity (NLL and PPO losses, f64)", gradient_integrity);
  report(3, "metric fidelity (F1 oracle and identities)", metric_fidelity);
  report(6, "loss nesting (CoPeR = score term + rationale term)", nesting);
  report(7, "logical-accuracy mapping and rule-based oracle", logical_mapping);
  report(9, "subgroup machinery (k-means++, silhouette, flagging)", subgroup_machinery);
  report(8, "reproducibility (corpus digest, first 100 step losses)", reproducibility);

  Shared shared;
  const auto start = Clock::now();
  bool prepared = true;
  try {
    std::cout << "  preparing UCoT SFT base on the default corpus" << std::endl;
    prepare(shared);
  } catch (const std::exception& e) {
    std::cout << "  preparation failed: " << e.what() << std::endl;
    prepared = false;
  }
  std::cout << "  base ready after " << fmt(std::chrono::duration<double>(Clock::now() - start).count(), 1) << " s"
            << std::endl;
  report(4, "M2PC planted-group recovery (3 seeds)", [&](Outcome& o) {
    o.require(prepared, "SFT base");
    if (prepared) planted_recovery(shared, o);
  });
  report(5, "PAda-PPO minority F1_low >= PPO (3 seeds)", [&](Outcome& o) {
    o.require(prepared && shared.refs.size() == 3, "references from criterion 4");
    if (prepared && shared.refs.size() == 3) directional_pada(shared, o);
  });
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
