#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "satpref/eval.hpp"

using namespace satpref;
using namespace testing_helpers;

namespace {

constexpr auto L = Satisfaction::Low;
constexpr auto H = Satisfaction::High;

// Direct confusion counts, no shared code with the library.
struct OracleF1 {
  double low, high, weighted, macro;
};
OracleF1 oracle_f1(const std::vector<PredictedLabel>& p, const std::vector<Satisfaction>& g) {
  auto f1 = [&](Satisfaction c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] == c && g[i] == c) tp++;
      if (p[i] == c && g[i] != c) fp++;
      if (p[i] != c && g[i] == c) fn++;
    }
    return tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  };
  const double nl = static_cast<double>(std::count(g.begin(), g.end(), L));
  const double nh = static_cast<double>(g.size()) - nl;
  const double fl = f1(L), fh = f1(H);
  return {fl, fh, (nl * fl + nh * fh) / (nl + nh), (fl + fh) / 2};
}

Points blobs(Rng& rng, std::size_t per, double separation, double spread) {
  Points pts;
  for (std::size_t i = 0; i < 2 * per; ++i) {
    const double cx = i < per ? 0.0 : separation;
    pts.push_back({cx + spread * rng.normal(), spread * rng.normal()});
  }
  return pts;
}

bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<int, int> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto [x, f1] = ab.emplace(a[i], b[i]);
    auto [y, f2] = ba.emplace(b[i], a[i]);
    if (x->second != b[i] || y->second != a[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("F1 on hand-built cases") {
  const std::vector<PredictedLabel> p{H, H, L};
  const std::vector<Satisfaction> g{H, L, L};
  const F1Report r = f1_report(p, g);
  CHECK(r.f1_high() == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(r.f1_low() == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(r.f1_macro == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(r.f1_weighted == doctest::Approx(2.0 / 3).epsilon(1e-15));

  const std::vector<PredictedLabel> perfect{H, L, L, H};
  const std::vector<Satisfaction> pg{H, L, L, H};
  const F1Report pr = f1_report(perfect, pg);
  CHECK(pr.f1_low() == 1.0);
  CHECK(pr.f1_high() == 1.0);
  CHECK(pr.f1_macro == 1.0);
  CHECK(pr.f1_weighted == 1.0);

  const std::vector<PredictedLabel> all_high{H, H, H, H};
  CHECK(f1_report(all_high, pg).f1_low() == 0.0);

  const std::vector<PredictedLabel> with_absent{std::nullopt, L, L, H};
  const F1Report ar = f1_report(with_absent, pg);
  CHECK(ar.absent == 1);
  CHECK(ar.high.recall == 0.5);
  CHECK(ar.high.precision == 1.0);
  CHECK(ar.low.precision == 1.0);

  CHECK_THROWS(f1_report(p, std::vector<Satisfaction>{H}));
  CHECK_THROWS(f1_report({}, {}));
}

TEST_CASE("F1 agrees with a brute-force count and its own identities") {
  Rng rng(40);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(30);
    std::vector<PredictedLabel> p;
    std::vector<Satisfaction> g;
    for (std::size_t i = 0; i < n; ++i) {
      const auto u = rng.below(3);
      p.push_back(u == 0 ? PredictedLabel{} : PredictedLabel{u == 1 ? L : H});
      g.push_back(rng.below(2) ? L : H);
    }
    const F1Report r = f1_report(p, g);
    const OracleF1 o = oracle_f1(p, g);
    CHECK(std::abs(r.f1_low() - o.low) <= 1e-12);
    CHECK(std::abs(r.f1_high() - o.high) <= 1e-12);
    CHECK(std::abs(r.f1_weighted - o.weighted) <= 1e-12);
    CHECK(std::abs(r.f1_macro - (r.f1_low() + r.f1_high()) / 2) <= 1e-12);
    const double sl = static_cast<double>(r.low.support), sh = static_cast<double>(r.high.support);
    CHECK(std::abs(r.f1_weighted - (sl * r.f1_low() + sh * r.f1_high()) / (sl + sh)) <= 1e-12);
    CHECK(r.low.support + r.high.support == n);
  }
}

TEST_CASE("group-wise reports") {
  const std::vector<PredictedLabel> p{H, L, H, L, H, std::nullopt};
  const std::vector<Satisfaction> g{H, H, L, L, H, L};
  const std::vector<Group> grp{Group::Majority, Group::Minority, Group::Minority,
                               Group::Majority, Group::Majority, Group::Minority};
  const GroupwiseReport r = groupwise_eval(p, g, grp);
  REQUIRE(r.minority.has_value());
  REQUIRE(r.majority.has_value());
  const OracleF1 minority = oracle_f1({L, H, std::nullopt}, {H, L, L});
  const OracleF1 majority = oracle_f1({H, L, H}, {H, L, H});
  CHECK(r.minority->f1_weighted == doctest::Approx(minority.weighted).epsilon(1e-12));
  CHECK(r.minority->f1_low() == doctest::Approx(minority.low).epsilon(1e-12));
  CHECK(r.majority->f1_weighted == doctest::Approx(majority.weighted).epsilon(1e-12));
  CHECK(r.combined.f1_weighted == doctest::Approx(oracle_f1(p, g).weighted).epsilon(1e-12));

  const std::vector<Group> all_major(6, Group::Majority);
  const GroupwiseReport m = groupwise_eval(p, g, all_major);
  CHECK_FALSE(m.minority.has_value());
  CHECK(m.combined.f1_weighted == r.combined.f1_weighted);
  CHECK(m.combined.f1_low() == r.combined.f1_low());
  CHECK_THROWS(groupwise_eval(p, g, std::span(grp).first(3)));

  const std::string header = f1_csv_header(), row = f1_csv_row("x", r.combined);
  CHECK(row.rfind("x,", 0) == 0);
  CHECK(std::count(header.begin(), header.end(), ',') == std::count(row.begin(), row.end(), ','));
}

TEST_CASE("k-means++ cases") {
  Rng rng(41);
  Points pts;
  for (int i = 0; i < 7; ++i) pts.push_back({rng.normal(), rng.normal(), rng.normal()});

  const KMeansResult each = kmeanspp(pts, 7, 1);
  CHECK(each.inertia == doctest::Approx(0.0));
  std::vector<int> sorted = each.assignments;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());

  const KMeansResult one = kmeanspp(pts, 1, 2);
  for (std::size_t d = 0; d < 3; ++d) {
    double mean = 0;
    for (const auto& p : pts) mean += p[d] / 7;
    CHECK(std::abs(one.centroids[0][d] - mean) <= 1e-12);
  }

  const Points two = blobs(rng, 25, 50.0, 1.0);
  const KMeansResult km = kmeanspp(two, 2, 3);
  std::vector<int> truth(50, 0);
  std::fill(truth.begin() + 25, truth.end(), 1);
  CHECK(same_partition(km.assignments, truth));
  CHECK(kmeanspp(two, 2, 3).assignments == km.assignments);

  CHECK_THROWS(kmeanspp(pts, 8, 1));
  CHECK_THROWS(kmeanspp(pts, 0, 1));
}

TEST_CASE("k-means result does not depend on input order") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6 + rng.below(10), k = 2 + rng.below(3);
    Points pts;
    for (std::size_t i = 0; i < n; ++i) pts.push_back({rng.normal(), rng.normal()});
    Rng seeding(100 + static_cast<std::uint64_t>(trial));
    const auto seeds = kmeanspp_seeds(pts, k, seeding);
    REQUIRE(seeds.size() == k);
    Points init;
    for (auto s : seeds) init.push_back(pts[s]);
    const KMeansResult a = lloyd(pts, init);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Points shuffled;
    for (auto i : perm) shuffled.push_back(pts[i]);
    const KMeansResult b = lloyd(shuffled, init);
    std::vector<int> a_perm;
    for (auto i : perm) a_perm.push_back(a.assignments[i]);
    CHECK(same_partition(a_perm, b.assignments));
    CHECK(std::abs(a.inertia - b.inertia) <= 1e-9);
  }
}

TEST_CASE("silhouette") {
  const Points four{{0, 0}, {0, 1}, {3, 0}, {3, 1}};
  const std::vector<int> asg{0, 0, 1, 1};
  // Every point: a = 1, b = (3 + sqrt(10)) / 2.
  const double b = (3.0 + std::sqrt(10.0)) / 2.0;
  CHECK(std::abs(silhouette(four, asg) - (b - 1.0) / b) <= 1e-12);

  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    Points pts;
    std::vector<int> a;
    for (int i = 0; i < 12; ++i) {
      pts.push_back({rng.normal(), rng.normal()});
      a.push_back(i % 3);
    }
    const double theta = rng.uniform() * 6.28, tx = rng.normal() * 10, ty = rng.normal() * 10;
    Points moved;
    for (const auto& p : pts) {
      moved.push_back({std::cos(theta) * p[0] - std::sin(theta) * p[1] + tx,
                       std::sin(theta) * p[0] + std::cos(theta) * p[1] + ty});
    }
    CHECK(std::abs(silhouette(pts, a) - silhouette(moved, a)) <= 1e-9);
  }

  const Points pairs{{0, 0}, {0, 0.01}, {1, 0}, {1, 0.01}};
  const Points spread_out{{0, 0}, {0, 0.01}, {100 * 0.01, 0}, {100 * 0.01, 0.01}};
  CHECK(silhouette(spread_out, asg) > 0.9);
  CHECK(silhouette(pairs, asg) > 0.9);

  const Points same(4, std::vector<double>{1.0, 1.0});
  CHECK(silhouette(same, asg) == 0.0);
  // Singleton scores 0; point 1 has a = 4, b = 1; point 5 has a = 4, b = 5.
  CHECK(silhouette(Points{{0}, {1}, {5}}, std::vector<int>{0, 1, 1}) ==
        doctest::Approx((0.0 + (1.0 - 4.0) / 4.0 + (5.0 - 4.0) / 5.0) / 3.0).epsilon(1e-12));
}

TEST_CASE("subgroup flagging") {
  // Two large clusters at 50% accuracy, one small perfectly predicted cluster.
  std::vector<int> asg;
  std::vector<PredictedLabel> p;
  std::vector<Satisfaction> g;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 8; ++i) {
      asg.push_back(c);
      g.push_back(i % 2 ? H : L);
      p.push_back(i % 4 < 2 ? H : L);
    }
  }
  for (int i = 0; i < 3; ++i) {
    asg.push_back(2);
    g.push_back(i % 2 ? H : L);
    p.push_back(g.back());
  }
  const SubgroupReport r = rank_subgroups(asg, p, g);
  REQUIRE(r.clusters.size() == 3);
  CHECK(r.clusters[2].id == 2);
  CHECK(r.clusters[2].exceeds);
  CHECK_FALSE(r.clusters[0].exceeds);
  CHECK(r.baseline == doctest::Approx(0.5));

  const std::vector<PredictedLabel> same(asg.size(), H);
  const std::vector<Satisfaction> same_g(asg.size(), H);
  for (const auto& c : rank_subgroups(asg, same, same_g).clusters) CHECK_FALSE(c.exceeds);

  Rng rng(44);
  const Points pts = blobs(rng, 10, 30.0, 1.0);
  std::vector<PredictedLabel> bp(20, H);
  std::vector<Satisfaction> bg(20, H);
  for (int kmax : {2, 5, 20, 40}) {
    const SubgroupReport s = subgroup_analysis(pts, bp, bg, 2, kmax, 5);
    CHECK(s.chosen_k >= 2);
    CHECK(s.chosen_k <= std::min(kmax, 20));
    std::size_t total = 0;
    for (std::size_t i = 0; i < s.clusters.size(); ++i) {
      total += s.clusters[i].size;
      if (i) CHECK(s.clusters[i - 1].size >= s.clusters[i].size);
    }
    CHECK(total == 20);
  }
  CHECK(subgroup_analysis(pts, bp, bg, 2, 20, 5).chosen_k == 2);
  CHECK_THROWS(subgroup_analysis(Points{{1.0}}, std::span(bp).first(1), std::span(bg).first(1), 2, 20, 1));
}

TEST_CASE("hidden states") {
  const Corpus c = small_corpus(12, 45);
  ModelState m = init_model(small_model(c.vocabulary), ModelRole::Sft, 46);
  auto ex = c.in_split(Split::Train);
  TrainingExample a = *ex[0], b = *ex[0];
  a.score = 1;
  b.score = 5;
  const std::vector<const TrainingExample*> two{&a, &b};
  const auto items = build_sft_dataset(two, {}, Variant::Ucot, PromptConfig{}, c.vocabulary);
  // Memorized sequences that end in different score tokens.
  std::vector<TokenSequence> inputs{items[0].tokens, items[1].tokens};
  SftConfig cfg;
  cfg.lr = 1e-2;
  cfg.max_epochs = 30;
  m = train_sft(m, items, items, cfg, 47).model;
  const auto h = extract_hidden_states(m, inputs);
  REQUIRE(h.size() == 2);
  CHECK(h[0].size() == static_cast<std::size_t>(m.config.embed_dim));
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < h[0].size(); ++i) {
    dot += h[0][i] * h[1][i];
    na += h[0][i] * h[0][i];
    nb += h[1][i] * h[1][i];
  }
  CHECK(1 - dot / std::sqrt(na * nb) > 0);
  const std::vector<TokenSequence> twice{inputs[0], inputs[0]};
  const auto same = extract_hidden_states(m, twice);
  CHECK(same[0] == same[1]);
}
