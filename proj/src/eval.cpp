#include "satpref/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace satpref {

namespace {

double safe_div(double a, double b) { return b == 0.0 ? 0.0 : a / b; }

ClassScores class_scores(std::span<const PredictedLabel> preds, std::span<const Satisfaction> golds, Satisfaction c) {
  std::size_t tp = 0, fp = 0, fn = 0, support = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool gold = golds[i] == c;
    const bool pred = preds[i].has_value() && *preds[i] == c;
    support += gold ? 1 : 0;
    if (gold && pred) ++tp;
    else if (pred) ++fp;
    else if (gold) ++fn;
  }
  ClassScores s;
  s.support = support;
  s.precision = safe_div(static_cast<double>(tp), static_cast<double>(tp + fp));
  s.recall = safe_div(static_cast<double>(tp), static_cast<double>(tp + fn));
  s.f1 = safe_div(2.0 * s.precision * s.recall, s.precision + s.recall);
  return s;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

F1Report f1_report(std::span<const PredictedLabel> preds, std::span<const Satisfaction> golds) {
  if (preds.size() != golds.size()) throw std::invalid_argument("f1_report: length mismatch");
  if (preds.empty()) throw std::invalid_argument("f1_report: empty input");
  F1Report r;
  r.low = class_scores(preds, golds, Satisfaction::Low);
  r.high = class_scores(preds, golds, Satisfaction::High);
  for (const auto& p : preds) r.absent += p ? 0 : 1;
  r.f1_macro = (r.low.f1 + r.high.f1) / 2.0;
  const double n = static_cast<double>(r.low.support + r.high.support);
  r.f1_weighted = (static_cast<double>(r.low.support) * r.low.f1 + static_cast<double>(r.high.support) * r.high.f1) / n;
  return r;
}

GroupwiseReport groupwise_eval(std::span<const PredictedLabel> preds, std::span<const Satisfaction> golds,
                               std::span<const Group> groups) {
  if (preds.size() != golds.size() || preds.size() != groups.size()) {
    throw std::invalid_argument("groupwise_eval: length mismatch");
  }
  GroupwiseReport out;
  out.combined = f1_report(preds, golds);
  for (Group g : {Group::Minority, Group::Majority}) {
    std::vector<PredictedLabel> p;
    std::vector<Satisfaction> y;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (groups[i] != g) continue;
      p.push_back(preds[i]);
      y.push_back(golds[i]);
    }
    if (p.empty()) continue;
    (g == Group::Minority ? out.minority : out.majority) = f1_report(p, y);
  }
  return out;
}

std::string f1_csv_header() {
  return "label,f1_low,f1_high,f1_weighted,f1_macro,support_low,support_high,absent";
}

std::string f1_csv_row(const std::string& label, const F1Report& r) {
  std::ostringstream ss;
  ss.precision(6);
  ss << std::fixed << label << ',' << r.low.f1 << ',' << r.high.f1 << ',' << r.f1_weighted << ',' << r.f1_macro << ','
     << r.low.support << ',' << r.high.support << ',' << r.absent;
  return ss.str();
}

std::vector<std::vector<double>> extract_hidden_states(const ModelState& model, std::span<const TokenSequence> inputs) {
  std::vector<std::vector<double>> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    ForwardPass pass(model, in, false);
    auto row = pass.hidden().row(in.size() - 1);
    out.emplace_back(row.begin(), row.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// k-means++

std::vector<std::size_t> kmeanspp_seeds(const Points& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.size();
  if (k < 1 || k > n) throw std::invalid_argument("kmeanspp: need 1 <= k <= n");
  std::vector<std::size_t> seeds{rng.below(n)};
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points[i], points[seeds[0]]);
  while (seeds.size() < k) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t next;
    if (total > 0.0) {
      next = rng.categorical(d2);
    } else {
      // Every point coincides with a seed; pick an unused index.
      std::vector<std::size_t> unused;
      for (std::size_t i = 0; i < n; ++i) {
        if (std::find(seeds.begin(), seeds.end(), i) == seeds.end()) unused.push_back(i);
      }
      next = unused[rng.below(unused.size())];
    }
    seeds.push_back(next);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points[i], points[next]));
  }
  return seeds;
}

KMeansResult lloyd(const Points& points, Points centroids) {
  const std::size_t n = points.size();
  const std::size_t k = centroids.size();
  if (k == 0 || k > n) throw std::invalid_argument("lloyd: need 1 <= k <= n");
  const std::size_t dim = points[0].size();
  KMeansResult r;
  r.assignments.assign(n, 0);
  auto assign = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double d = sq_dist(points[i], centroids[c]);
        if (d < best) {
          best = d;
          arg = static_cast<int>(c);
        }
      }
      r.assignments[i] = arg;
    }
  };
  assign();
  for (r.iterations = 1; r.iterations <= 100; ++r.iterations) {
    Points next(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(r.assignments[i]);
      ++count[c];
      for (std::size_t j = 0; j < dim; ++j) next[c][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;
      for (double& v : next[c]) v /= static_cast<double>(count[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] != 0) continue;
      std::size_t far = 0;
      double worst = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto a = static_cast<std::size_t>(r.assignments[i]);
        if (count[a] <= 1) continue;
        const double d = sq_dist(points[i], next[a]);
        if (d > worst) {
          worst = d;
          far = i;
        }
      }
      --count[static_cast<std::size_t>(r.assignments[far])];
      r.assignments[far] = static_cast<int>(c);
      count[c] = 1;
      next[c] = points[far];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, std::sqrt(sq_dist(next[c], centroids[c])));
    centroids = std::move(next);
    assign();
    if (shift < 1e-8) break;
  }
  r.iterations = std::min(r.iterations, 100);
  r.centroids = std::move(centroids);
  for (std::size_t i = 0; i < n; ++i) r.inertia += sq_dist(points[i], r.centroids[static_cast<std::size_t>(r.assignments[i])]);
  return r;
}

KMeansResult kmeanspp(const Points& points, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  const auto seeds = kmeanspp_seeds(points, k, rng);
  Points init;
  for (auto s : seeds) init.push_back(points[s]);
  return lloyd(points, std::move(init));
}

double silhouette(const Points& points, std::span<const int> assignments) {
  const std::size_t n = points.size();
  if (assignments.size() != n) throw std::invalid_argument("silhouette: length mismatch");
  std::map<int, std::size_t> sizes;
  for (int a : assignments) ++sizes[a];
  if (sizes.size() < 2) throw std::invalid_argument("silhouette: need at least 2 non-empty clusters");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (sizes[assignments[i]] == 1) continue;
    std::map<int, double> sum;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      sum[assignments[j]] += std::sqrt(sq_dist(points[i], points[j]));
    }
    const double a = sum[assignments[i]] / static_cast<double>(sizes[assignments[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [c, s] : sum) {
      if (c == assignments[i]) continue;
      b = std::min(b, s / static_cast<double>(sizes[c]));
    }
    const double m = std::max(a, b);
    total += m == 0.0 ? 0.0 : (b - a) / m;
  }
  return total / static_cast<double>(n);
}

SubgroupReport rank_subgroups(std::span<const int> assignments, std::span<const PredictedLabel> preds,
                              std::span<const Satisfaction> golds) {
  if (assignments.size() != preds.size() || preds.size() != golds.size()) {
    throw std::invalid_argument("rank_subgroups: length mismatch");
  }
  std::map<int, std::pair<std::vector<PredictedLabel>, std::vector<Satisfaction>>> members;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    members[assignments[i]].first.push_back(preds[i]);
    members[assignments[i]].second.push_back(golds[i]);
  }
  if (members.size() < 2) throw std::invalid_argument("rank_subgroups: need at least 2 clusters");
  SubgroupReport r;
  r.chosen_k = static_cast<int>(members.size());
  r.assignments.assign(assignments.begin(), assignments.end());
  for (const auto& [id, m] : members) {
    r.clusters.push_back({id, m.first.size(), f1_report(m.first, m.second).f1_weighted, false});
  }
  std::stable_sort(r.clusters.begin(), r.clusters.end(), [](const SubgroupCluster& a, const SubgroupCluster& b) {
    return a.size != b.size ? a.size > b.size : a.id < b.id;
  });
  r.baseline = (r.clusters[0].weighted_f1 + r.clusters[1].weighted_f1) / 2.0;
  for (std::size_t i = 2; i < r.clusters.size(); ++i) r.clusters[i].exceeds = r.clusters[i].weighted_f1 > r.baseline;
  return r;
}

SubgroupReport subgroup_analysis(const Points& points, std::span<const PredictedLabel> preds,
                                 std::span<const Satisfaction> golds, int k_min, int k_max, std::uint64_t seed) {
  const int n = static_cast<int>(points.size());
  if (n < 2) throw std::invalid_argument("subgroup_analysis: group needs at least 2 members");
  k_min = std::max(k_min, 2);
  k_max = std::min(k_max, n);
  if (k_min > k_max) throw std::invalid_argument("subgroup_analysis: empty k range");
  double best = -std::numeric_limits<double>::infinity();
  KMeansResult chosen;
  for (int k = k_min; k <= k_max; ++k) {
    KMeansResult km = kmeanspp(points, static_cast<std::size_t>(k), derive_seed(seed, static_cast<std::uint64_t>(k)));
    const double s = silhouette(points, km.assignments);
    if (s > best) {
      best = s;
      chosen = std::move(km);
    }
  }
  SubgroupReport r = rank_subgroups(chosen.assignments, preds, golds);
  r.silhouette = best;
  return r;
}

}  // namespace satpref
