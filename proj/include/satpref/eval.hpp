#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "satpref/corpus.hpp"
#include "satpref/lm.hpp"

namespace satpref {

// A prediction that could not be parsed is nullopt.
using PredictedLabel = std::optional<Satisfaction>;

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct F1Report {
  ClassScores low;
  ClassScores high;
  double f1_weighted = 0.0;
  double f1_macro = 0.0;
  std::size_t absent = 0;  // predictions that carried no label

  double f1_low() const { return low.f1; }
  double f1_high() const { return high.f1; }
};

// Absent predictions are never true positives: they count against the
// recall of their gold class and against no precision.
F1Report f1_report(std::span<const PredictedLabel> preds, std::span<const Satisfaction> golds);

struct GroupwiseReport {
  std::optional<F1Report> minority;  // nullopt when the group is empty
  std::optional<F1Report> majority;
  F1Report combined;
};
GroupwiseReport groupwise_eval(std::span<const PredictedLabel> preds, std::span<const Satisfaction> golds,
                               std::span<const Group> groups);

std::string f1_csv_header();
std::string f1_csv_row(const std::string& label, const F1Report& r);

// Final-layer hidden state (after the final norm) at the last position of each input.
std::vector<std::vector<double>> extract_hidden_states(const ModelState& model, std::span<const TokenSequence> inputs);

// ---------------------------------------------------------------------------
// Clustering

using Points = std::vector<std::vector<double>>;

struct KMeansResult {
  std::vector<int> assignments;
  Points centroids;
  double inertia = 0.0;
  int iterations = 0;
};

// D^2-weighted seeding; returns indices of the chosen initial centers.
std::vector<std::size_t> kmeanspp_seeds(const Points& points, std::size_t k, Rng& rng);
// Lloyd iterations from the given centroids until every centroid moves less
// than 1e-8 or after 100 iterations. Empty clusters are re-seeded at the
// point farthest from its assigned centroid.
KMeansResult lloyd(const Points& points, Points centroids);
KMeansResult kmeanspp(const Points& points, std::size_t k, std::uint64_t seed);

// Mean silhouette with Euclidean distance; singleton members score 0.
double silhouette(const Points& points, std::span<const int> assignments);

struct SubgroupCluster {
  int id = 0;
  std::size_t size = 0;
  double weighted_f1 = 0.0;
  bool exceeds = false;
};

struct SubgroupReport {
  int chosen_k = 0;
  double silhouette = 0.0;
  double baseline = 0.0;  // mean weighted F1 of the two largest clusters
  std::vector<SubgroupCluster> clusters;  // size descending, then id
  std::vector<int> assignments;
};

SubgroupReport subgroup_analysis(const Points& points, std::span<const PredictedLabel> preds,
                                 std::span<const Satisfaction> golds, int k_min, int k_max, std::uint64_t seed);
// Ranks the clusters of a fixed assignment and applies the flagging rule.
SubgroupReport rank_subgroups(std::span<const int> assignments, std::span<const PredictedLabel> preds,
                              std::span<const Satisfaction> golds);

}  // namespace satpref
