#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "taxon/embedding_store.hpp"
#include "taxon/policy.hpp"
#include "taxon/retrieval_env.hpp"

namespace taxon {

struct MetricsReport {
  std::size_t n_queries = 0;
  std::size_t n_classification = 0;  // classification-labeled episodes
  std::size_t n_discovery = 0;       // discovery-labeled episodes
  std::size_t correct_classifications = 0;
  std::size_t discovery_flagged = 0;
  /// Correct classifications over classification-labeled episodes.
  double classification_accuracy = 0.0;
  /// Discovery outputs over discovery-labeled episodes.
  double discovery_rate = 0.0;
  /// Correct classifications over all episodes. For queries whose species is
  /// in the index this is identification accuracy, bounded by Pass@k.
  double identification_accuracy = 0.0;
  /// Decisions matching the label over all episodes.
  double unified_accuracy = 0.0;
  /// k -> classification accuracy among classification-labeled episodes.
  std::map<int, double> per_k;

  nlohmann::json to_json() const;
};

/// Greedy decision per episode, tallied against the episode labels.
MetricsReport evaluate(const DecisionPolicy& policy, std::span<const Episode> episodes, int threads = 1);
MetricsReport evaluate(const PolicyParams& params, std::span<const Episode> episodes, int threads = 1);

struct PassAtKRow {
  int k = 0;
  double pass_at_k = 0.0;
};

/// One Pass@k value per k; ks must be ascending.
std::vector<PassAtKRow> passk_curve(const EmbeddingStore& store, std::span<const LabeledQuery> queries,
                                    std::span<const int> ks, int threads = 1);

struct ScalingRow {
  int k = 0;
  int n = 0;
  double accuracy = 0.0;  // identification accuracy
  double pass_at_k = 0.0;
};

inline const std::vector<int> kDefaultSweepK = {4, 8, 12, 16, 24, 32};
inline const std::vector<int> kDefaultSweepN = {1, 2, 4};

/// Re-retrieves at every (k, n) and evaluates the policy.
std::vector<ScalingRow> scaling_sweep(const DecisionPolicy& policy, const EmbeddingStore& store,
                                      std::span<const LabeledQuery> queries, std::span<const int> ks,
                                      std::span<const int> ns, int threads = 1);

struct Domain {
  std::string tag;
  const EmbeddingStore* store = nullptr;
  std::vector<LabeledQuery> queries;
};

struct CrossDomainMatrix {
  std::vector<std::string> domains;
  /// cells[i][j]: queries of domain j against the index of domain i.
  std::vector<std::vector<double>> cells;
};

/// Diagonal: classification accuracy. Off-diagonal: discovery rate. Throws
/// when an off-diagonal query species exists in the other domain's index.
CrossDomainMatrix cross_domain_matrix(const DecisionPolicy& policy, std::span<const Domain> domains, int k, int n,
                                      int threads = 1);

struct ThresholdRule {
  enum class Mode { kClsPreserving, kDiscOptimized };
  Mode mode = Mode::kClsPreserving;
  double max_relative_drop = 0.05;

  static ThresholdRule cls_preserving() { return {Mode::kClsPreserving, 0.05}; }
  static ThresholdRule disc_optimized(double drop = 0.05) { return {Mode::kDiscOptimized, drop}; }
};

struct ValidationPoint {
  double confidence = 0.0;
  bool correct = false;
};

/// Fraction of validation points accepted (confidence >= threshold) and correct.
double thresholded_accuracy(std::span<const ValidationPoint> val, double threshold);

/// Rejection threshold for maximum-softmax-probability confidence. Samples
/// with confidence strictly below the threshold are flagged as Discovery.
double msp_baseline(std::span<const double> train_confidences, std::span<const ValidationPoint> val,
                    const ThresholdRule& rule);

inline bool msp_rejects(double confidence, double threshold) { return confidence < threshold; }

/// Closed-set view of a policy: the best candidate and its probability
/// renormalized over candidates only.
struct ClosedSetPrediction {
  std::size_t candidate = 0;
  double confidence = 0.0;
};
ClosedSetPrediction closed_set_prediction(const DecisionPolicy& policy, const Episode& episode);

/// Decides with the closed-set prediction, flagging Discovery below threshold.
Decision msp_decide(const DecisionPolicy& policy, const Episode& episode, double threshold);

void write_passk_csv(const std::string& path, std::span<const PassAtKRow> rows,
                     std::span<const double> accuracy = {});
void write_scaling_csv(const std::string& path, std::span<const ScalingRow> rows);
void write_matrix_csv(const std::string& path, const CrossDomainMatrix& m);

}  // namespace taxon
