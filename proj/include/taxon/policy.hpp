#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taxon/common.hpp"
#include "taxon/retrieval_env.hpp"

namespace taxon {

/// A policy's answer for one episode. Actions are indexed
/// [candidate 0, ..., candidate k-1, Discovery].
class Decision {
 public:
  enum class Kind { kClassification, kDiscovery };

  static Decision classification(std::size_t candidate_index, bool format_valid = true) {
    return Decision(Kind::kClassification, candidate_index, format_valid);
  }
  static Decision discovery(bool format_valid = true) { return Decision(Kind::kDiscovery, 0, format_valid); }
  /// Unparseable output: no decision, format_valid == false.
  static Decision invalid() { return Decision(Kind::kDiscovery, 0, false, true); }
  /// Action index -> decision for an episode with `num_candidates` candidates.
  static Decision from_action(std::size_t action, std::size_t num_candidates);

  Kind kind() const { return kind_; }
  bool is_classification() const { return kind_ == Kind::kClassification && !unparsed_; }
  bool is_discovery() const { return kind_ == Kind::kDiscovery && !unparsed_; }
  bool format_valid() const { return format_valid_; }
  std::size_t candidate_index() const { return index_; }
  /// Position in action space, or nullopt when the output was unparseable.
  std::optional<std::size_t> action(std::size_t num_candidates) const;

  bool operator==(const Decision&) const = default;

 private:
  Decision(Kind kind, std::size_t index, bool format_valid, bool unparsed = false)
      : kind_(kind), index_(index), format_valid_(format_valid), unparsed_(unparsed) {}

  Kind kind_;
  std::size_t index_;
  bool format_valid_;
  bool unparsed_;
};

/// True when the decision names the labeled species, or is Discovery for a
/// discovery label.
bool decision_matches(const Decision& decision, const Episode& episode);

inline constexpr std::size_t kNumFeatures = 5;
inline constexpr std::array<const char*, kNumFeatures> kFeatureNames = {
    "mean_similarity", "max_similarity", "min_similarity", "reciprocal_rank", "discovery_bias"};

/// Row-major (k+1) x kNumFeatures; the last row is the Discovery action.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t r) const { return {values.data() + r * kNumFeatures, kNumFeatures}; }
  std::size_t num_candidates() const { return rows - 1; }
};

/// Candidate row: [mean, max, min exemplar similarity, 1/(rank+1), 0].
/// Discovery row: [-max candidate mean, -max exemplar similarity, 0, 0, 1].
/// The last column is a Discovery offset; its weight acts as the threshold.
FeatureMatrix featurize(const Episode& episode);

struct PolicyParams {
  std::vector<double> weights = std::vector<double>(kNumFeatures, 0.0);
  std::optional<std::vector<double>> snapshot;

  /// Copies the current weights into the old-policy snapshot.
  void refresh_snapshot() { snapshot = weights; }
};

void save_params(const std::string& path, const PolicyParams& params);
PolicyParams load_params(const std::string& path);

std::vector<double> action_scores(std::span<const double> weights, const FeatureMatrix& features);
/// Numerically stable softmax of the action scores. Throws on non-finite score.
std::vector<double> action_probs(std::span<const double> weights, const FeatureMatrix& features);
inline std::vector<double> action_probs(const PolicyParams& params, const FeatureMatrix& features) {
  return action_probs(params.weights, features);
}
std::vector<double> softmax(std::span<const double> scores);

/// Categorical draw; the reference policy always emits well-formed output.
Decision sample_action(std::span<const double> probs, Rng& rng);

struct LogProbGrad {
  double log_prob = 0.0;
  std::vector<double> grad;
};

/// log pi(a) and its gradient phi(a) - sum_b pi(b) phi(b).
LogProbGrad log_prob_and_grad(std::span<const double> weights, const FeatureMatrix& features, std::size_t action);
inline LogProbGrad log_prob_and_grad(const PolicyParams& params, const FeatureMatrix& features,
                                     const Decision& action) {
  auto a = action.action(features.num_candidates());
  if (!a) throw PreconditionError("log_prob_and_grad: decision has no action");
  return log_prob_and_grad(params.weights, features, *a);
}

/// Anything that maps an episode to a distribution over its actions and a
/// greedy decision. Evaluation and the MSP baseline work against this.
class DecisionPolicy {
 public:
  virtual ~DecisionPolicy() = default;
  virtual std::vector<double> probabilities(const Episode& episode) const = 0;
  /// Argmax action; ties go to the lowest index.
  virtual Decision decide(const Episode& episode) const;
};

class LinearSoftmaxPolicy final : public DecisionPolicy {
 public:
  explicit LinearSoftmaxPolicy(PolicyParams params) : params_(std::move(params)) {}
  std::vector<double> probabilities(const Episode& episode) const override;
  const PolicyParams& params() const { return params_; }

 private:
  PolicyParams params_;
};

}  // namespace taxon
