#include "taxon/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <json.hpp>

namespace taxon {

using json = nlohmann::json;

Decision Decision::from_action(std::size_t action, std::size_t num_candidates) {
  if (action > num_candidates) {
    throw PreconditionError(fmt::format("action {} out of range for {} candidates", action, num_candidates));
  }
  return action == num_candidates ? discovery() : classification(action);
}

std::optional<std::size_t> Decision::action(std::size_t num_candidates) const {
  if (unparsed_) return std::nullopt;
  if (kind_ == Kind::kDiscovery) return num_candidates;
  if (index_ >= num_candidates) return std::nullopt;
  return index_;
}

bool decision_matches(const Decision& decision, const Episode& episode) {
  if (decision.is_discovery()) return episode.label.is_discovery();
  if (!decision.is_classification() || !episode.label.is_classification()) return false;
  const auto idx = decision.candidate_index();
  return idx < episode.candidates.size() && episode.candidates[idx].species_id == episode.label.species_id();
}

FeatureMatrix featurize(const Episode& episode) {
  if (episode.candidates.empty()) throw PreconditionError("featurize: episode has no candidates");
  const std::size_t k = episode.candidates.size();
  FeatureMatrix fm;
  fm.rows = k + 1;
  fm.values.assign(fm.rows * kNumFeatures, 0.0);
  double best_mean = -std::numeric_limits<double>::infinity();
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    const auto& ex = episode.candidates[j].exemplars;
    if (ex.empty()) throw PreconditionError(fmt::format("featurize: candidate {} has no exemplars", j));
    double sum = 0.0;
    double hi = -std::numeric_limits<double>::infinity();
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& e : ex) {
      sum += e.similarity;
      hi = std::max(hi, e.similarity);
      lo = std::min(lo, e.similarity);
    }
    const double mean = sum / static_cast<double>(ex.size());
    double* row = fm.values.data() + j * kNumFeatures;
    row[0] = mean;
    row[1] = hi;
    row[2] = lo;
    row[3] = 1.0 / static_cast<double>(j + 1);
    best_mean = std::max(best_mean, mean);
    best_sim = std::max(best_sim, hi);
  }
  double* disc = fm.values.data() + k * kNumFeatures;
  disc[0] = -best_mean;
  disc[1] = -best_sim;
  // Discovery-only offset. A constant shared by every row would cancel in the
  // softmax and leave no way to set an open-set threshold.
  disc[4] = 1.0;
  for (double v : fm.values) {
    if (!std::isfinite(v)) throw Error(fmt::format("featurize: non-finite feature in episode {}", episode.query_id));
  }
  return fm;
}

void save_params(const std::string& path, const PolicyParams& params) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write {}", path));
  json names = json::array();
  for (const char* n : kFeatureNames) names.push_back(n);
  out << json{{"weights", params.weights}, {"feature_names", names}}.dump(2) << "\n";
}

PolicyParams load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open {}", path));
  PolicyParams p;
  try {
    auto j = json::parse(in);
    p.weights = j.at("weights").get<std::vector<double>>();
    if (j.contains("feature_names")) {
      auto names = j["feature_names"].get<std::vector<std::string>>();
      if (names.size() != kNumFeatures) throw Error("feature_names length mismatch");
      for (std::size_t i = 0; i < kNumFeatures; ++i) {
        if (names[i] != kFeatureNames[i]) throw Error(fmt::format("unexpected feature '{}'", names[i]));
      }
    }
  } catch (const json::exception& e) {
    throw Error(fmt::format("corrupt policy file {}: {}", path, e.what()));
  }
  if (p.weights.size() != kNumFeatures) {
    throw Error(fmt::format("policy file {} has {} weights, expected {}", path, p.weights.size(), kNumFeatures));
  }
  for (double w : p.weights) {
    if (!std::isfinite(w)) throw Error(fmt::format("policy file {} has non-finite weights", path));
  }
  return p;
}

std::vector<double> action_scores(std::span<const double> weights, const FeatureMatrix& features) {
  if (weights.size() != kNumFeatures) {
    throw PreconditionError(fmt::format("expected {} weights, got {}", kNumFeatures, weights.size()));
  }
  std::vector<double> scores(features.rows);
  for (std::size_t r = 0; r < features.rows; ++r) {
    const auto row = features.row(r);
    double s = 0.0;
    for (std::size_t f = 0; f < kNumFeatures; ++f) s += weights[f] * row[f];
    scores[r] = s;
  }
  return scores;
}

std::vector<double> softmax(std::span<const double> scores) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double s : scores) {
    if (!std::isfinite(s)) throw Error("non-finite action score");
    hi = std::max(hi, s);
  }
  std::vector<double> p(scores.size());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = std::exp(scores[i] - hi);
    z += p[i];
  }
  for (auto& x : p) x /= z;
  return p;
}

std::vector<double> action_probs(std::span<const double> weights, const FeatureMatrix& features) {
  return softmax(action_scores(weights, features));
}

Decision sample_action(std::span<const double> probs, Rng& rng) {
  if (probs.size() < 2) throw PreconditionError("sample_action: need at least one candidate plus Discovery");
  std::discrete_distribution<std::size_t> dist(probs.begin(), probs.end());
  return Decision::from_action(dist(rng), probs.size() - 1);
}

LogProbGrad log_prob_and_grad(std::span<const double> weights, const FeatureMatrix& features, std::size_t action) {
  if (action >= features.rows) throw PreconditionError(fmt::format("action {} out of range", action));
  const auto scores = action_scores(weights, features);
  double hi = -std::numeric_limits<double>::infinity();
  for (double s : scores) {
    if (!std::isfinite(s)) throw Error("non-finite action score");
    hi = std::max(hi, s);
  }
  double z = 0.0;
  for (double s : scores) z += std::exp(s - hi);
  const double log_z = hi + std::log(z);

  LogProbGrad out;
  out.log_prob = scores[action] - log_z;
  out.grad.assign(kNumFeatures, 0.0);
  const auto chosen = features.row(action);
  for (std::size_t f = 0; f < kNumFeatures; ++f) out.grad[f] = chosen[f];
  for (std::size_t r = 0; r < features.rows; ++r) {
    const double p = std::exp(scores[r] - log_z);
    const auto row = features.row(r);
    for (std::size_t f = 0; f < kNumFeatures; ++f) out.grad[f] -= p * row[f];
  }
  return out;
}

Decision DecisionPolicy::decide(const Episode& episode) const {
  const auto p = probabilities(episode);
  const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  return Decision::from_action(best, episode.candidates.size());
}

std::vector<double> LinearSoftmaxPolicy::probabilities(const Episode& episode) const {
  return action_probs(params_, featurize(episode));
}

}  // namespace taxon
