#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "taxon/policy.hpp"
#include "taxon/retrieval_env.hpp"

namespace taxon {

inline constexpr double kCorrectReward = 1.0;
inline constexpr double kFormatReward = 0.1;

/// 1 for a correct decision plus 0.1 for well-formed output; malformed output
/// earns nothing. Values are {0, 0.1, 1.1}.
double reward(const Decision& decision, const Episode& episode);

struct RolloutGroup {
  std::size_t episode_index = 0;
  FeatureMatrix features;
  std::vector<Decision> decisions;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> old_log_probs;

  std::size_t correct_count() const;
};

/// G samples from the current weights; old log-probs come from the snapshot
/// (current weights when no snapshot is held).
RolloutGroup rollout_group(const PolicyParams& params, const Episode& episode, int group_size, Rng& rng);

/// (r - mean) / population std; exact zeros when std <= 1e-8.
std::vector<double> advantages(std::span<const double> rewards);

struct GrpoConfig {
  int group_size = 8;
  double epsilon = 0.2;
  double learning_rate = 0.05;
  int epochs = 2;
  int batch_size = 64;
  std::uint64_t seed = 0;
  double class_fraction = 0.9;
  int threads = 1;

  void validate() const;
};

struct ObjectiveGrad {
  double value = 0.0;
  std::vector<double> grad;
};

/// Clipped surrogate averaged over rollouts in each group and then over
/// groups. Sequence length is 1 for the reference policy. The gradient is
/// zero for rollouts whose clipped branch is the active minimum.
ObjectiveGrad grpo_objective(std::span<const double> weights, std::span<const RolloutGroup> groups,
                             double epsilon);

/// One ascent step on the clipped surrogate. Requires params.snapshot.
PolicyParams grpo_step(const PolicyParams& params, std::span<const RolloutGroup> groups, const GrpoConfig& cfg);

/// Mean negative log-likelihood of the labeled action.
ObjectiveGrad sft_objective(std::span<const double> weights, std::span<const FeatureMatrix> features,
                            std::span<const std::size_t> targets);

struct SftResult {
  PolicyParams params;
  double loss = 0.0;  // before the step
};
SftResult sft_step(const PolicyParams& params, std::span<const Episode> samples, double learning_rate);
SftResult sft_step(const PolicyParams& params, std::span<const FeatureMatrix> features,
                   std::span<const std::size_t> targets, double learning_rate);

struct HardFilterRule {
  int group_size = 8;
  int class_min = 1;
  int class_max = 7;
  int discovery_min = 1;
  int discovery_max = 3;

  void validate() const;
};

struct RolloutStats {
  GroundTruthLabel::Kind kind;
  int correct_count;
  int group_size;
};

/// Keep flags for partially solved samples. Throws when a stat's group size
/// differs from the rule's.
std::vector<bool> filter_hard(std::span<const RolloutStats> stats, const HardFilterRule& rule = {});

/// Draws `total` episodes with replacement; the probability of drawing from
/// the k bucket is proportional to k among the k values present, uniform
/// within a bucket.
std::vector<Episode> k_weighted_sample(std::span<const Episode> episodes, int total, std::uint64_t seed);

/// Rolls out every episode, counts correct rollouts, and keeps the hard ones.
std::vector<Episode> select_hard(const PolicyParams& params, std::span<const Episode> episodes,
                                 const HardFilterRule& rule, std::uint64_t seed, int threads = 1);

struct SftConfig {
  int steps = 200;
  double learning_rate = 0.5;
  int batch_size = 0;  // 0: full batch
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::string stage;
  int epoch = 0;
  double loss_or_objective = 0.0;
  double accuracy = 0.0;
  double discovery_rate = 0.0;
  double class_fraction = 0.0;  // grpo only
};

using EpochCallback = std::function<void(const EpochLog&)>;

PolicyParams train_sft(const PolicyParams& init, std::span<const Episode> data, const SftConfig& cfg,
                       const EpochCallback& on_epoch = {});

/// Episodes for one GRPO epoch, composed at cfg.class_fraction
/// classification (as many as the pool allows) and shuffled.
std::vector<Episode> compose_rl_epoch(std::span<const Episode> pool, const GrpoConfig& cfg, int epoch);

/// GRPO epochs with a snapshot refresh at the start of each epoch.
PolicyParams train_grpo(const PolicyParams& init, std::span<const Episode> data, const GrpoConfig& cfg,
                        const EpochCallback& on_epoch = {});

/// SFT followed by GRPO.
PolicyParams train(std::span<const Episode> sft_data, std::span<const Episode> rl_data, const SftConfig& sft,
                   const GrpoConfig& grpo, const EpochCallback& on_epoch = {});

std::string epoch_log_json(const EpochLog& log);

}  // namespace taxon
