#include "taxon/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

namespace taxon {

namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

struct Tally {
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t discovery_total = 0;
  std::size_t discovery_flagged = 0;
};

Tally greedy_tally(const PolicyParams& params, std::span<const Episode> episodes) {
  LinearSoftmaxPolicy policy(params);
  Tally t;
  for (const auto& ep : episodes) {
    const auto d = policy.decide(ep);
    ++t.total;
    if (decision_matches(d, ep)) ++t.correct;
    if (ep.label.is_discovery()) {
      ++t.discovery_total;
      if (d.is_discovery()) ++t.discovery_flagged;
    }
  }
  return t;
}

double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

}  // namespace

double reward(const Decision& decision, const Episode& episode) {
  if (!decision.format_valid()) return 0.0;
  return (decision_matches(decision, episode) ? kCorrectReward : 0.0) + kFormatReward;
}

std::size_t RolloutGroup::correct_count() const {
  return static_cast<std::size_t>(
      std::count_if(rewards.begin(), rewards.end(), [](double r) { return r >= kCorrectReward; }));
}

RolloutGroup rollout_group(const PolicyParams& params, const Episode& episode, int group_size, Rng& rng) {
  if (group_size < 2) throw PreconditionError("rollout_group: G must be >= 2");
  RolloutGroup g;
  g.features = featurize(episode);
  const auto probs = action_probs(params.weights, g.features);
  const auto& old_weights = params.snapshot ? *params.snapshot : params.weights;
  g.decisions.reserve(static_cast<std::size_t>(group_size));
  for (int i = 0; i < group_size; ++i) {
    auto d = sample_action(probs, rng);
    g.rewards.push_back(reward(d, episode));
    g.old_log_probs.push_back(log_prob_and_grad(old_weights, g.features, *d.action(episode.candidates.size())).log_prob);
    g.decisions.push_back(d);
  }
  g.advantages = advantages(g.rewards);
  return g;
}

std::vector<double> advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw PreconditionError("advantages: need at least two rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd <= 1e-8) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

void GrpoConfig::validate() const {
  if (group_size < 2) throw PreconditionError("GRPO group size must be >= 2");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw PreconditionError("GRPO epsilon must be in (0, 1)");
  if (!(learning_rate > 0.0)) throw PreconditionError("GRPO learning rate must be positive");
  if (epochs < 0) throw PreconditionError("GRPO epochs must be >= 0");
  if (batch_size < 1) throw PreconditionError("GRPO batch size must be >= 1");
  if (!(class_fraction > 0.0 && class_fraction < 1.0)) {
    throw PreconditionError("GRPO class fraction must be in (0, 1)");
  }
}

ObjectiveGrad grpo_objective(std::span<const double> weights, std::span<const RolloutGroup> groups,
                             double epsilon) {
  if (groups.empty()) throw PreconditionError("grpo_objective: no groups");
  ObjectiveGrad out;
  out.grad.assign(kNumFeatures, 0.0);
  for (const auto& g : groups) {
    const std::size_t G = g.decisions.size();
    if (G == 0 || g.advantages.size() != G || g.old_log_probs.size() != G) {
      throw PreconditionError("grpo_objective: inconsistent rollout group");
    }
    double group_value = 0.0;
    std::vector<double> group_grad(kNumFeatures, 0.0);
    for (std::size_t i = 0; i < G; ++i) {
      const double adv = g.advantages[i];
      const auto action = g.decisions[i].action(g.features.num_candidates());
      if (!action) continue;  // unparseable output has no token to re-score
      const auto lp = log_prob_and_grad(weights, g.features, *action);
      const double rho = std::exp(lp.log_prob - g.old_log_probs[i]);
      const double clipped = std::clamp(rho, 1.0 - epsilon, 1.0 + epsilon);
      const double unclipped_term = rho * adv;
      const double clipped_term = clipped * adv;
      // Sequence length is 1, so the 1/T_i average is the identity here.
      if (unclipped_term <= clipped_term) {
        group_value += unclipped_term;
        for (std::size_t f = 0; f < kNumFeatures; ++f) group_grad[f] += adv * rho * lp.grad[f];
      } else {
        group_value += clipped_term;
      }
    }
    out.value += group_value / static_cast<double>(G);
    for (std::size_t f = 0; f < kNumFeatures; ++f) out.grad[f] += group_grad[f] / static_cast<double>(G);
  }
  const double m = static_cast<double>(groups.size());
  out.value /= m;
  for (auto& x : out.grad) x /= m;
  return out;
}

PolicyParams grpo_step(const PolicyParams& params, std::span<const RolloutGroup> groups, const GrpoConfig& cfg) {
  if (!params.snapshot) throw PreconditionError("grpo_step: params have no snapshot");
  const auto obj = grpo_objective(params.weights, groups, cfg.epsilon);
  if (!all_finite(obj.grad)) throw Error("grpo_step: non-finite gradient");
  PolicyParams next = params;
  for (std::size_t f = 0; f < kNumFeatures; ++f) next.weights[f] += cfg.learning_rate * obj.grad[f];
  return next;
}

ObjectiveGrad sft_objective(std::span<const double> weights, std::span<const FeatureMatrix> features,
                            std::span<const std::size_t> targets) {
  if (features.empty() || features.size() != targets.size()) {
    throw PreconditionError("sft_objective: need matching nonempty features and targets");
  }
  ObjectiveGrad out;
  out.grad.assign(kNumFeatures, 0.0);
  for (std::size_t s = 0; s < features.size(); ++s) {
    const auto lp = log_prob_and_grad(weights, features[s], targets[s]);
    out.value -= lp.log_prob;
    for (std::size_t f = 0; f < kNumFeatures; ++f) out.grad[f] -= lp.grad[f];
  }
  const double n = static_cast<double>(features.size());
  out.value /= n;
  for (auto& x : out.grad) x /= n;
  return out;
}

SftResult sft_step(const PolicyParams& params, std::span<const FeatureMatrix> features,
                   std::span<const std::size_t> targets, double learning_rate) {
  const auto obj = sft_objective(params.weights, features, targets);
  if (!std::isfinite(obj.value)) throw Error("sft_step: non-finite loss");
  SftResult out{params, obj.value};
  for (std::size_t f = 0; f < kNumFeatures; ++f) out.params.weights[f] -= learning_rate * obj.grad[f];
  return out;
}

SftResult sft_step(const PolicyParams& params, std::span<const Episode> samples, double learning_rate) {
  if (samples.empty()) throw PreconditionError("sft_step: no samples");
  std::vector<FeatureMatrix> features;
  std::vector<std::size_t> targets;
  features.reserve(samples.size());
  for (const auto& ep : samples) {
    features.push_back(featurize(ep));
    targets.push_back(ep.label_action());
  }
  return sft_step(params, features, targets, learning_rate);
}

void HardFilterRule::validate() const {
  auto inside = [&](int lo, int hi) { return lo >= 1 && hi <= group_size - 1 && lo <= hi; };
  if (group_size < 2 || !inside(class_min, class_max) || !inside(discovery_min, discovery_max)) {
    throw PreconditionError("hard filter ranges must lie strictly inside (0, G)");
  }
}

std::vector<bool> filter_hard(std::span<const RolloutStats> stats, const HardFilterRule& rule) {
  rule.validate();
  std::vector<bool> keep;
  keep.reserve(stats.size());
  for (const auto& s : stats) {
    if (s.group_size != rule.group_size) {
      throw PreconditionError(fmt::format("filter_hard: rule is for G={}, got G={}; supply ranges for that G",
                                          rule.group_size, s.group_size));
    }
    if (s.correct_count < 0 || s.correct_count > s.group_size) {
      throw PreconditionError("filter_hard: correct count outside [0, G]");
    }
    const bool discovery = s.kind == GroundTruthLabel::Kind::kDiscovery;
    const int lo = discovery ? rule.discovery_min : rule.class_min;
    const int hi = discovery ? rule.discovery_max : rule.class_max;
    keep.push_back(s.correct_count >= lo && s.correct_count <= hi);
  }
  return keep;
}

std::vector<Episode> k_weighted_sample(std::span<const Episode> episodes, int total, std::uint64_t seed) {
  if (total <= 0) throw PreconditionError("k_weighted_sample: total must be positive");
  if (episodes.empty()) throw PreconditionError("k_weighted_sample: no episodes");
  std::map<int, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < episodes.size(); ++i) buckets[episodes[i].k_requested].push_back(i);
  std::vector<double> weights;
  std::vector<const std::vector<std::size_t>*> members;
  for (const auto& [k, idx] : buckets) {
    if (k < 1) throw PreconditionError("k_weighted_sample: episode with k < 1");
    weights.push_back(static_cast<double>(k));
    members.push_back(&idx);
  }
  Rng rng(seed);
  std::discrete_distribution<std::size_t> pick_bucket(weights.begin(), weights.end());
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(total));
  for (int t = 0; t < total; ++t) {
    const auto& bucket = *members[pick_bucket(rng)];
    std::uniform_int_distribution<std::size_t> pick(0, bucket.size() - 1);
    out.push_back(episodes[bucket[pick(rng)]]);
  }
  return out;
}

std::vector<Episode> select_hard(const PolicyParams& params, std::span<const Episode> episodes,
                                 const HardFilterRule& rule, std::uint64_t seed, int threads) {
  rule.validate();
  std::vector<RolloutStats> stats(episodes.size());
  parallel_for(episodes.size(), threads, [&](std::size_t i) {
    auto rng = derive_rng(seed, i);
    const auto g = rollout_group(params, episodes[i], rule.group_size, rng);
    stats[i] = {episodes[i].label.kind(), static_cast<int>(g.correct_count()), rule.group_size};
  });
  const auto keep = filter_hard(stats, rule);
  std::vector<Episode> out;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    if (keep[i]) out.push_back(episodes[i]);
  }
  return out;
}

PolicyParams train_sft(const PolicyParams& init, std::span<const Episode> data, const SftConfig& cfg,
                       const EpochCallback& on_epoch) {
  if (cfg.steps < 0) throw PreconditionError("SFT steps must be >= 0");
  if (!(cfg.learning_rate > 0.0)) throw PreconditionError("SFT learning rate must be positive");
  PolicyParams params = init;
  if (cfg.steps == 0) return params;
  if (data.empty()) throw PreconditionError("SFT data is empty");

  std::vector<FeatureMatrix> features;
  std::vector<std::size_t> targets;
  features.reserve(data.size());
  for (const auto& ep : data) {
    features.push_back(featurize(ep));
    targets.push_back(ep.label_action());
  }
  const std::size_t batch = cfg.batch_size <= 0 ? data.size() : std::min<std::size_t>(cfg.batch_size, data.size());
  const std::size_t steps_per_epoch = (data.size() + batch - 1) / batch;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed);

  double epoch_loss = 0.0;
  std::size_t cursor = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    if (cursor == 0 && batch < data.size()) std::shuffle(order.begin(), order.end(), rng);
    std::vector<FeatureMatrix> bf;
    std::vector<std::size_t> bt;
    const std::size_t end = std::min(cursor + batch, data.size());
    for (std::size_t i = cursor; i < end; ++i) {
      bf.push_back(features[order[i]]);
      bt.push_back(targets[order[i]]);
    }
    auto res = sft_step(params, bf, bt, cfg.learning_rate);
    params = std::move(res.params);
    epoch_loss += res.loss * static_cast<double>(end - cursor);
    cursor = end == data.size() ? 0 : end;
    const bool epoch_done = cursor == 0 || step + 1 == cfg.steps;
    if (epoch_done && on_epoch) {
      const auto t = greedy_tally(params, data);
      const auto seen = cursor == 0 ? data.size() : cursor;
      on_epoch({"sft", static_cast<int>(static_cast<std::size_t>(step) / steps_per_epoch), epoch_loss / static_cast<double>(seen),
                ratio(t.correct, t.total), ratio(t.discovery_flagged, t.discovery_total), 0.0});
    }
    if (epoch_done) epoch_loss = 0.0;
  }
  return params;
}

std::vector<Episode> compose_rl_epoch(std::span<const Episode> pool, const GrpoConfig& cfg, int epoch) {
  std::vector<std::size_t> cls, disc;
  for (std::size_t i = 0; i < pool.size(); ++i) (pool[i].label.is_classification() ? cls : disc).push_back(i);
  auto rng = derive_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL, static_cast<std::uint64_t>(epoch));
  std::shuffle(cls.begin(), cls.end(), rng);
  std::shuffle(disc.begin(), disc.end(), rng);

  const double f = cfg.class_fraction;
  std::size_t n_cls = cls.size();
  std::size_t n_disc = disc.size();
  if (!cls.empty() && !disc.empty()) {
    const auto disc_for_all_cls = static_cast<std::size_t>(std::llround(static_cast<double>(n_cls) * (1.0 - f) / f));
    if (disc_for_all_cls <= n_disc) {
      n_disc = disc_for_all_cls;
    } else {
      n_cls = std::min(n_cls, static_cast<std::size_t>(std::llround(static_cast<double>(n_disc) * f / (1.0 - f))));
    }
  }
  std::vector<Episode> out;
  out.reserve(n_cls + n_disc);
  for (std::size_t i = 0; i < n_cls; ++i) out.push_back(pool[cls[i]]);
  for (std::size_t i = 0; i < n_disc; ++i) out.push_back(pool[disc[i]]);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

PolicyParams train_grpo(const PolicyParams& init, std::span<const Episode> data, const GrpoConfig& cfg,
                        const EpochCallback& on_epoch) {
  cfg.validate();
  PolicyParams params = init;
  if (cfg.epochs == 0) return params;
  if (data.empty()) throw PreconditionError("GRPO data is empty");

  std::uint64_t rollout_ordinal = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    params.refresh_snapshot();
    const auto epoch_data = compose_rl_epoch(data, cfg, epoch);
    if (epoch_data.empty()) throw Error("GRPO epoch composition is empty");
    double objective_sum = 0.0;
    std::size_t batches = 0;
    std::size_t n_cls = 0;
    for (std::size_t start = 0; start < epoch_data.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(epoch_data.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<RolloutGroup> groups(end - start);
      const auto base = rollout_ordinal;
      parallel_for(groups.size(), cfg.threads, [&](std::size_t i) {
        auto rng = derive_rng(cfg.seed, base + i);
        groups[i] = rollout_group(params, epoch_data[start + i], cfg.group_size, rng);
        groups[i].episode_index = start + i;
      });
      rollout_ordinal += groups.size();
      for (std::size_t i = start; i < end; ++i) n_cls += epoch_data[i].label.is_classification() ? 1 : 0;
      objective_sum += grpo_objective(params.weights, groups, cfg.epsilon).value;
      params = grpo_step(params, groups, cfg);
      ++batches;
    }
    if (on_epoch) {
      const auto t = greedy_tally(params, epoch_data);
      on_epoch({"grpo", epoch, objective_sum / static_cast<double>(batches), ratio(t.correct, t.total),
                ratio(t.discovery_flagged, t.discovery_total), ratio(n_cls, epoch_data.size())});
    }
  }
  params.snapshot.reset();
  return params;
}

PolicyParams train(std::span<const Episode> sft_data, std::span<const Episode> rl_data, const SftConfig& sft,
                   const GrpoConfig& grpo, const EpochCallback& on_epoch) {
  auto params = train_sft(PolicyParams{}, sft_data, sft, on_epoch);
  return train_grpo(params, rl_data, grpo, on_epoch);
}

std::string epoch_log_json(const EpochLog& log) {
  nlohmann::json j{{"stage", log.stage},
                   {"epoch", log.epoch},
                   {"loss_or_objective", log.loss_or_objective},
                   {"accuracy", log.accuracy},
                   {"discovery_rate", log.discovery_rate}};
  if (log.stage == "grpo") j["class_fraction"] = log.class_fraction;
  return j.dump();
}

}  // namespace taxon
