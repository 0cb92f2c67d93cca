#include "taxon/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "taxon/common.hpp"

namespace taxon {

using json = nlohmann::json;

namespace {

double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write {}", path));
  return out;
}

}  // namespace

json MetricsReport::to_json() const {
  json per = json::object();
  for (const auto& [k, acc] : per_k) per[std::to_string(k)] = acc;
  return {{"n_queries", n_queries},
          {"n_classification", n_classification},
          {"n_discovery", n_discovery},
          {"classification_accuracy", classification_accuracy},
          {"discovery_rate", discovery_rate},
          {"identification_accuracy", identification_accuracy},
          {"unified_accuracy", unified_accuracy},
          {"per_k", std::move(per)}};
}

MetricsReport evaluate(const DecisionPolicy& policy, std::span<const Episode> episodes, int threads) {
  if (episodes.empty()) throw PreconditionError("evaluate: no episodes");
  std::vector<Decision> decisions(episodes.size(), Decision::invalid());
  parallel_for(episodes.size(), threads, [&](std::size_t i) { decisions[i] = policy.decide(episodes[i]); });

  MetricsReport r;
  std::map<int, std::pair<std::size_t, std::size_t>> per_k;  // k -> (correct, total)
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& ep = episodes[i];
    const auto& d = decisions[i];
    ++r.n_queries;
    if (ep.label.is_classification()) {
      ++r.n_classification;
      auto& slot = per_k[ep.k_requested];
      ++slot.second;
      if (decision_matches(d, ep)) {
        ++r.correct_classifications;
        ++slot.first;
      }
    } else {
      ++r.n_discovery;
      if (d.is_discovery()) ++r.discovery_flagged;
    }
  }
  r.classification_accuracy = ratio(r.correct_classifications, r.n_classification);
  r.discovery_rate = ratio(r.discovery_flagged, r.n_discovery);
  r.identification_accuracy = ratio(r.correct_classifications, r.n_queries);
  r.unified_accuracy = ratio(r.correct_classifications + r.discovery_flagged, r.n_queries);
  for (const auto& [k, ct] : per_k) r.per_k[k] = ratio(ct.first, ct.second);
  return r;
}

MetricsReport evaluate(const PolicyParams& params, std::span<const Episode> episodes, int threads) {
  return evaluate(LinearSoftmaxPolicy(params), episodes, threads);
}

std::vector<PassAtKRow> passk_curve(const EmbeddingStore& store, std::span<const LabeledQuery> queries,
                                    std::span<const int> ks, int threads) {
  if (!std::is_sorted(ks.begin(), ks.end())) throw PreconditionError("passk_curve: ks must be ascending");
  std::vector<PassAtKRow> rows;
  rows.reserve(ks.size());
  for (int k : ks) rows.push_back({k, pass_at_k(store, queries, k, threads)});
  return rows;
}

std::vector<ScalingRow> scaling_sweep(const DecisionPolicy& policy, const EmbeddingStore& store,
                                      std::span<const LabeledQuery> queries, std::span<const int> ks,
                                      std::span<const int> ns, int threads) {
  if (ks.empty() || ns.empty()) throw PreconditionError("scaling_sweep: empty grid");
  std::vector<ScalingRow> rows;
  for (int k : ks) {
    const double ceiling = pass_at_k(store, queries, k, threads);
    for (int n : ns) {
      const auto episodes = make_episodes(store, queries, k, n, {}, threads);
      rows.push_back({k, n, evaluate(policy, episodes, threads).identification_accuracy, ceiling});
    }
  }
  return rows;
}

CrossDomainMatrix cross_domain_matrix(const DecisionPolicy& policy, std::span<const Domain> domains, int k, int n,
                                      int threads) {
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].store == nullptr) throw PreconditionError(fmt::format("domain {} has no store", domains[i].tag));
    for (std::size_t j = 0; j < domains.size(); ++j) {
      if (i == j) continue;
      std::set<std::string> overlap;
      for (const auto& q : domains[j].queries) {
        if (domains[i].store->has_species(q.species_id)) overlap.insert(q.species_id);
      }
      if (!overlap.empty()) {
        throw Error(fmt::format("species overlap between index '{}' and queries '{}': {}", domains[i].tag,
                                domains[j].tag, fmt::join(overlap, ", ")));
      }
    }
  }
  CrossDomainMatrix m;
  for (const auto& d : domains) m.domains.push_back(d.tag);
  m.cells.assign(domains.size(), std::vector<double>(domains.size(), 0.0));
  for (std::size_t i = 0; i < domains.size(); ++i) {
    for (std::size_t j = 0; j < domains.size(); ++j) {
      const auto episodes = make_episodes(*domains[i].store, domains[j].queries, k, n, domains[i].tag, threads);
      const auto report = evaluate(policy, episodes, threads);
      m.cells[i][j] = i == j ? report.classification_accuracy : report.discovery_rate;
    }
  }
  return m;
}

double thresholded_accuracy(std::span<const ValidationPoint> val, double threshold) {
  std::size_t ok = 0;
  for (const auto& v : val) {
    if (v.correct && !msp_rejects(v.confidence, threshold)) ++ok;
  }
  return ratio(ok, val.size());
}

double msp_baseline(std::span<const double> train_confidences, std::span<const ValidationPoint> val,
                    const ThresholdRule& rule) {
  if (train_confidences.empty()) throw PreconditionError("msp_baseline: no training confidences");
  const double preserving = *std::min_element(train_confidences.begin(), train_confidences.end());
  if (rule.mode == ThresholdRule::Mode::kClsPreserving) return preserving;

  if (val.empty()) throw PreconditionError("msp_baseline: no validation points");
  if (!(rule.max_relative_drop > 0.0 && rule.max_relative_drop < 1.0)) {
    throw PreconditionError("msp_baseline: max relative drop must be in (0, 1)");
  }
  const double floor = (1.0 - rule.max_relative_drop) * thresholded_accuracy(val, preserving);
  std::vector<double> candidates;
  candidates.reserve(val.size());
  for (const auto& v : val) {
    if (v.confidence > preserving) candidates.push_back(v.confidence);
  }
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  // Accuracy is nonincreasing in the threshold; walk up until it breaks.
  double best = preserving;
  for (double t : candidates) {
    if (thresholded_accuracy(val, t) + 1e-12 < floor) break;
    best = t;
  }
  return best;
}

ClosedSetPrediction closed_set_prediction(const DecisionPolicy& policy, const Episode& episode) {
  const auto p = policy.probabilities(episode);
  const std::size_t k = episode.candidates.size();
  double mass = 0.0;
  std::size_t best = 0;
  for (std::size_t j = 0; j < k; ++j) {
    mass += p[j];
    if (p[j] > p[best]) best = j;
  }
  return {best, mass > 0.0 ? p[best] / mass : 0.0};
}

Decision msp_decide(const DecisionPolicy& policy, const Episode& episode, double threshold) {
  const auto pred = closed_set_prediction(policy, episode);
  if (msp_rejects(pred.confidence, threshold)) return Decision::discovery();
  return Decision::classification(pred.candidate);
}

void write_passk_csv(const std::string& path, std::span<const PassAtKRow> rows, std::span<const double> accuracy) {
  auto out = open_csv(path);
  out << (accuracy.empty() ? "k,pass_at_k\n" : "k,pass_at_k,accuracy\n");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << fmt::format("{},{:.6f}", rows[i].k, rows[i].pass_at_k);
    if (!accuracy.empty()) out << fmt::format(",{:.6f}", accuracy[i]);
    out << "\n";
  }
}

void write_scaling_csv(const std::string& path, std::span<const ScalingRow> rows) {
  auto out = open_csv(path);
  out << "k,n,accuracy\n";
  for (const auto& r : rows) out << fmt::format("{},{},{:.6f}\n", r.k, r.n, r.accuracy);
}

void write_matrix_csv(const std::string& path, const CrossDomainMatrix& m) {
  auto out = open_csv(path);
  out << "row_tag,col_tag,value,cell_kind\n";
  for (std::size_t i = 0; i < m.domains.size(); ++i) {
    for (std::size_t j = 0; j < m.domains.size(); ++j) {
      out << fmt::format("{},{},{:.6f},{}\n", m.domains[i], m.domains[j], m.cells[i][j],
                         i == j ? "classification_accuracy" : "discovery_rate");
    }
  }
}

}  // namespace taxon
