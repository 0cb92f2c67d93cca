#include "taxon/retrieval_env.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_set>

#include <fmt/format.h>

#include "taxon/common.hpp"

namespace taxon {

using json = nlohmann::json;

std::size_t Episode::label_action() const {
  if (label.is_classification()) {
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      if (candidates[j].species_id == label.species_id()) return j;
    }
    throw Error(fmt::format("episode {}: label species {} is not a candidate", query_id, label.species_id()));
  }
  return candidates.size();
}

std::vector<SpeciesCandidate> retrieve_candidates(const EmbeddingStore& store, std::span<const float> query,
                                                  int k, int n, const std::string& exclude_image_id) {
  if (k < 1) throw PreconditionError("retrieve_candidates: k must be >= 1");
  if (n < 1) throw PreconditionError("retrieve_candidates: n must be >= 1");
  const auto sims = store.similarities(query);
  std::size_t excluded = store.size();
  if (!exclude_image_id.empty()) {
    if (auto pos = store.find_image(exclude_image_id)) excluded = *pos;
  }

  // A species' first appearance in the global ranking is its best image, so
  // ordering species by their best image reproduces first-appearance order.
  struct SpeciesBest {
    const std::vector<std::size_t>* positions;
    std::size_t best;
  };
  std::vector<SpeciesBest> species;
  species.reserve(store.species_count());
  for (const auto& sid : store.species_ids()) {
    const auto& positions = store.species_positions(sid);
    std::size_t best = store.size();
    for (auto p : positions) {
      if (p == excluded) continue;
      if (best == store.size() || store.ranks_before(p, sims[p], best, sims[best])) best = p;
    }
    if (best != store.size()) species.push_back({&positions, best});
  }
  const auto take = std::min(species.size(), static_cast<std::size_t>(k));
  auto by_best = [&](const SpeciesBest& a, const SpeciesBest& b) {
    return store.ranks_before(a.best, sims[a.best], b.best, sims[b.best]);
  };
  std::partial_sort(species.begin(), species.begin() + static_cast<std::ptrdiff_t>(take), species.end(), by_best);

  std::vector<SpeciesCandidate> out;
  out.reserve(take);
  for (std::size_t j = 0; j < take; ++j) {
    std::vector<std::size_t> members;
    for (auto p : *species[j].positions) {
      if (p != excluded) members.push_back(p);
    }
    const auto keep = std::min(members.size(), static_cast<std::size_t>(n));
    std::partial_sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep), members.end(),
                      [&](std::size_t a, std::size_t b) { return store.ranks_before(a, sims[a], b, sims[b]); });
    SpeciesCandidate cand;
    cand.species_id = store.species_id(species[j].best);
    cand.species_name = store.species_name(species[j].best);
    for (std::size_t e = 0; e < keep; ++e) cand.exemplars.push_back({store.image_id(members[e]), sims[members[e]]});
    out.push_back(std::move(cand));
  }
  return out;
}

GroundTruthLabel label_episode(std::span<const SpeciesCandidate> candidates, const std::string& true_species) {
  for (const auto& c : candidates) {
    if (c.species_id == true_species) return GroundTruthLabel::classification(true_species);
  }
  return GroundTruthLabel::discovery();
}

Episode make_episode(const EmbeddingStore& store, const LabeledQuery& query, int k, int n,
                     const std::string& encoder_tag) {
  Episode ep;
  ep.query_id = query.query_id;
  ep.query_vector = query.vector;
  ep.k_requested = k;
  ep.n_requested = n;
  ep.candidates = retrieve_candidates(store, query.vector, k, n, query.query_id);
  ep.label = label_episode(ep.candidates, query.species_id);
  ep.encoder_tag = encoder_tag;
  return ep;
}

std::vector<Episode> make_episodes(const EmbeddingStore& store, std::span<const LabeledQuery> queries, int k,
                                   int n, const std::string& encoder_tag, int threads) {
  std::vector<Episode> out(queries.size());
  parallel_for(queries.size(), threads,
               [&](std::size_t i) { out[i] = make_episode(store, queries[i], k, n, encoder_tag); });
  return out;
}

double pass_at_k(const EmbeddingStore& store, std::span<const LabeledQuery> queries, int k, int threads) {
  if (queries.empty()) throw PreconditionError("pass_at_k: empty query list");
  std::vector<char> hit(queries.size(), 0);
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    const auto cands = retrieve_candidates(store, queries[i].vector, k, 1, queries[i].query_id);
    hit[i] = label_episode(cands, queries[i].species_id).is_classification() ? 1 : 0;
  });
  std::size_t hits = 0;
  for (char h : hit) hits += static_cast<std::size_t>(h);
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

std::vector<LabeledQuery> queries_from_store(const EmbeddingStore& store) {
  std::vector<LabeledQuery> out;
  out.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto v = store.vector(i);
    out.push_back({store.image_id(i), {v.begin(), v.end()}, store.species_id(i)});
  }
  return out;
}

json episode_to_json(const Episode& episode) {
  json cands = json::array();
  for (const auto& c : episode.candidates) {
    json ex = json::array();
    for (const auto& e : c.exemplars) ex.push_back({{"image_id", e.image_id}, {"sim", e.similarity}});
    cands.push_back({{"species_id", c.species_id}, {"species_name", c.species_name}, {"exemplars", std::move(ex)}});
  }
  json label = episode.label.is_classification()
                   ? json{{"type", "classification"}, {"species_id", episode.label.species_id()}}
                   : json{{"type", "discovery"}};
  return {{"query_id", episode.query_id},     {"k", episode.k_requested},
          {"n", episode.n_requested},         {"encoder", episode.encoder_tag},
          {"candidates", std::move(cands)},   {"label", std::move(label)}};
}

Episode episode_from_json(const json& j) {
  Episode ep;
  ep.query_id = j.at("query_id").get<std::string>();
  ep.k_requested = j.at("k").get<int>();
  ep.n_requested = j.at("n").get<int>();
  ep.encoder_tag = j.value("encoder", std::string{});
  std::unordered_set<std::string> seen;
  for (const auto& c : j.at("candidates")) {
    SpeciesCandidate cand;
    cand.species_id = c.at("species_id").get<std::string>();
    cand.species_name = c.at("species_name").get<std::string>();
    for (const auto& e : c.at("exemplars")) {
      cand.exemplars.push_back({e.at("image_id").get<std::string>(), e.at("sim").get<double>()});
    }
    if (cand.exemplars.empty()) throw Error(fmt::format("episode {}: candidate without exemplars", ep.query_id));
    if (!seen.insert(cand.species_id).second) {
      throw Error(fmt::format("episode {}: duplicate candidate species {}", ep.query_id, cand.species_id));
    }
    ep.candidates.push_back(std::move(cand));
  }
  const auto& label = j.at("label");
  const auto type = label.at("type").get<std::string>();
  if (type == "classification") {
    ep.label = GroundTruthLabel::classification(label.at("species_id").get<std::string>());
    if (!seen.contains(ep.label.species_id())) {
      throw Error(fmt::format("episode {}: classification target {} is not a candidate", ep.query_id,
                              ep.label.species_id()));
    }
  } else if (type == "discovery") {
    ep.label = GroundTruthLabel::discovery();
  } else {
    throw Error(fmt::format("episode {}: unknown label type '{}'", ep.query_id, type));
  }
  return ep;
}

void write_episodes(const std::string& path, std::span<const Episode> episodes) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write {}", path));
  for (const auto& ep : episodes) out << episode_to_json(ep).dump() << "\n";
}

std::vector<Episode> read_episodes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open {}", path));
  std::vector<Episode> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(episode_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(fmt::format("{}:{}: {}", path, lineno, e.what()));
    }
  }
  return out;
}

}  // namespace taxon
