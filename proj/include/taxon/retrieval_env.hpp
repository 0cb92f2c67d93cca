#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "taxon/embedding_store.hpp"

namespace taxon {

struct Exemplar {
  std::string image_id;
  double similarity = 0.0;

  bool operator==(const Exemplar&) const = default;
};

/// One candidate species and its most query-similar images, best first.
struct SpeciesCandidate {
  std::string species_id;
  std::string species_name;
  std::vector<Exemplar> exemplars;

  bool operator==(const SpeciesCandidate&) const = default;
};

class GroundTruthLabel {
 public:
  enum class Kind { kClassification, kDiscovery };

  static GroundTruthLabel classification(std::string species_id) {
    return GroundTruthLabel(Kind::kClassification, std::move(species_id));
  }
  static GroundTruthLabel discovery() { return GroundTruthLabel(Kind::kDiscovery, {}); }

  Kind kind() const { return kind_; }
  bool is_classification() const { return kind_ == Kind::kClassification; }
  bool is_discovery() const { return kind_ == Kind::kDiscovery; }
  /// Target species; empty for discovery.
  const std::string& species_id() const { return species_id_; }

  bool operator==(const GroundTruthLabel&) const = default;

 private:
  GroundTruthLabel(Kind kind, std::string species_id) : kind_(kind), species_id_(std::move(species_id)) {}

  Kind kind_;
  std::string species_id_;
};

/// A query with its species-aggregated candidates and retrieval-derived label.
struct Episode {
  std::string query_id;
  std::vector<float> query_vector;  // optional inline copy; not serialized
  int k_requested = 0;
  int n_requested = 0;
  std::vector<SpeciesCandidate> candidates;
  GroundTruthLabel label = GroundTruthLabel::discovery();
  std::string encoder_tag;

  /// Index of the labeled species among candidates, or candidates.size() for
  /// discovery. This is the correct action in policy space.
  std::size_t label_action() const;
};

/// A held-out query with its true species.
struct LabeledQuery {
  std::string query_id;
  std::vector<float> vector;
  std::string species_id;
};

/// Species-level aggregation over the exact similarity ranking: species enter
/// by first appearance until k are collected, and each keeps its n most
/// similar images. When `exclude_image_id` names a store image it is removed
/// from the ranking entirely.
std::vector<SpeciesCandidate> retrieve_candidates(const EmbeddingStore& store, std::span<const float> query,
                                                  int k, int n,
                                                  const std::string& exclude_image_id = {});

GroundTruthLabel label_episode(std::span<const SpeciesCandidate> candidates, const std::string& true_species);

/// Retrieves, labels and packages one episode. The query's own image is
/// excluded when query.query_id is an image in `store`.
Episode make_episode(const EmbeddingStore& store, const LabeledQuery& query, int k, int n,
                     const std::string& encoder_tag = {});

std::vector<Episode> make_episodes(const EmbeddingStore& store, std::span<const LabeledQuery> queries, int k,
                                   int n, const std::string& encoder_tag = {}, int threads = 1);

/// Fraction of queries whose true species is among the k retrieved species.
double pass_at_k(const EmbeddingStore& store, std::span<const LabeledQuery> queries, int k, int threads = 1);

/// Every record of a store as a labeled query (query_id = image_id).
std::vector<LabeledQuery> queries_from_store(const EmbeddingStore& store);

nlohmann::json episode_to_json(const Episode& episode);
Episode episode_from_json(const nlohmann::json& j);

void write_episodes(const std::string& path, std::span<const Episode> episodes);
std::vector<Episode> read_episodes(const std::string& path);

}  // namespace taxon
