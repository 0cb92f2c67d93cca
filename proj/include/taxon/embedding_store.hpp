#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace taxon {

struct EmbeddingRecord {
  std::string image_id;
  std::string species_id;
  std::string species_name;
  std::vector<float> vector;
};

struct RankedHit {
  std::size_t position = 0;  // row in the store
  std::string image_id;
  std::string species_id;
  double similarity = 0.0;
};

/// Immutable set of labeled, unit-normalized image embeddings with exact
/// cosine search. Safe for concurrent readers once constructed.
///
/// Storage is a single row-major float buffer; similarities are accumulated
/// in double. Ranking order is (similarity descending, image_id ascending).
class EmbeddingStore {
 public:
  /// Validates and normalizes `records`. Throws taxon::Error on empty input
  /// when `dim` is zero, dimension mismatch, duplicate image_id, non-finite
  /// component, or zero vector. With `normalize` false the vectors must
  /// already have unit norm (to 1e-6) and are stored bit-for-bit.
  explicit EmbeddingStore(std::vector<EmbeddingRecord> records, std::size_t dim = 0,
                          bool normalize = true);

  /// Reads meta.json, manifest.jsonl and vectors.f32 from `dir`.
  static EmbeddingStore load(const std::filesystem::path& dir);

  /// Writes the directory layout read by load(). Vectors are written as given.
  static void write(const std::filesystem::path& dir, std::span<const EmbeddingRecord> records,
                    std::size_t dim);
  void save(const std::filesystem::path& dir) const;

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  std::size_t species_count() const { return species_order_.size(); }

  const std::string& image_id(std::size_t pos) const { return ids_[pos]; }
  const std::string& species_id(std::size_t pos) const { return species_[pos]; }
  const std::string& species_name(std::size_t pos) const { return names_[pos]; }
  std::span<const float> vector(std::size_t pos) const {
    return {data_.data() + pos * dim_, dim_};
  }
  EmbeddingRecord record(std::size_t pos) const;

  std::optional<std::size_t> find_image(const std::string& image_id) const;
  bool has_species(const std::string& species_id) const {
    return species_index_.contains(species_id);
  }
  /// Record positions for a species, in store order.
  const std::vector<std::size_t>& species_positions(const std::string& species_id) const;
  /// Species ids in order of first occurrence in the store.
  const std::vector<std::string>& species_ids() const { return species_order_; }

  /// Rank of image_id among all ids of this store in ascending byte order; used
  /// as an integer tie-break key.
  std::size_t id_rank(std::size_t pos) const { return id_rank_[pos]; }

  /// Dot product of a stored (unit) vector with `query`.
  double similarity(std::size_t pos, std::span<const float> query) const;
  /// Similarities of every record against `query`, indexed by position.
  std::vector<double> similarities(std::span<const float> query) const;

  /// Exact top-m images by cosine similarity. Throws on dim mismatch, empty
  /// store, or m == 0.
  std::vector<RankedHit> nearest_images(std::span<const float> query, std::size_t m) const;

  /// New store holding the records whose image ids are in `keep`, preserving
  /// this store's order.
  EmbeddingStore subset(const std::vector<std::string>& keep) const;

  /// Checks query dimensionality and non-emptiness; throws taxon::Error.
  void check_query(std::span<const float> query) const;

  /// True when a ranks ahead of b for the given similarities.
  bool ranks_before(std::size_t a, double sim_a, std::size_t b, double sim_b) const {
    if (sim_a != sim_b) return sim_a > sim_b;
    return id_rank_[a] < id_rank_[b];
  }

 private:
  std::size_t dim_ = 0;
  std::vector<float> data_;
  std::vector<std::string> ids_;
  std::vector<std::string> species_;
  std::vector<std::string> names_;
  std::vector<std::size_t> id_rank_;
  std::unordered_map<std::string, std::size_t> id_lookup_;
  std::unordered_map<std::string, std::vector<std::size_t>> species_index_;
  std::vector<std::string> species_order_;
};

/// Returns v / |v|₂, or v unchanged when |v|₂ is already within 1e-6 of 1.
/// Throws taxon::Error for zero or non-finite input.
std::vector<float> normalized(std::span<const float> v);

}  // namespace taxon
