#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "taxon/common.hpp"
#include "taxon/embedding_store.hpp"
#include "taxon/retrieval_env.hpp"

namespace taxon {

/// Gaussian clusters around unit centers drawn uniformly on the sphere; a
/// desk-scale stand-in for encoder outputs.
class SyntheticDomain {
 public:
  /// Throws PreconditionError unless species >= 2, dim >= 2, sigma >= 0.
  SyntheticDomain(int species, int dim, double sigma, std::uint64_t seed, std::string prefix = "sp");

  int species() const { return static_cast<int>(centers_.size()); }
  int dim() const { return dim_; }
  const std::vector<float>& center(int s) const { return centers_[static_cast<std::size_t>(s)]; }
  std::string species_id(int s) const;
  std::string species_name(int s) const;

  /// normalize(center + N(0, sigma^2 I)).
  std::vector<float> sample(int s, Rng& rng) const;

  /// `count` records of species s with image ids "<tag>-<species_id>-<i>".
  std::vector<EmbeddingRecord> records(int s, int count, const std::string& tag, Rng& rng) const;

 private:
  int dim_;
  double sigma_;
  std::string prefix_;
  std::vector<std::vector<float>> centers_;
};

/// Writes a store with `per_species` images for each of `species` clusters.
/// Centers use `seed`; per-image noise uses an independent derived stream.
EmbeddingStore gen_synthetic_embeddings(int species, int per_species, int dim, double sigma, std::uint64_t seed,
                                        const std::filesystem::path& out_dir = {});

std::vector<LabeledQuery> to_queries(const std::vector<EmbeddingRecord>& records);

}  // namespace taxon
