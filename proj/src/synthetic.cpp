#include "taxon/synthetic.hpp"

#include <cmath>

#include <fmt/format.h>

namespace taxon {

SyntheticDomain::SyntheticDomain(int species, int dim, double sigma, std::uint64_t seed, std::string prefix)
    : dim_(dim), sigma_(sigma), prefix_(std::move(prefix)) {
  if (species < 2) throw PreconditionError("synthetic domain needs at least 2 species");
  if (dim < 2) throw PreconditionError("synthetic domain needs dim >= 2");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw PreconditionError("sigma must be finite and >= 0");
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  centers_.reserve(static_cast<std::size_t>(species));
  for (int s = 0; s < species; ++s) {
    std::vector<float> c(static_cast<std::size_t>(dim));
    for (auto& x : c) x = static_cast<float>(gauss(rng));
    centers_.push_back(normalized(c));
  }
}

std::string SyntheticDomain::species_id(int s) const { return fmt::format("{}{:04d}", prefix_, s); }

std::string SyntheticDomain::species_name(int s) const {
  return fmt::format("Genus{:03d} {}_species{:04d}", s / 4, prefix_, s);
}

std::vector<float> SyntheticDomain::sample(int s, Rng& rng) const {
  const auto& c = center(s);
  if (sigma_ == 0.0) return c;
  std::normal_distribution<double> noise(0.0, sigma_);
  std::vector<float> v(c.size());
  for (std::size_t d = 0; d < c.size(); ++d) v[d] = static_cast<float>(c[d] + noise(rng));
  return normalized(v);
}

std::vector<EmbeddingRecord> SyntheticDomain::records(int s, int count, const std::string& tag, Rng& rng) const {
  std::vector<EmbeddingRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back({fmt::format("{}-{}-{:04d}", tag, species_id(s), i), species_id(s), species_name(s), sample(s, rng)});
  }
  return out;
}

EmbeddingStore gen_synthetic_embeddings(int species, int per_species, int dim, double sigma, std::uint64_t seed,
                                        const std::filesystem::path& out_dir) {
  if (per_species < 1) throw PreconditionError("per_species must be >= 1");
  SyntheticDomain domain(species, dim, sigma, seed);
  auto rng = derive_rng(seed, 1);
  std::vector<EmbeddingRecord> all;
  all.reserve(static_cast<std::size_t>(species) * static_cast<std::size_t>(per_species));
  for (int s = 0; s < species; ++s) {
    auto recs = domain.records(s, per_species, "img", rng);
    all.insert(all.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  if (!out_dir.empty()) EmbeddingStore::write(out_dir, all, static_cast<std::size_t>(dim));
  return EmbeddingStore(std::move(all), static_cast<std::size_t>(dim));
}

std::vector<LabeledQuery> to_queries(const std::vector<EmbeddingRecord>& records) {
  std::vector<LabeledQuery> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.image_id, r.vector, r.species_id});
  return out;
}

}  // namespace taxon
