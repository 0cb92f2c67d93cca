#include "taxon/embedding_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include <fmt/format.h>
#include <json.hpp>

#include "taxon/common.hpp"

namespace taxon {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

float from_le(std::uint32_t bits) {
  if constexpr (std::endian::native == std::endian::big) {
    bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
  }
  return std::bit_cast<float>(bits);
}

std::uint32_t to_le(float f) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  if constexpr (std::endian::native == std::endian::big) {
    bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
  }
  return bits;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open {}", p.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<float> normalized(std::span<const float> v) {
  double sq = 0.0;
  for (float x : v) {
    if (!std::isfinite(x)) throw Error("non-finite vector component");
    sq += static_cast<double>(x) * x;
  }
  if (sq == 0.0) throw Error("zero vector cannot be normalized");
  const double norm = std::sqrt(sq);
  // Already unit length: keep the stored bits so save/load round-trips exactly.
  if (std::abs(norm - 1.0) <= 1e-6) return {v.begin(), v.end()};
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

EmbeddingStore::EmbeddingStore(std::vector<EmbeddingRecord> records, std::size_t dim, bool normalize)
    : dim_(dim) {
  if (dim_ == 0) {
    if (records.empty()) throw Error("cannot infer dimension of an empty store");
    dim_ = records.front().vector.size();
  }
  if (dim_ == 0) throw Error("store dimension must be positive");

  const std::size_t count = records.size();
  data_.reserve(count * dim_);
  ids_.reserve(count);
  species_.reserve(count);
  names_.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto& r = records[i];
    if (r.vector.size() != dim_) {
      throw Error(fmt::format("record {} ({}) has dimension {}, expected {}", i, r.image_id,
                              r.vector.size(), dim_));
    }
    if (!id_lookup_.emplace(r.image_id, i).second) {
      throw Error(fmt::format("duplicate image_id '{}'", r.image_id));
    }
    std::vector<float> unit;
    try {
      unit = normalized(r.vector);
      if (!normalize) {
        double sq = 0.0;
        for (float x : r.vector) sq += static_cast<double>(x) * x;
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) throw Error("vector is not unit norm");
        unit = r.vector;
      }
    } catch (const Error& e) {
      throw Error(fmt::format("record {} ({}): {}", i, r.image_id, e.what()));
    }
    data_.insert(data_.end(), unit.begin(), unit.end());
    auto [it, inserted] = species_index_.try_emplace(r.species_id);
    if (inserted) species_order_.push_back(r.species_id);
    it->second.push_back(i);
    ids_.push_back(std::move(r.image_id));
    species_.push_back(std::move(r.species_id));
    names_.push_back(std::move(r.species_name));
  }

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids_[a] < ids_[b]; });
  id_rank_.resize(count);
  for (std::size_t r = 0; r < count; ++r) id_rank_[order[r]] = r;
}

EmbeddingStore EmbeddingStore::load(const fs::path& dir) {
  json meta;
  try {
    meta = json::parse(read_text(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw Error(fmt::format("corrupt meta.json in {}: {}", dir.string(), e.what()));
  }
  if (!meta.contains("dim") || !meta.contains("count") || !meta["dim"].is_number_integer() ||
      !meta["count"].is_number_integer()) {
    throw Error("meta.json must contain integer 'dim' and 'count'");
  }
  if (meta.contains("metric") && meta["metric"] != "cosine") {
    throw Error(fmt::format("unsupported metric {}", meta["metric"].dump()));
  }
  const auto dim_i = meta["dim"].get<std::int64_t>();
  const auto count_i = meta["count"].get<std::int64_t>();
  if (dim_i <= 0 || count_i < 0) throw Error("meta.json: dim must be positive, count nonnegative");
  const auto dim = static_cast<std::size_t>(dim_i);
  const auto count = static_cast<std::size_t>(count_i);

  std::vector<EmbeddingRecord> records;
  records.reserve(count);
  {
    std::ifstream in(dir / "manifest.jsonl");
    if (!in) throw Error(fmt::format("cannot open {}", (dir / "manifest.jsonl").string()));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line == "\r") continue;
      try {
        auto j = json::parse(line);
        records.push_back({j.at("image_id").get<std::string>(), j.at("species_id").get<std::string>(),
                           j.at("species_name").get<std::string>(), {}});
      } catch (const json::exception& e) {
        throw Error(fmt::format("corrupt manifest line {}: {}", lineno, e.what()));
      }
    }
  }
  if (records.size() != count) {
    throw Error(fmt::format("manifest has {} records, meta.json says {}", records.size(), count));
  }

  const auto bytes = read_text(dir / "vectors.f32");
  if (bytes.size() != dim * count * 4) {
    throw Error(fmt::format("size mismatch: vectors.f32 has {} bytes, expected {} (dim {} x count {} x 4)",
                            bytes.size(), dim * count * 4, dim, count));
  }
  for (std::size_t i = 0; i < count; ++i) {
    auto& v = records[i].vector;
    v.resize(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + (i * dim + d) * 4, 4);
      v[d] = from_le(bits);
    }
  }
  if (count == 0) {
    EmbeddingStore empty({}, dim);
    return empty;
  }
  return EmbeddingStore(std::move(records), dim);
}

void EmbeddingStore::write(const fs::path& dir, std::span<const EmbeddingRecord> records, std::size_t dim) {
  fs::create_directories(dir);
  {
    std::ofstream meta(dir / "meta.json");
    meta << json{{"dim", dim}, {"count", records.size()}, {"metric", "cosine"}}.dump() << "\n";
  }
  std::ofstream manifest(dir / "manifest.jsonl");
  std::ofstream vectors(dir / "vectors.f32", std::ios::binary);
  if (!manifest || !vectors) throw Error(fmt::format("cannot write store to {}", dir.string()));
  for (const auto& r : records) {
    if (r.vector.size() != dim) throw Error(fmt::format("record {} has wrong dimension", r.image_id));
    manifest << json{{"image_id", r.image_id}, {"species_id", r.species_id}, {"species_name", r.species_name}}.dump()
             << "\n";
    for (float x : r.vector) {
      const auto bits = to_le(x);
      vectors.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
}

void EmbeddingStore::save(const fs::path& dir) const {
  std::vector<EmbeddingRecord> records;
  records.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) records.push_back(record(i));
  write(dir, records, dim_);
}

EmbeddingRecord EmbeddingStore::record(std::size_t pos) const {
  auto v = vector(pos);
  return {ids_[pos], species_[pos], names_[pos], {v.begin(), v.end()}};
}

std::optional<std::size_t> EmbeddingStore::find_image(const std::string& image_id) const {
  auto it = id_lookup_.find(image_id);
  if (it == id_lookup_.end()) return std::nullopt;
  return it->second;
}

const std::vector<std::size_t>& EmbeddingStore::species_positions(const std::string& species_id) const {
  auto it = species_index_.find(species_id);
  if (it == species_index_.end()) throw Error(fmt::format("unknown species '{}'", species_id));
  return it->second;
}

void EmbeddingStore::check_query(std::span<const float> query) const {
  if (empty()) throw Error("query against an empty store");
  if (query.size() != dim_) {
    throw Error(fmt::format("dimension mismatch: query has {}, store has {}", query.size(), dim_));
  }
}

double EmbeddingStore::similarity(std::size_t pos, std::span<const float> query) const {
  const float* row = data_.data() + pos * dim_;
  double acc = 0.0;
  for (std::size_t d = 0; d < dim_; ++d) acc += static_cast<double>(row[d]) * query[d];
  return acc;
}

std::vector<double> EmbeddingStore::similarities(std::span<const float> query) const {
  check_query(query);
  std::vector<double> sims(size());
  for (std::size_t i = 0; i < size(); ++i) sims[i] = similarity(i, query);
  return sims;
}

std::vector<RankedHit> EmbeddingStore::nearest_images(std::span<const float> query, std::size_t m) const {
  if (m == 0) throw PreconditionError("nearest_images: m must be >= 1");
  const auto sims = similarities(query);
  std::vector<std::size_t> order(size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t take = std::min(m, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) { return ranks_before(a, sims[a], b, sims[b]); });
  std::vector<RankedHit> hits;
  hits.reserve(take);
  for (std::size_t r = 0; r < take; ++r) {
    const auto pos = order[r];
    hits.push_back({pos, ids_[pos], species_[pos], sims[pos]});
  }
  return hits;
}

EmbeddingStore EmbeddingStore::subset(const std::vector<std::string>& keep) const {
  std::unordered_set<std::string> wanted(keep.begin(), keep.end());
  std::vector<EmbeddingRecord> records;
  for (std::size_t i = 0; i < size(); ++i) {
    if (wanted.contains(ids_[i])) records.push_back(record(i));
  }
  return EmbeddingStore(std::move(records), dim_, false);
}

}  // namespace taxon
