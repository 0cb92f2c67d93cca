#pragma once

// Independent reference computations used only by tests. Nothing here calls
// into the ranking or gradient code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "taxon/embedding_store.hpp"
#include "taxon/retrieval_env.hpp"

namespace taxon::oracle {

struct ScanHit {
  std::string image_id;
  std::string species_id;
  double sim;
};

/// Full scan: dot every row (re-read through the public accessor), sort by
/// (sim desc, image_id asc).
inline std::vector<ScanHit> full_scan(const EmbeddingStore& store, const std::vector<float>& q,
                                      const std::string& exclude = {}) {
  std::vector<ScanHit> all;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.image_id(i) == exclude) continue;
    const auto v = store.vector(i);
    double s = 0.0;
    for (std::size_t d = 0; d < v.size(); ++d) s += static_cast<double>(v[d]) * q[d];
    all.push_back({store.image_id(i), store.species_id(i), s});
  }
  std::sort(all.begin(), all.end(), [](const ScanHit& a, const ScanHit& b) {
    return std::tie(b.sim, a.image_id) < std::tie(a.sim, b.image_id);
  });
  return all;
}

/// First-appearance dedup over the full scan, then a fresh per-species top-n
/// scan for exemplars.
inline std::vector<SpeciesCandidate> candidates(const EmbeddingStore& store, const std::vector<float>& q, int k,
                                                int n, const std::string& exclude = {}) {
  const auto ranked = full_scan(store, q, exclude);
  std::vector<std::string> chosen;
  std::set<std::string> seen;
  for (const auto& h : ranked) {
    if (static_cast<int>(chosen.size()) == k) break;
    if (seen.insert(h.species_id).second) chosen.push_back(h.species_id);
  }
  std::vector<SpeciesCandidate> out;
  for (const auto& sid : chosen) {
    SpeciesCandidate c;
    c.species_id = sid;
    std::vector<ScanHit> members;
    for (const auto& h : ranked) {
      if (h.species_id == sid) members.push_back(h);
    }
    for (int e = 0; e < n && e < static_cast<int>(members.size()); ++e) {
      c.exemplars.push_back({members[static_cast<std::size_t>(e)].image_id, members[static_cast<std::size_t>(e)].sim});
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store.species_id(i) == sid) {
        c.species_name = store.species_name(i);
        break;
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

/// Central differences of f at x with step h.
inline std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, |b|_inf); scale-aware and safe near zero.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

/// Random store with `species` species (names "sN"), `count` images, unit
/// vectors drawn by the test, not by any library generator.
inline std::vector<EmbeddingRecord> random_records(std::mt19937_64& rng, int count, int species, int dim,
                                                   bool clustered = false) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(species), std::vector<double>(static_cast<std::size_t>(dim)));
  for (auto& c : centers)
    for (auto& x : c) x = g(rng);
  std::vector<EmbeddingRecord> recs;
  std::uniform_int_distribution<int> pick(0, species - 1);
  for (int i = 0; i < count; ++i) {
    // Every species gets at least one image.
    const int s = i < species ? i : pick(rng);
    EmbeddingRecord r;
    r.image_id = "img" + std::to_string(1000000 + i * 7919 % 1000003);
    r.species_id = "s" + std::to_string(s);
    r.species_name = "Species " + std::to_string(s);
    r.vector.resize(static_cast<std::size_t>(dim));
    for (int d = 0; d < dim; ++d) {
      const double base = clustered ? centers[static_cast<std::size_t>(s)][static_cast<std::size_t>(d)] : 0.0;
      r.vector[static_cast<std::size_t>(d)] = static_cast<float>(base + g(rng) * (clustered ? 0.5 : 1.0));
    }
    recs.push_back(std::move(r));
  }
  return recs;
}

inline std::vector<float> random_unit(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(dim));
  double n = 0.0;
  for (auto& x : v) {
    x = g(rng);
    n += x * x;
  }
  n = std::sqrt(n);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / n);
  return out;
}

}  // namespace taxon::oracle
