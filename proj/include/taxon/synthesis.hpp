#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "taxon/embedding_store.hpp"
#include "taxon/policy.hpp"
#include "taxon/retrieval_env.hpp"

namespace taxon {

/// Disjoint split of a store's image ids into synthesis queries and the
/// retrieval pool. Both lists follow store order.
struct Partition {
  std::vector<std::string> query_ids;
  std::vector<std::string> pool_ids;
  std::uint64_t seed = 0;
};

/// Uniform random split with round(query_fraction * M) queries.
Partition partition_pool(const EmbeddingStore& store, double query_fraction, std::uint64_t seed);

struct EpisodeConfig {
  int k = 0;
  int n = 0;
};

inline constexpr int kMinSynthK = 4;
inline constexpr int kMaxSynthK = 16;
inline constexpr int kMinSynthN = 1;
inline constexpr int kMaxSynthN = 4;

/// k ~ U{4..16}, n ~ U{1..4}, drawn independently.
EpisodeConfig sample_config(Rng& rng);

/// Fills the annotation prompt template for an episode.
std::string render_prompt(const Episode& episode);

/// Reads the final "[Classification]: <name>" or "[Discovery]" line of a
/// model reply. Names match candidates exactly after trimming.
Decision parse_decision(const std::string& text, std::span<const std::string> candidate_names);
Decision parse_decision(const std::string& text, const Episode& episode);

struct OracleAnnotator {
  double error_rate = 0.0;
};

struct RemoteAnnotator {
  std::string endpoint;  // http://host[:port]/path
  std::string model_name;
  int max_in_flight = 4;
  int retry_limit = 3;
  int initial_backoff_ms = 100;
  int timeout_seconds = 60;
};

using AnnotatorConfig = std::variant<OracleAnnotator, RemoteAnnotator>;

void validate(const AnnotatorConfig& cfg);

/// Transport failure after all retries.
class AnnotationError : public Error {
 public:
  using Error::Error;
};

/// The chat-completion request body sent to a remote annotator.
nlohmann::json remote_request(const RemoteAnnotator& cfg, const Episode& episode);

/// Oracle: the labeled decision with probability 1 - error_rate, otherwise a
/// uniformly drawn wrong one. Remote: POSTs the rendered prompt and parses
/// the reply's "content". Throws AnnotationError when the remote call fails.
Decision annotate(const AnnotatorConfig& cfg, const Episode& episode, Rng& rng);

struct SynthSample {
  Episode episode;
  Decision annotator_decision = Decision::invalid();
  bool kept = false;
  bool annotation_failed = false;
};

SynthSample validate_and_emit(Episode episode, const Decision& decision);

struct SynthStats {
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::size_t classification = 0;
  std::size_t discovery = 0;
  std::size_t annotation_errors = 0;
  std::map<std::string, SynthStats> per_encoder;

  void add(const SynthSample& s);
  nlohmann::json to_json() const;
};

struct SynthConfig {
  double query_fraction = 0.2;
  std::uint64_t seed = 0;
  std::string encoder_tag;
  AnnotatorConfig annotator = OracleAnnotator{};
  int threads = 1;
};

/// Partitions `store`, builds one episode per query against the pool with a
/// sampled (k, n), annotates, and validates. Samples come back in query order,
/// kept or not. Per-episode randomness derives from (seed, ordinal).
std::vector<SynthSample> synthesize(const EmbeddingStore& store, const SynthConfig& cfg);

struct EncoderPool {
  std::string encoder_tag;
  std::vector<SynthSample> samples;
};

/// Draws `total` kept samples without replacement so the classification share
/// is within 0.01 of `target_class_fraction`. Classification samples come from
/// the most precise pools first, discovery samples from the least precise,
/// where precision is a pool's classification share among its kept samples.
std::vector<SynthSample> stratify(std::span<const EncoderPool> pools, double target_class_fraction, int total,
                                  std::uint64_t seed);

inline constexpr double kDefaultTargetClassFraction = 59709.0 / 76621.0;

}  // namespace taxon
