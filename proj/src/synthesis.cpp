#include "taxon/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

namespace taxon {

using json = nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  const auto* ws = " \t\r\n\v\f";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

constexpr std::string_view kClassificationToken = "[Classification]:";
constexpr std::string_view kDiscoveryToken = "[Discovery]";

}  // namespace

Partition partition_pool(const EmbeddingStore& store, double query_fraction, std::uint64_t seed) {
  if (store.size() < 2) throw PreconditionError("partition_pool: store needs at least 2 records");
  if (!(query_fraction > 0.0 && query_fraction < 1.0)) {
    throw PreconditionError("partition_pool: query fraction must be in (0, 1)");
  }
  const auto m = store.size();
  const auto n_query = static_cast<std::size_t>(std::llround(query_fraction * static_cast<double>(m)));
  if (n_query == 0 || n_query == m) {
    throw PreconditionError(fmt::format("partition_pool: fraction {} of {} records leaves one side empty",
                                        query_fraction, m));
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<char> is_query(m, 0);
  for (std::size_t i = 0; i < n_query; ++i) is_query[order[i]] = 1;

  Partition p;
  p.seed = seed;
  p.query_ids.reserve(n_query);
  p.pool_ids.reserve(m - n_query);
  for (std::size_t i = 0; i < m; ++i) (is_query[i] ? p.query_ids : p.pool_ids).push_back(store.image_id(i));
  return p;
}

EpisodeConfig sample_config(Rng& rng) {
  std::uniform_int_distribution<int> k_dist(kMinSynthK, kMaxSynthK);
  std::uniform_int_distribution<int> n_dist(kMinSynthN, kMaxSynthN);
  const int k = k_dist(rng);
  const int n = n_dist(rng);
  return {k, n};
}

std::string render_prompt(const Episode& episode) {
  if (episode.candidates.empty()) throw PreconditionError("render_prompt: episode has no candidates");
  std::string out =
      "# Role\n"
      "You are a professional classification and discovery expert.\n"
      "\n"
      "# Task\n"
      "You are given:\n"
      "* 1 query image (unknown object).\n"
      "* N reference entries, each consisting of one or more\n"
      "  images and a full taxonomy.\n"
      "Your goal is to identify whether the query belongs to one\n"
      "of the reference objects or represents a new object.\n"
      "Analyze the visual characteristics of the query image by\n"
      "comparing it with the reference images, then decide ONE\n"
      "of the following:\n"
      "* [Classification] - the query belongs to one of the\n"
      "  reference objects. Output the taxonomy of that reference.\n"
      "* [Discovery] - treat it as a new object.\n"
      "\n"
      "# Output Format\n"
      "[Classification]: taxonomy\n"
      "or\n"
      "[Discovery]\n"
      "\n"
      "# Input\n"
      "Query image: <image>\n";
  for (std::size_t j = 0; j < episode.candidates.size(); ++j) {
    const auto& cand = episode.candidates[j];
    if (cand.exemplars.empty()) {
      throw PreconditionError(fmt::format("render_prompt: candidate {} has no exemplars", j + 1));
    }
    out += fmt::format("Reference {}:\n", j + 1);
    for (std::size_t i = 0; i < cand.exemplars.size(); ++i) {
      if (i > 0) out += ' ';
      out += fmt::format("R{}I{}: <image>", j + 1, i + 1);
    }
    out += fmt::format("\ntaxonomy: {}\n", cand.species_name);
  }
  return out;
}

Decision parse_decision(const std::string& text, std::span<const std::string> candidate_names) {
  std::istringstream in(text);
  std::string line;
  Decision last = Decision::invalid();
  while (std::getline(in, line)) {
    const auto cls = line.find(kClassificationToken);
    const auto dis = line.find(kDiscoveryToken);
    if (cls != std::string::npos && (dis == std::string::npos || cls < dis)) {
      const auto name = trim(std::string_view(line).substr(cls + kClassificationToken.size()));
      const auto it = std::find(candidate_names.begin(), candidate_names.end(), name);
      last = it == candidate_names.end()
                 ? Decision::invalid()
                 : Decision::classification(static_cast<std::size_t>(it - candidate_names.begin()));
    } else if (dis != std::string::npos) {
      last = Decision::discovery();
    }
  }
  return last;
}

Decision parse_decision(const std::string& text, const Episode& episode) {
  std::vector<std::string> names;
  names.reserve(episode.candidates.size());
  for (const auto& c : episode.candidates) names.push_back(c.species_name);
  return parse_decision(text, names);
}

SynthSample validate_and_emit(Episode episode, const Decision& decision) {
  SynthSample s;
  s.kept = decision.format_valid() && decision_matches(decision, episode);
  s.annotator_decision = decision;
  s.episode = std::move(episode);
  return s;
}

void SynthStats::add(const SynthSample& s) {
  auto bump = [&](SynthStats& st) {
    if (s.annotation_failed) ++st.annotation_errors;
    if (s.kept) {
      ++st.kept;
      ++(s.episode.label.is_classification() ? st.classification : st.discovery);
    } else {
      ++st.dropped;
    }
  };
  bump(*this);
  bump(per_encoder[s.episode.encoder_tag]);
}

json SynthStats::to_json() const {
  json j{{"kept", kept},
         {"dropped", dropped},
         {"classification", classification},
         {"discovery", discovery},
         {"annotation_errors", annotation_errors}};
  json enc = json::object();
  for (const auto& [tag, st] : per_encoder) {
    enc[tag] = {{"kept", st.kept},
                {"dropped", st.dropped},
                {"classification", st.classification},
                {"discovery", st.discovery},
                {"annotation_errors", st.annotation_errors}};
  }
  j["per_encoder"] = std::move(enc);
  return j;
}

std::vector<SynthSample> synthesize(const EmbeddingStore& store, const SynthConfig& cfg) {
  validate(cfg.annotator);
  const auto part = partition_pool(store, cfg.query_fraction, cfg.seed);
  const auto pool = store.subset(part.pool_ids);
  std::vector<SynthSample> out(part.query_ids.size());

  auto run_one = [&](std::size_t i) {
    const auto pos = *store.find_image(part.query_ids[i]);
    auto rng = derive_rng(cfg.seed, i);
    const auto kn = sample_config(rng);
    auto v = store.vector(pos);
    LabeledQuery q{store.image_id(pos), {v.begin(), v.end()}, store.species_id(pos)};
    auto ep = make_episode(pool, q, kn.k, kn.n, cfg.encoder_tag);
    try {
      const auto d = annotate(cfg.annotator, ep, rng);
      out[i] = validate_and_emit(std::move(ep), d);
    } catch (const AnnotationError&) {
      out[i] = validate_and_emit(std::move(ep), Decision::invalid());
      out[i].annotation_failed = true;
    }
  };
  int workers = cfg.threads;
  if (const auto* remote = std::get_if<RemoteAnnotator>(&cfg.annotator)) {
    workers = std::max(1, remote->max_in_flight);
  }
  parallel_for(out.size(), workers, run_one);
  return out;
}

std::vector<SynthSample> stratify(std::span<const EncoderPool> pools, double target_class_fraction, int total,
                                  std::uint64_t seed) {
  if (!(target_class_fraction > 0.0 && target_class_fraction < 1.0)) {
    throw PreconditionError("stratify: target fraction must be in (0, 1)");
  }
  if (total <= 0) throw PreconditionError("stratify: total must be positive");

  struct PoolView {
    std::size_t pool;
    double precision;
    std::vector<const SynthSample*> cls;
    std::vector<const SynthSample*> disc;
  };
  Rng rng(seed);
  std::vector<PoolView> views;
  std::size_t avail_cls = 0, avail_disc = 0;
  for (std::size_t p = 0; p < pools.size(); ++p) {
    PoolView v{p, 0.0, {}, {}};
    for (const auto& s : pools[p].samples) {
      if (!s.kept) continue;
      (s.episode.label.is_classification() ? v.cls : v.disc).push_back(&s);
    }
    const auto n = v.cls.size() + v.disc.size();
    v.precision = n == 0 ? 0.0 : static_cast<double>(v.cls.size()) / static_cast<double>(n);
    std::shuffle(v.cls.begin(), v.cls.end(), rng);
    std::shuffle(v.disc.begin(), v.disc.end(), rng);
    avail_cls += v.cls.size();
    avail_disc += v.disc.size();
    views.push_back(std::move(v));
  }

  // Classification count closest to the target that the pools can supply
  // while staying inside the tolerance.
  const auto n_total = static_cast<std::size_t>(total);
  const auto ideal = static_cast<std::size_t>(std::llround(target_class_fraction * static_cast<double>(total)));
  const double tol = 0.01;
  auto within = [&](std::size_t c) {
    return std::abs(static_cast<double>(c) / static_cast<double>(total) - target_class_fraction) <= tol + 1e-12;
  };
  std::size_t n_cls = ideal;
  if (n_cls > avail_cls) n_cls = avail_cls;
  if (n_total - std::min(n_cls, n_total) > avail_disc) n_cls = n_total - std::min(avail_disc, n_total);
  if (n_cls > avail_cls || n_total - n_cls > avail_disc || !within(n_cls)) {
    const bool short_cls = avail_cls < ideal;
    throw Error(fmt::format("insufficient {} samples: need about {} of {} total, have {} classification and {} "
                            "discovery",
                            short_cls ? "classification" : "discovery", short_cls ? ideal : n_total - ideal,
                            total, avail_cls, avail_disc));
  }
  const std::size_t n_disc = n_total - n_cls;

  std::vector<SynthSample> out;
  out.reserve(n_total);
  auto by_precision = views;
  std::stable_sort(by_precision.begin(), by_precision.end(),
                   [](const PoolView& a, const PoolView& b) { return a.precision > b.precision; });
  std::size_t need = n_cls;
  for (const auto& v : by_precision) {
    for (std::size_t i = 0; i < v.cls.size() && need > 0; ++i, --need) out.push_back(*v.cls[i]);
  }
  need = n_disc;
  for (auto it = by_precision.rbegin(); it != by_precision.rend(); ++it) {
    for (std::size_t i = 0; i < it->disc.size() && need > 0; ++i, --need) out.push_back(*it->disc[i]);
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace taxon
