#include <chrono>
#include <regex>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "taxon/synthesis.hpp"

namespace taxon {

using json = nlohmann::json;

namespace {

struct Url {
  std::string host;
  int port = 80;
  std::string path;
};

Url parse_url(const std::string& endpoint) {
  static const std::regex re(R"(^http://([^/:]+)(?::(\d+))?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(endpoint, m, re)) {
    throw PreconditionError(fmt::format("annotator endpoint must look like http://host[:port]/path, got '{}'",
                                        endpoint));
  }
  Url u;
  u.host = m[1].str();
  if (m[2].matched) u.port = std::stoi(m[2].str());
  u.path = m[3].matched ? m[3].str() : "/";
  return u;
}

Decision oracle_decision(const OracleAnnotator& cfg, const Episode& episode, Rng& rng) {
  const auto num_actions = episode.candidates.size() + 1;
  const auto truth = episode.label_action();
  std::bernoulli_distribution err(cfg.error_rate);
  if (!err(rng)) return Decision::from_action(truth, episode.candidates.size());
  std::uniform_int_distribution<std::size_t> pick(0, num_actions - 2);
  auto wrong = pick(rng);
  if (wrong >= truth) ++wrong;
  return Decision::from_action(wrong, episode.candidates.size());
}

Decision remote_decision(const RemoteAnnotator& cfg, const Episode& episode) {
  const auto url = parse_url(cfg.endpoint);
  const auto body = remote_request(cfg, episode).dump();
  std::string last_error;
  for (int attempt = 0; attempt <= cfg.retry_limit; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(cfg.initial_backoff_ms) * (1 << (attempt - 1)));
    }
    httplib::Client client(url.host, url.port);
    client.set_connection_timeout(cfg.timeout_seconds, 0);
    client.set_read_timeout(cfg.timeout_seconds, 0);
    auto res = client.Post(url.path, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
    } else if (res->status != 200) {
      last_error = fmt::format("HTTP {}", res->status);
    } else {
      try {
        const auto reply = json::parse(res->body);
        return parse_decision(reply.at("content").get<std::string>(), episode);
      } catch (const json::exception& e) {
        last_error = fmt::format("malformed reply: {}", e.what());
      }
    }
    spdlog::debug("annotator attempt {} for {} failed: {}", attempt + 1, episode.query_id, last_error);
  }
  throw AnnotationError(fmt::format("annotation of {} failed after {} retries: {}", episode.query_id,
                                    cfg.retry_limit, last_error));
}

}  // namespace

void validate(const AnnotatorConfig& cfg) {
  if (const auto* o = std::get_if<OracleAnnotator>(&cfg)) {
    if (!(o->error_rate >= 0.0 && o->error_rate <= 1.0)) {
      throw PreconditionError("oracle error rate must be in [0, 1]");
    }
    return;
  }
  const auto& r = std::get<RemoteAnnotator>(cfg);
  if (r.max_in_flight < 1) throw PreconditionError("max_in_flight must be >= 1");
  if (r.retry_limit < 0) throw PreconditionError("retry_limit must be >= 0");
  parse_url(r.endpoint);
}

json remote_request(const RemoteAnnotator& cfg, const Episode& episode) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", render_prompt(episode)}});
  // Image references follow the order of <image> placeholders in the prompt.
  content.push_back({{"type", "image_ref"}, {"id", episode.query_id}});
  for (const auto& cand : episode.candidates) {
    for (const auto& e : cand.exemplars) content.push_back({{"type", "image_ref"}, {"id", e.image_id}});
  }
  return {{"model", cfg.model_name}, {"messages", json::array({{{"role", "user"}, {"content", std::move(content)}}})}};
}

Decision annotate(const AnnotatorConfig& cfg, const Episode& episode, Rng& rng) {
  if (const auto* o = std::get_if<OracleAnnotator>(&cfg)) return oracle_decision(*o, episode, rng);
  return remote_decision(std::get<RemoteAnnotator>(cfg), episode);
}

}  // namespace taxon
