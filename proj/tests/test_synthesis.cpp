#include "taxon/synthesis.hpp"

#include <atomic>
#include <map>
#include <set>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "taxon/synthetic.hpp"
#include "test_util.hpp"

namespace taxon {
namespace {

Episode golden_episode() {
  Episode ep;
  ep.query_id = "query-001";
  ep.k_requested = 2;
  ep.n_requested = 2;
  ep.candidates = {
      {"sp1", "Animalia Arthropoda Insecta Lepidoptera Lycaenidae Brephidium exilis", {{"r1a", 0.93}, {"r1b", 0.88}}},
      {"sp2", "Animalia Arthropoda Insecta Lepidoptera Nymphalidae Danaus plexippus", {{"r2a", 0.71}}},
  };
  ep.label = GroundTruthLabel::classification("sp1");
  return ep;
}

TEST(PartitionTest, SplitsDisjointly) {
  const auto store = gen_synthetic_embeddings(2, 5, 4, 0.1, 1);
  const auto p = partition_pool(store, 0.2, 42);
  EXPECT_EQ(p.query_ids.size(), 2u);
  EXPECT_EQ(p.pool_ids.size(), 8u);
  std::set<std::string> all(p.query_ids.begin(), p.query_ids.end());
  for (const auto& id : p.pool_ids) EXPECT_TRUE(all.insert(id).second);
  EXPECT_EQ(all.size(), 10u);
  const auto again = partition_pool(store, 0.2, 42);
  EXPECT_EQ(again.query_ids, p.query_ids);
  EXPECT_THROW(partition_pool(store, 0.01, 1), PreconditionError);
}

TEST(SampleConfigTest, RangesAndUniformity) {
  Rng rng(7);
  std::map<int, int> ks, ns;
  const int draws = 130000;
  for (int i = 0; i < draws; ++i) {
    const auto c = sample_config(rng);
    ASSERT_GE(c.k, 4);
    ASSERT_LE(c.k, 16);
    ASSERT_GE(c.n, 1);
    ASSERT_LE(c.n, 4);
    ++ks[c.k];
    ++ns[c.n];
  }
  for (int k = 4; k <= 16; ++k) EXPECT_NEAR(static_cast<double>(ks[k]) / draws, 1.0 / 13.0, 0.01);
  for (int n = 1; n <= 4; ++n) EXPECT_NEAR(static_cast<double>(ns[n]) / draws, 0.25, 0.01);
  Rng a(3), b(3);
  for (int i = 0; i < 50; ++i) {
    const auto x = sample_config(a);
    const auto y = sample_config(b);
    EXPECT_EQ(x.k, y.k);
    EXPECT_EQ(x.n, y.n);
  }
}

TEST(RenderPromptTest, MatchesGoldenFile) {
  const auto golden = testing::slurp(std::string(TAXON_TEST_DATA_DIR) + "/golden_prompt.txt");
  ASSERT_FALSE(golden.empty());
  EXPECT_EQ(render_prompt(golden_episode()), golden);
}

TEST(RenderPromptTest, ReferenceBlocks) {
  auto ep = golden_episode();
  ep.candidates[0].exemplars.resize(1);
  const auto text = render_prompt(ep);
  auto count = [&](const std::string& s) {
    std::size_t c = 0;
    for (auto p = text.find(s); p != std::string::npos; p = text.find(s, p + 1)) ++c;
    return c;
  };
  EXPECT_EQ(count("Reference 1:"), 1u);
  EXPECT_EQ(count("Reference 2:"), 1u);
  EXPECT_EQ(count("R1I1: <image>"), 1u);
  EXPECT_EQ(count("R2I1: <image>"), 1u);
  EXPECT_EQ(count("R1I2"), 0u);
  ep.candidates[1].exemplars.clear();
  EXPECT_THROW(render_prompt(ep), PreconditionError);
}

TEST(ParseDecisionTest, ProtocolLines) {
  const std::vector<std::string> names = {"Danaus plexippus", "Brephidium exilis"};
  EXPECT_EQ(parse_decision("[Discovery]", names), Decision::discovery());
  EXPECT_EQ(parse_decision("[Classification]: Brephidium exilis", names), Decision::classification(1));
  EXPECT_EQ(parse_decision("Some reasoning.\n[Classification]:   Danaus plexippus  \n", names),
            Decision::classification(0));
  EXPECT_FALSE(parse_decision("the answer is species 3", names).format_valid());
  EXPECT_FALSE(parse_decision("", names).format_valid());
  EXPECT_FALSE(parse_decision("[Classification]: Danaus", names).format_valid());
  EXPECT_EQ(parse_decision("[Classification]: Danaus plexippus\nOn reflection:\n[Discovery]", names),
            Decision::discovery());
}

TEST(ParseDecisionTest, RoundTripsEveryCandidate) {
  const auto ep = golden_episode();
  for (std::size_t j = 0; j < ep.candidates.size(); ++j) {
    EXPECT_EQ(parse_decision("[Classification]: " + ep.candidates[j].species_name, ep), Decision::classification(j));
  }
}

TEST(OracleAnnotatorTest, ErrorRates) {
  auto ep = golden_episode();
  Rng rng(1);
  for (int i = 0; i < 200; ++i) EXPECT_EQ(annotate(OracleAnnotator{0.0}, ep, rng), Decision::classification(0));
  for (int i = 0; i < 200; ++i) {
    const auto d = annotate(OracleAnnotator{1.0}, ep, rng);
    EXPECT_TRUE(d.format_valid());
    EXPECT_FALSE(decision_matches(d, ep));
  }
  ep.label = GroundTruthLabel::discovery();
  EXPECT_EQ(annotate(OracleAnnotator{0.0}, ep, rng), Decision::discovery());
  for (int i = 0; i < 50; ++i) EXPECT_TRUE(annotate(OracleAnnotator{1.0}, ep, rng).is_classification());
  EXPECT_THROW(validate(OracleAnnotator{1.5}), PreconditionError);
}

TEST(ValidateAndEmitTest, KeepRule) {
  auto ep = golden_episode();
  EXPECT_TRUE(validate_and_emit(ep, Decision::classification(0)).kept);
  EXPECT_FALSE(validate_and_emit(ep, Decision::classification(1)).kept);
  EXPECT_FALSE(validate_and_emit(ep, Decision::classification(0, false)).kept);
  ep.label = GroundTruthLabel::discovery();
  EXPECT_TRUE(validate_and_emit(ep, Decision::discovery()).kept);
  EXPECT_FALSE(validate_and_emit(ep, Decision::invalid()).kept);
}

class MockAnnotator {
 public:
  explicit MockAnnotator(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/chat", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockAnnotator() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

TEST(RemoteAnnotatorTest, ParsesReplyContent) {
  nlohmann::json seen;
  MockAnnotator mock([&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    res.set_content(R"({"content":"Reasoning here.\n[Discovery]"})", "application/json");
  });
  RemoteAnnotator cfg{mock.endpoint(), "mock-model"};
  Rng rng(1);
  EXPECT_EQ(annotate(cfg, golden_episode(), rng), Decision::discovery());
  EXPECT_EQ(seen["model"], "mock-model");
  const auto& content = seen["messages"][0]["content"];
  EXPECT_EQ(content[0]["text"], render_prompt(golden_episode()));
  EXPECT_EQ(content[1]["id"], "query-001");
  EXPECT_EQ(content.size(), 5u);
}

TEST(RemoteAnnotatorTest, RetriesThenFails) {
  std::atomic<int> calls{0};
  MockAnnotator mock([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 503;
  });
  RemoteAnnotator cfg{mock.endpoint(), "m", 1, 2, 1, 5};
  Rng rng(1);
  EXPECT_THROW(annotate(cfg, golden_episode(), rng), AnnotationError);
  EXPECT_EQ(calls.load(), 3);
}

TEST(RemoteAnnotatorTest, RetryRecovers) {
  std::atomic<int> calls{0};
  MockAnnotator mock([&](const httplib::Request&, httplib::Response& res) {
    if (calls++ == 0) {
      res.status = 500;
      return;
    }
    res.set_content(R"({"content":"[Classification]: Animalia Arthropoda Insecta Lepidoptera Nymphalidae Danaus plexippus"})",
                    "application/json");
  });
  RemoteAnnotator cfg{mock.endpoint(), "m", 1, 3, 1, 5};
  Rng rng(1);
  EXPECT_EQ(annotate(cfg, golden_episode(), rng), Decision::classification(1));
}

TEST(RemoteAnnotatorTest, RejectsMalformedEndpoint) {
  EXPECT_THROW(validate(RemoteAnnotator{"ftp://x", "m"}), PreconditionError);
  EXPECT_NO_THROW(validate(RemoteAnnotator{"http://localhost:8080/v1", "m"}));
}

TEST(SynthesizeTest, OracleErrorRateZeroKeepsEverything) {
  const auto store = gen_synthetic_embeddings(30, 10, 8, 0.3, 5);
  SynthConfig cfg;
  cfg.seed = 9;
  cfg.encoder_tag = "enc";
  const auto samples = synthesize(store, cfg);
  EXPECT_EQ(samples.size(), 60u);
  SynthStats stats;
  for (const auto& s : samples) {
    stats.add(s);
    EXPECT_TRUE(s.kept);
    for (const auto& c : s.episode.candidates) {
      for (const auto& e : c.exemplars) EXPECT_NE(e.image_id, s.episode.query_id);
    }
    EXPECT_GE(s.episode.k_requested, 4);
    EXPECT_LE(s.episode.k_requested, 16);
  }
  EXPECT_EQ(stats.kept, 60u);
  EXPECT_EQ(stats.per_encoder.at("enc").kept, 60u);

  cfg.annotator = OracleAnnotator{1.0};
  for (const auto& s : synthesize(store, cfg)) EXPECT_FALSE(s.kept);
}

TEST(SynthesizeTest, ThreadCountDoesNotChangeOutput) {
  const auto store = gen_synthetic_embeddings(20, 8, 8, 0.3, 6);
  SynthConfig cfg;
  cfg.seed = 4;
  cfg.annotator = OracleAnnotator{0.3};
  const auto a = synthesize(store, cfg);
  cfg.threads = 4;
  const auto b = synthesize(store, cfg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].episode.candidates, b[i].episode.candidates);
    EXPECT_EQ(a[i].annotator_decision, b[i].annotator_decision);
  }
}

SynthSample fake_sample(const std::string& id, bool classification) {
  Episode ep;
  ep.query_id = id;
  ep.k_requested = 4;
  ep.n_requested = 1;
  ep.candidates = {{"s0", "A", {{"x", 0.5}}}};
  ep.label = classification ? GroundTruthLabel::classification("s0") : GroundTruthLabel::discovery();
  SynthSample s;
  s.episode = std::move(ep);
  s.kept = true;
  return s;
}

EncoderPool make_pool(const std::string& tag, int size, double class_share) {
  EncoderPool p{tag, {}};
  const int n_cls = static_cast<int>(size * class_share);
  for (int i = 0; i < size; ++i) p.samples.push_back(fake_sample(tag + std::to_string(i), i < n_cls));
  return p;
}

double class_fraction(const std::vector<SynthSample>& v) {
  std::size_t c = 0;
  for (const auto& s : v) c += s.episode.label.is_classification();
  return static_cast<double>(c) / static_cast<double>(v.size());
}

TEST(StratifyTest, HitsTargetAndPrefersPools) {
  const std::vector<EncoderPool> pools = {make_pool("hi", 6000, 0.95), make_pool("mid", 6000, 0.75),
                                          make_pool("lo", 6000, 0.40)};
  const auto out = stratify(pools, 0.779, 8000, 1);
  ASSERT_EQ(out.size(), 8000u);
  EXPECT_NEAR(class_fraction(out), 0.779, 0.01);
  std::map<std::string, int> disc_by_pool;
  std::set<std::string> ids;
  for (const auto& s : out) {
    EXPECT_TRUE(ids.insert(s.episode.query_id).second);
    if (s.episode.label.is_discovery()) ++disc_by_pool[s.episode.query_id.substr(0, 2)];
  }
  // 1768 discovery samples fit in the low-precision pool's 3600.
  EXPECT_EQ(disc_by_pool["lo"], 1768);
  const auto again = stratify(pools, 0.779, 8000, 1);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i].episode.query_id, again[i].episode.query_id);
}

TEST(StratifyTest, DefaultTargetComposition) {
  const std::vector<EncoderPool> pools = {make_pool("a", 50000, 0.9), make_pool("b", 50000, 0.6)};
  const auto out = stratify(pools, kDefaultTargetClassFraction, 76621, 3);
  std::size_t c = 0;
  for (const auto& s : out) c += s.episode.label.is_classification();
  EXPECT_EQ(c, 59709u);
  EXPECT_EQ(out.size() - c, 16912u);
}

TEST(StratifyTest, HalfAndHalf) {
  const std::vector<EncoderPool> pools = {make_pool("a", 2000, 0.6), make_pool("b", 2000, 0.4)};
  const auto out = stratify(pools, 0.5, 1000, 2);
  std::size_t c = 0;
  for (const auto& s : out) c += s.episode.label.is_classification();
  EXPECT_NEAR(static_cast<double>(c), 500.0, 10.0);
}

TEST(StratifyTest, InsufficientDiscovery) {
  const std::vector<EncoderPool> pools = {make_pool("a", 1000, 1.0)};
  try {
    stratify(pools, 0.5, 500, 1);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient discovery samples"), std::string::npos) << e.what();
  }
}

TEST(SynthStatsTest, Json) {
  SynthStats st;
  st.add(fake_sample("x", true));
  auto dropped = fake_sample("y", false);
  dropped.kept = false;
  st.add(dropped);
  const auto j = st.to_json();
  EXPECT_EQ(j["kept"], 1);
  EXPECT_EQ(j["dropped"], 1);
  EXPECT_EQ(j["classification"], 1);
  EXPECT_EQ(j["discovery"], 0);
  EXPECT_TRUE(j["per_encoder"].contains(""));
}

}  // namespace
}  // namespace taxon
