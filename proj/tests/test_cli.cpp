#include "taxon/cli.hpp"

#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "taxon/embedding_store.hpp"
#include "taxon/policy.hpp"
#include "taxon/retrieval_env.hpp"
#include "test_util.hpp"

namespace taxon {
namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "taxon_env");
  return cli::run(args);
}

std::vector<std::string> lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    setenv("TAXON_ENV_LOG", "error", 1);
    ASSERT_EQ(run({"--seed", "3", "gen-synthetic-embeddings", "--species", "12", "--per-species", "5", "--dim", "8",
                   "--sigma", "0.05", "--out", dir.str("store")}),
              0);
    // Same centers, no noise: every query sits on its species center.
    ASSERT_EQ(run({"--seed", "3", "gen-synthetic-embeddings", "--species", "12", "--per-species", "2", "--dim", "8",
                   "--sigma", "0", "--out", dir.str("queries")}),
              0);
  }
  testing::TempDir dir;
};

TEST_F(CliTest, GeneratedStoreRoundTrips) {
  const auto store = EmbeddingStore::load(dir.path() / "store");
  EXPECT_EQ(store.size(), 60u);
  EXPECT_EQ(store.dim(), 8u);
  EXPECT_EQ(store.species_count(), 12u);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "store" / "config.toml"));
}

TEST_F(CliTest, PasskWritesOneRowPerK) {
  ASSERT_EQ(run({"passk", "--store", dir.str("store"), "--queries", dir.str("queries"), "--k", "1,2,4", "--out",
                 dir.str("passk.csv")}),
            0);
  const auto rows = lines(dir.path() / "passk.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "k,pass_at_k");
  EXPECT_EQ(rows[1].substr(0, 2), "1,");
  EXPECT_EQ(rows[3], "4,1.000000");
}

TEST_F(CliTest, RetrieveThenEvaluate) {
  ASSERT_EQ(run({"retrieve", "--store", dir.str("store"), "--queries", dir.str("queries"), "--k", "4", "--n", "2",
                 "--encoder", "toy", "--out", dir.str("eps.jsonl")}),
            0);
  const auto eps = read_episodes(dir.str("eps.jsonl"));
  ASSERT_EQ(eps.size(), 24u);
  EXPECT_EQ(eps[0].encoder_tag, "toy");
  EXPECT_EQ(eps[0].candidates.size(), 4u);

  PolicyParams params;
  params.weights = {0, 20, 0, 0, 0};
  save_params(dir.str("policy.json"), params);
  ASSERT_EQ(run({"evaluate", "--policy", dir.str("policy.json"), "--episodes", dir.str("eps.jsonl"), "--out",
                 dir.str("metrics.json")}),
            0);
  const auto m = nlohmann::json::parse(testing::slurp(dir.path() / "metrics.json"));
  EXPECT_EQ(m["n_queries"], 24);
  EXPECT_DOUBLE_EQ(m["classification_accuracy"].get<double>(), 1.0);
}

TEST_F(CliTest, ConfigEchoReplaysTheRun) {
  ASSERT_EQ(run({"--seed", "11", "retrieve", "--store", dir.str("store"), "--queries", dir.str("queries"), "--k",
                 "3", "--n", "1", "--out", dir.str("first.jsonl")}),
            0);
  const auto echo = dir.path() / "first.jsonl.config.toml";
  ASSERT_TRUE(std::filesystem::exists(echo));
  const auto text = testing::slurp(echo);
  EXPECT_NE(text.find("seed=11"), std::string::npos) << text;
  const auto original = testing::slurp(dir.path() / "first.jsonl");
  std::filesystem::remove(dir.path() / "first.jsonl");
  ASSERT_EQ(run({"--config", echo.string()}), 0);
  EXPECT_EQ(testing::slurp(dir.path() / "first.jsonl"), original);
}

TEST_F(CliTest, UsageAndRuntimeErrors) {
  EXPECT_EQ(run({"no-such-command"}), 2);
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"retrieve", "--store", dir.str("store")}), 2);
  EXPECT_EQ(run({"evaluate", "--policy", dir.str("missing.json"), "--episodes", dir.str("missing.jsonl")}), 1);
}

TEST_F(CliTest, BinaryExitCodes) {
  const std::string bin = TAXON_ENV_BINARY;
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " bogus >/dev/null 2>&1").c_str())), 2);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " --help >/dev/null 2>&1").c_str())), 0);
}

TEST_F(CliTest, FullPipeline) {
  const auto s = [&](const char* f) { return dir.str(f); };
  ASSERT_EQ(run({"--seed", "5", "gen-synthetic-embeddings", "--species", "40", "--per-species", "10", "--dim", "8",
                 "--sigma", "0.3", "--out", s("big")}),
            0);
  ASSERT_EQ(run({"--seed", "5", "synth", "--store", "enc=" + s("big"), "--out", s("synth")}), 0);
  const auto stats = nlohmann::json::parse(testing::slurp(dir.path() / "synth" / "stats.json"));
  EXPECT_EQ(stats["kept"], 80);
  EXPECT_EQ(stats["per_encoder"]["enc"]["kept"], 80);
  ASSERT_EQ(run({"train-sft", "--data", s("synth/episodes.jsonl"), "--steps", "30", "--log", s("sft.jsonl"),
                 "--out", s("sft.json")}),
            0);
  EXPECT_FALSE(lines(dir.path() / "sft.jsonl").empty());
  ASSERT_EQ(run({"filter-hard", "--policy", s("sft.json"), "--episodes", s("synth/episodes.jsonl"), "--out",
                 s("hard.jsonl")}),
            0);
  ASSERT_EQ(run({"train-grpo", "--policy", s("sft.json"), "--data", s("synth/episodes.jsonl"), "--epochs", "1",
                 "--batch-size", "16", "--log", s("grpo.jsonl"), "--out", s("grpo.json")}),
            0);
  ASSERT_EQ(run({"evaluate", "--policy", s("grpo.json"), "--episodes", s("synth/episodes.jsonl"), "--out",
                 s("m.json")}),
            0);
  ASSERT_EQ(run({"sweep", "--policy", s("grpo.json"), "--store", s("store"), "--queries", s("queries"), "--k",
                 "2,4", "--n", "1,2", "--out", s("sweep.csv")}),
            0);
  EXPECT_EQ(lines(dir.path() / "sweep.csv").size(), 5u);
  ASSERT_EQ(run({"msp-baseline", "--policy", s("grpo.json"), "--train-episodes", s("synth/episodes.jsonl"),
                 "--val-episodes", s("synth/episodes.jsonl"), "--mode", "disc-optimized", "--out", s("msp.json")}),
            0);
  EXPECT_TRUE(nlohmann::json::parse(testing::slurp(dir.path() / "msp.json")).contains("threshold"));
}

TEST_F(CliTest, CrossDomainAndOverlap) {
  ASSERT_EQ(run({"--seed", "21", "gen-synthetic-embeddings", "--species", "6", "--per-species", "3", "--dim", "8",
                 "--out", dir.str("other")}),
            0);
  PolicyParams params;
  save_params(dir.str("policy.json"), params);
  // Both generated domains use the same species ids, so pairing them overlaps.
  EXPECT_EQ(run({"cross-domain", "--policy", dir.str("policy.json"), "--domain",
                 "a=" + dir.str("store") + ":" + dir.str("queries"), "--domain",
                 "b=" + dir.str("other") + ":" + dir.str("other"), "--out", dir.str("m.csv")}),
            1);
  ASSERT_EQ(run({"cross-domain", "--policy", dir.str("policy.json"), "--domain",
                 "a=" + dir.str("store") + ":" + dir.str("queries"), "--k", "3", "--out", dir.str("m.csv")}),
            0);
  EXPECT_EQ(lines(dir.path() / "m.csv").size(), 2u);
}

}  // namespace
}  // namespace taxon
