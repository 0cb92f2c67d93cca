#include "taxon/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "taxon/embedding_store.hpp"
#include "taxon/evaluation.hpp"
#include "taxon/retrieval_env.hpp"
#include "taxon/synthesis.hpp"
#include "taxon/synthetic.hpp"
#include "taxon/trainer.hpp"

namespace taxon::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void configure_logging() {
  auto logger = spdlog::get("taxon_env");
  if (!logger) logger = spdlog::stderr_color_mt("taxon_env");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("TAXON_ENV_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
  }
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

/// Config echo next to an output file or inside an output directory.
void write_echo(const CLI::App& app, const fs::path& target, bool is_dir) {
  const fs::path echo = is_dir ? target / "config.toml" : fs::path(target.string() + ".config.toml");
  ensure_parent(echo);
  std::ofstream out(echo);
  out << app.config_to_str(true, false);
  spdlog::debug("wrote config echo {}", echo.string());
}

std::pair<std::string, std::string> split_tag(const std::string& arg, char sep) {
  const auto at = arg.find(sep);
  if (at == std::string::npos) return {"", arg};
  return {arg.substr(0, at), arg.substr(at + 1)};
}

std::vector<EmbeddingRecord> read_record_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open {}", path));
  std::vector<EmbeddingRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      out.push_back({j.at("image_id").get<std::string>(), j.at("species_id").get<std::string>(),
                     j.at("species_name").get<std::string>(), j.at("vector").get<std::vector<float>>()});
    } catch (const json::exception& e) {
      throw Error(fmt::format("{}:{}: {}", path, lineno, e.what()));
    }
  }
  return out;
}

void write_json(const fs::path& path, const json& j) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write {}", path.string()));
  out << j.dump(2) << "\n";
}

class JsonlLog {
 public:
  explicit JsonlLog(const std::string& path) {
    if (!path.empty()) {
      ensure_parent(path);
      out_.open(path);
      if (!out_) throw Error(fmt::format("cannot write {}", path));
    }
  }
  void operator()(const EpochLog& e) {
    spdlog::info("{} epoch {}: objective {:.6f} accuracy {:.4f} discovery {:.4f}", e.stage, e.epoch,
                 e.loss_or_objective, e.accuracy, e.discovery_rate);
    if (out_.is_open()) out_ << epoch_log_json(e) << "\n";
  }

 private:
  std::ofstream out_;
};

HardFilterRule parse_rule(int group_size, const std::vector<int>& cls, const std::vector<int>& disc) {
  if (cls.size() != 2 || disc.size() != 2) throw PreconditionError("keep ranges take two values: min,max");
  HardFilterRule r{group_size, cls[0], cls[1], disc[0], disc[1]};
  r.validate();
  return r;
}

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
};

}  // namespace

int run(const std::vector<std::string>& argv) {
  configure_logging();
  CLI::App app{"Retrieval-augmented open-set species identification environment"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Replay a config echo written by a previous run");
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  std::function<void()> action;
  auto sub = [&](const char* name, const char* desc) {
    auto* s = app.add_subcommand(name, desc);
    s->fallthrough();
    s->configurable();
    return s;
  };

  // build-store
  std::string bs_input, bs_out;
  {
    auto* s = sub("build-store", "Build a store directory from JSONL records with inline vectors");
    s->add_option("--input", bs_input, "JSONL: image_id, species_id, species_name, vector")->required();
    s->add_option("--out", bs_out, "Output store directory")->required();
    s->callback([&] {
      action = [&] {
        EmbeddingStore store(read_record_jsonl(bs_input));
        store.save(bs_out);
        write_echo(app, bs_out, true);
        spdlog::info("store {}: {} records, {} species, dim {}", bs_out, store.size(), store.species_count(),
                     store.dim());
      };
    });
  }

  // gen-synthetic-embeddings
  int gs_species = 50, gs_per = 20, gs_dim = 16;
  double gs_sigma = 0.05;
  std::string gs_out;
  {
    auto* s = sub("gen-synthetic-embeddings", "Write a clustered synthetic embedding store");
    s->add_option("--species", gs_species)->capture_default_str();
    s->add_option("--per-species", gs_per)->capture_default_str();
    s->add_option("--dim", gs_dim)->capture_default_str();
    s->add_option("--sigma", gs_sigma)->capture_default_str();
    s->add_option("--out", gs_out, "Output store directory")->required();
    s->callback([&] {
      action = [&] {
        auto store = gen_synthetic_embeddings(gs_species, gs_per, gs_dim, gs_sigma, g.seed, gs_out);
        write_echo(app, gs_out, true);
        spdlog::info("wrote {} records to {}", store.size(), gs_out);
      };
    });
  }

  // retrieve
  std::string rt_store, rt_queries, rt_encoder, rt_out;
  int rt_k = 16, rt_n = 4;
  {
    auto* s = sub("retrieve", "Build labeled episodes for queries against a store");
    s->add_option("--store", rt_store)->required();
    s->add_option("--queries", rt_queries, "Query store directory")->required();
    s->add_option("--k", rt_k)->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--n", rt_n)->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--encoder", rt_encoder, "Encoder tag recorded in episodes");
    s->add_option("--out", rt_out, "Episode JSONL")->required();
    s->callback([&] {
      action = [&] {
        const auto store = EmbeddingStore::load(rt_store);
        const auto queries = queries_from_store(EmbeddingStore::load(rt_queries));
        const auto eps = make_episodes(store, queries, rt_k, rt_n, rt_encoder, g.threads);
        ensure_parent(rt_out);
        write_episodes(rt_out, eps);
        write_echo(app, rt_out, false);
        spdlog::info("wrote {} episodes to {}", eps.size(), rt_out);
      };
    });
  }

  // passk
  std::string pk_store, pk_queries, pk_out, pk_policy;
  std::vector<int> pk_ks{1, 2, 4, 8, 16, 32};
  int pk_n = 4;
  {
    auto* s = sub("passk", "Pass@k curve, optionally with policy accuracy");
    s->add_option("--store", pk_store)->required();
    s->add_option("--queries", pk_queries)->required();
    s->add_option("--k", pk_ks, "Comma-separated k values")->delimiter(',')->capture_default_str();
    s->add_option("--policy", pk_policy, "Adds an accuracy column for this policy");
    s->add_option("--n", pk_n, "Exemplars per candidate for the accuracy column")->capture_default_str();
    s->add_option("--out", pk_out, "CSV output")->required();
    s->callback([&] {
      action = [&] {
        const auto store = EmbeddingStore::load(pk_store);
        const auto queries = queries_from_store(EmbeddingStore::load(pk_queries));
        auto ks = pk_ks;
        std::sort(ks.begin(), ks.end());
        const auto rows = passk_curve(store, queries, ks, g.threads);
        std::vector<double> acc;
        if (!pk_policy.empty()) {
          LinearSoftmaxPolicy policy(load_params(pk_policy));
          for (int k : ks) {
            acc.push_back(
                evaluate(policy, make_episodes(store, queries, k, pk_n, {}, g.threads), g.threads).identification_accuracy);
          }
        }
        ensure_parent(pk_out);
        write_passk_csv(pk_out, rows, acc);
        write_echo(app, pk_out, false);
      };
    });
  }

  // synth
  std::vector<std::string> sy_stores;
  std::string sy_annotator = "oracle", sy_endpoint, sy_model, sy_out;
  double sy_fraction = 0.2, sy_error = 0.0, sy_target = kDefaultTargetClassFraction;
  int sy_inflight = 4, sy_retries = 3, sy_total = 0;
  {
    auto* s = sub("synth", "Synthesize validated training episodes");
    s->add_option("--store", sy_stores, "Store directory, optionally tag=path; repeat per encoder")->required();
    s->add_option("--query-fraction", sy_fraction)->capture_default_str();
    s->add_option("--annotator", sy_annotator)->check(CLI::IsMember({"oracle", "remote"}))->capture_default_str();
    s->add_option("--error-rate", sy_error, "Oracle annotator error rate")->capture_default_str();
    s->add_option("--endpoint", sy_endpoint, "Remote annotator URL");
    s->add_option("--model", sy_model, "Remote annotator model name");
    s->add_option("--max-in-flight", sy_inflight)->capture_default_str();
    s->add_option("--retry-limit", sy_retries)->capture_default_str();
    s->add_option("--target-fraction", sy_target, "Classification share after stratification")
        ->capture_default_str();
    s->add_option("--total", sy_total, "Stratify to this many samples (0: keep all)")->capture_default_str();
    s->add_option("--out", sy_out, "Output directory")->required();
    s->callback([&] {
      action = [&] {
        AnnotatorConfig annot = OracleAnnotator{sy_error};
        if (sy_annotator == "remote") annot = RemoteAnnotator{sy_endpoint, sy_model, sy_inflight, sy_retries};
        std::vector<EncoderPool> pools;
        std::vector<Episode> rejected;
        SynthStats stats;
        for (std::size_t i = 0; i < sy_stores.size(); ++i) {
          auto [tag, path] = split_tag(sy_stores[i], '=');
          if (tag.empty()) tag = fs::path(path).filename().string();
          const auto store = EmbeddingStore::load(path);
          SynthConfig cfg{sy_fraction, g.seed, tag, annot, g.threads};
          auto samples = synthesize(store, cfg);
          for (const auto& smp : samples) {
            stats.add(smp);
            if (!smp.kept && !smp.annotation_failed) rejected.push_back(smp.episode);
          }
          pools.push_back({tag, std::move(samples)});
        }
        std::vector<Episode> emitted;
        if (sy_total > 0) {
          for (auto& smp : stratify(pools, sy_target, sy_total, g.seed)) emitted.push_back(std::move(smp.episode));
        } else {
          for (const auto& p : pools)
            for (const auto& smp : p.samples)
              if (smp.kept) emitted.push_back(smp.episode);
        }
        fs::create_directories(sy_out);
        write_episodes((fs::path(sy_out) / "episodes.jsonl").string(), emitted);
        write_episodes((fs::path(sy_out) / "rejected.jsonl").string(), rejected);
        auto sj = stats.to_json();
        std::size_t n_cls = 0;
        for (const auto& e : emitted) n_cls += e.label.is_classification() ? 1 : 0;
        sj["emitted"] = {{"total", emitted.size()}, {"classification", n_cls}, {"discovery", emitted.size() - n_cls}};
        write_json(fs::path(sy_out) / "stats.json", sj);
        write_echo(app, sy_out, true);
        spdlog::info("kept {} / dropped {}; emitted {}", stats.kept, stats.dropped, emitted.size());
      };
    });
  }

  // train-sft
  std::string sft_data, sft_init, sft_out, sft_log;
  SftConfig sft_cfg;
  {
    auto* s = sub("train-sft", "Maximum-likelihood training of the reference policy");
    s->add_option("--data", sft_data, "Episode JSONL")->required();
    s->add_option("--init", sft_init, "Initial policy (default zeros)");
    s->add_option("--steps", sft_cfg.steps)->capture_default_str();
    s->add_option("--lr", sft_cfg.learning_rate)->capture_default_str();
    s->add_option("--batch-size", sft_cfg.batch_size, "0: full batch")->capture_default_str();
    s->add_option("--log", sft_log, "Training log JSONL");
    s->add_option("--out", sft_out, "Policy JSON")->required();
    s->callback([&] {
      action = [&] {
        const auto data = read_episodes(sft_data);
        const auto init = sft_init.empty() ? PolicyParams{} : load_params(sft_init);
        sft_cfg.seed = g.seed;
        JsonlLog log(sft_log);
        const auto params = train_sft(init, data, sft_cfg, std::ref(log));
        ensure_parent(sft_out);
        save_params(sft_out, params);
        write_echo(app, sft_out, false);
      };
    });
  }

  // filter-hard
  std::string fh_policy, fh_episodes, fh_out;
  int fh_group = 8, fh_total = 0;
  std::vector<int> fh_cls{1, 7}, fh_disc{1, 3};
  {
    auto* s = sub("filter-hard", "Keep partially solved episodes, optionally k-weighted resampling");
    s->add_option("--policy", fh_policy)->required();
    s->add_option("--episodes", fh_episodes)->required();
    s->add_option("--group-size", fh_group)->capture_default_str();
    s->add_option("--class-range", fh_cls, "min,max correct rollouts kept")->delimiter(',')->capture_default_str();
    s->add_option("--discovery-range", fh_disc)->delimiter(',')->capture_default_str();
    s->add_option("--k-weighted-total", fh_total, "Resample to this size with k-proportional weights")
        ->capture_default_str();
    s->add_option("--out", fh_out)->required();
    s->callback([&] {
      action = [&] {
        const auto rule = parse_rule(fh_group, fh_cls, fh_disc);
        const auto eps = read_episodes(fh_episodes);
        auto hard = select_hard(load_params(fh_policy), eps, rule, g.seed, g.threads);
        spdlog::info("kept {} of {} episodes", hard.size(), eps.size());
        if (fh_total > 0) {
          if (hard.empty()) throw Error("no hard episodes to resample");
          hard = k_weighted_sample(hard, fh_total, g.seed);
        }
        ensure_parent(fh_out);
        write_episodes(fh_out, hard);
        write_echo(app, fh_out, false);
      };
    });
  }

  // train-grpo
  std::string gr_policy, gr_data, gr_out, gr_log;
  GrpoConfig gr_cfg;
  {
    auto* s = sub("train-grpo", "Group relative policy optimization from an SFT checkpoint");
    s->add_option("--policy", gr_policy, "Initial policy")->required();
    s->add_option("--data", gr_data, "Episode JSONL")->required();
    s->add_option("--epochs", gr_cfg.epochs)->capture_default_str();
    s->add_option("--group-size", gr_cfg.group_size)->capture_default_str();
    s->add_option("--epsilon", gr_cfg.epsilon)->capture_default_str();
    s->add_option("--lr", gr_cfg.learning_rate)->capture_default_str();
    s->add_option("--batch-size", gr_cfg.batch_size)->capture_default_str();
    s->add_option("--class-fraction", gr_cfg.class_fraction)->capture_default_str();
    s->add_option("--log", gr_log);
    s->add_option("--out", gr_out)->required();
    s->callback([&] {
      action = [&] {
        gr_cfg.seed = g.seed;
        gr_cfg.threads = g.threads;
        const auto data = read_episodes(gr_data);
        JsonlLog log(gr_log);
        const auto params = train_grpo(load_params(gr_policy), data, gr_cfg, std::ref(log));
        ensure_parent(gr_out);
        save_params(gr_out, params);
        write_echo(app, gr_out, false);
      };
    });
  }

  // evaluate
  std::string ev_policy, ev_episodes, ev_out = "metrics.json";
  {
    auto* s = sub("evaluate", "Accuracy and discovery rate of a policy on episodes");
    s->add_option("--policy", ev_policy)->required();
    s->add_option("--episodes", ev_episodes)->required();
    s->add_option("--out", ev_out, "Metrics JSON")->capture_default_str();
    s->callback([&] {
      action = [&] {
        const auto report = evaluate(load_params(ev_policy), read_episodes(ev_episodes), g.threads);
        write_json(ev_out, report.to_json());
        write_echo(app, ev_out, false);
        std::cout << report.to_json().dump(2) << "\n";
      };
    });
  }

  // sweep
  std::string sw_policy, sw_store, sw_queries, sw_out;
  std::vector<int> sw_ks = kDefaultSweepK, sw_ns = kDefaultSweepN;
  {
    auto* s = sub("sweep", "Accuracy over a (k, n) grid");
    s->add_option("--policy", sw_policy)->required();
    s->add_option("--store", sw_store)->required();
    s->add_option("--queries", sw_queries)->required();
    s->add_option("--k", sw_ks)->delimiter(',')->capture_default_str();
    s->add_option("--n", sw_ns)->delimiter(',')->capture_default_str();
    s->add_option("--out", sw_out, "CSV output")->required();
    s->callback([&] {
      action = [&] {
        const auto store = EmbeddingStore::load(sw_store);
        const auto queries = queries_from_store(EmbeddingStore::load(sw_queries));
        const auto rows =
            scaling_sweep(LinearSoftmaxPolicy(load_params(sw_policy)), store, queries, sw_ks, sw_ns, g.threads);
        ensure_parent(sw_out);
        write_scaling_csv(sw_out, rows);
        write_echo(app, sw_out, false);
      };
    });
  }

  // cross-domain
  std::string cd_policy, cd_out;
  std::vector<std::string> cd_domains;
  int cd_k = 16, cd_n = 4;
  {
    auto* s = sub("cross-domain", "Index-by-query matrix of accuracy (diagonal) and discovery rate");
    s->add_option("--policy", cd_policy)->required();
    s->add_option("--domain", cd_domains, "tag=store_dir:queries_dir, repeated")->required();
    s->add_option("--k", cd_k)->capture_default_str();
    s->add_option("--n", cd_n)->capture_default_str();
    s->add_option("--out", cd_out, "CSV output")->required();
    s->callback([&] {
      action = [&] {
        std::vector<EmbeddingStore> stores;
        stores.reserve(cd_domains.size());
        std::vector<Domain> domains;
        for (const auto& entry : cd_domains) {
          auto [tag, paths] = split_tag(entry, '=');
          auto [store_dir, query_dir] = split_tag(paths, ':');
          if (tag.empty() || store_dir.empty()) throw PreconditionError("--domain expects tag=store_dir:queries_dir");
          stores.push_back(EmbeddingStore::load(store_dir));
          domains.push_back({tag, nullptr, queries_from_store(EmbeddingStore::load(query_dir))});
        }
        for (std::size_t i = 0; i < domains.size(); ++i) domains[i].store = &stores[i];
        const auto m = cross_domain_matrix(LinearSoftmaxPolicy(load_params(cd_policy)), domains, cd_k, cd_n, g.threads);
        ensure_parent(cd_out);
        write_matrix_csv(cd_out, m);
        write_echo(app, cd_out, false);
      };
    });
  }

  // msp-baseline
  std::string ms_policy, ms_train, ms_val, ms_eval, ms_mode = "cls-preserving", ms_out;
  double ms_drop = 0.05;
  {
    auto* s = sub("msp-baseline", "Maximum-softmax-probability rejection threshold");
    s->add_option("--policy", ms_policy)->required();
    s->add_option("--train-episodes", ms_train)->required();
    s->add_option("--val-episodes", ms_val, "Required for disc-optimized");
    s->add_option("--episodes", ms_eval, "Evaluate the thresholded closed-set policy here");
    s->add_option("--mode", ms_mode)->check(CLI::IsMember({"cls-preserving", "disc-optimized"}))->capture_default_str();
    s->add_option("--max-drop", ms_drop, "Largest relative accuracy drop")->capture_default_str();
    s->add_option("--out", ms_out, "Result JSON")->required();
    s->callback([&] {
      action = [&] {
        LinearSoftmaxPolicy policy(load_params(ms_policy));
        std::vector<double> train_conf;
        for (const auto& ep : read_episodes(ms_train)) train_conf.push_back(closed_set_prediction(policy, ep).confidence);
        std::vector<ValidationPoint> val;
        if (!ms_val.empty()) {
          for (const auto& ep : read_episodes(ms_val)) {
            const auto pred = closed_set_prediction(policy, ep);
            val.push_back({pred.confidence, decision_matches(Decision::classification(pred.candidate), ep)});
          }
        }
        const auto rule =
            ms_mode == "cls-preserving" ? ThresholdRule::cls_preserving() : ThresholdRule::disc_optimized(ms_drop);
        const double threshold = msp_baseline(train_conf, val, rule);
        json result{{"mode", ms_mode}, {"threshold", threshold}};
        if (!ms_eval.empty()) {
          std::size_t n_cls = 0, ok_cls = 0, n_disc = 0, ok_disc = 0;
          for (const auto& ep : read_episodes(ms_eval)) {
            const auto d = msp_decide(policy, ep, threshold);
            if (ep.label.is_classification()) {
              ++n_cls;
              ok_cls += decision_matches(d, ep) ? 1 : 0;
            } else {
              ++n_disc;
              ok_disc += d.is_discovery() ? 1 : 0;
            }
          }
          result["classification_accuracy"] = n_cls ? static_cast<double>(ok_cls) / static_cast<double>(n_cls) : 0.0;
          result["discovery_rate"] = n_disc ? static_cast<double>(ok_disc) / static_cast<double>(n_disc) : 0.0;
        }
        write_json(ms_out, result);
        write_echo(app, ms_out, false);
        std::cout << result.dump(2) << "\n";
      };
    });
  }

  try {
    std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (action) action();
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace taxon::cli
