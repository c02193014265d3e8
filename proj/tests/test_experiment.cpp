#include <doctest.h>

#include <fstream>

#include <json.hpp>

#include "ser/experiment.hpp"
#include "ser/fingerprint.hpp"
#include "ser/synth_corpus.hpp"
#include "test_util.hpp"

using namespace ser;
using namespace ser::exp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

/// A small synthetic corpus with a fast config; `edit` adjusts the JSON.
fs::path make_corpus(const std::string& name, const std::function<void(json&)>& edit = {}) {
  const fs::path dir = test::scratch_dir(name);
  SynthCorpusOptions o;
  o.target_clips = 48;
  o.train_clips = 36;
  o.source_clips = 32;
  const SynthCorpusFiles files = write_synthetic_corpus(dir, o);
  json cfg = json::parse(slurp(files.config));
  cfg["embedder"] = {{"patience", 5}, {"max_epochs", 15}, {"batch_size", 64}, {"learning_rate", 1e-3}};
  cfg["al"]["folds"] = 3;
  cfg["al"]["grid"] = {{"C", {1, 10}}, {"gamma", {0.001, 0.01}}};
  cfg["da"]["max_epochs"] = 4;
  cfg["da"]["warmup_critic_steps"] = 5;
  cfg["da"]["critic_steps"] = 2;
  cfg["da"]["smoothing_window"] = 2;
  cfg["da"]["source"] = {{"patience", 5}, {"max_epochs", 10}, {"batch_size", 32}};
  if (edit) edit(cfg);
  std::ofstream(files.config) << cfg.dump(2);
  return files.config;
}

void chain_to_queue(const ExperimentConfig& c) {
  cmd_features(c, 2);
  cmd_embed(c);
  cmd_cluster(c);
  cmd_queue(c);
}

}  // namespace

TEST_CASE("config parsing") {
  const fs::path path = make_corpus("exp_config");
  const ExperimentConfig c = ExperimentConfig::load(path);
  CHECK(c.seed == 1);
  CHECK(c.run_dir == path.parent_path() / "run");
  CHECK(c.target.manifest == path.parent_path() / "manifest.jsonl");
  CHECK(c.sources.size() == 1);
  CHECK(c.folds == 3);
  CHECK(c.adaptation.max_epochs == 4);
  CHECK(c.grid.C == std::vector<double>{1, 10});

  const ExperimentConfig other_run = ExperimentConfig::load(path, std::nullopt, fs::path("/tmp/elsewhere"));
  CHECK(other_run.run_dir == fs::path("/tmp/elsewhere"));
  CHECK(other_run.fingerprint == c.fingerprint);
  const ExperimentConfig reseeded = ExperimentConfig::load(path, 2);
  CHECK(reseeded.seed == 2);
  CHECK(reseeded.fingerprint != c.fingerprint);

  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"target":{"name":"t","manifest":"m"}})", "."), Error);
  CHECK_NOTHROW(ExperimentConfig::parse(R"({"target":{"name":"t","manifest":"m"}})", ".", 3));
  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"seed":1,"target":{"name":"t","manifest":"m"},"ccg":{"settings":["2-to-1"]}})", "."),
                  Error);
  CHECK_THROWS_AS(ExperimentConfig::parse("{not json", "."), Error);
  CHECK_THROWS_AS(ExperimentConfig::load(path.parent_path() / "config.toml"), Error);
}

TEST_CASE("feature to queue chain is deterministic") {
  const fs::path path = make_corpus("exp_chain");
  const ExperimentConfig a = ExperimentConfig::load(path, std::nullopt, path.parent_path() / "run_a");
  const ExperimentConfig b = ExperimentConfig::load(path, std::nullopt, path.parent_path() / "run_b");
  chain_to_queue(a);
  chain_to_queue(b);

  const RunManifest ma = RunManifest::load(a.run_dir), mb = RunManifest::load(b.run_dir);
  for (const auto& name : {"features:mini", "features:acted", "embedding", "encoder", "clustering", "queue"}) {
    REQUIRE(ma.find(name) != nullptr);
    CHECK(ma.find(name)->sha256 == mb.find(name)->sha256);
  }
  const auto queue = parse_queue_csv(slurp(a.run_dir / "queue/queue.csv"), "queue");
  const json clustering = json::parse(slurp(a.run_dir / "clusters/clustering.json"));
  CHECK(static_cast<Index>(queue.size()) == clustering["k"].get<Index>());
  CHECK(queue.size() == 12);  // three families of 12 train clips, k = 4 each
  CHECK(format_queue_csv(queue) == slurp(a.run_dir / "queue/queue.csv"));

  SUBCASE("clustering raw features is refused") {
    CHECK_THROWS_WITH_AS(cmd_cluster(a, "features:mini"), doctest::Contains("fingerprint check failed"), Error);
  }
  SUBCASE("a modified embedding is detected") {
    std::ofstream(a.run_dir / "embedding/mini.serf", std::ios::app) << "x";
    CHECK_THROWS_WITH_AS(cmd_cluster(a), doctest::Contains("fingerprint mismatch"), Error);
  }
}

TEST_CASE("labels, AL, CCG, DA and report") {
  const fs::path path = make_corpus("exp_full", [](json& cfg) {
    cfg["sources"].push_back({{"name", "acted_copy"}, {"manifest", "source/manifest.jsonl"}});
    cfg["ccg"]["settings"] = {"1-to-1", "4-to-1"};
  });
  const fs::path oracle = path.parent_path() / "oracle_annotations.csv";
  const ExperimentConfig c = ExperimentConfig::load(path);
  chain_to_queue(c);

  CHECK_THROWS_WITH_AS(cmd_import_labels(c, oracle, false), doctest::Contains("--queued-only"), Error);
  cmd_import_labels(c, oracle, true);
  CHECK(load_annotations(c.run_dir / "labels/medoid_labels.csv").size() == 12);

  const auto al = cmd_run_al(c, 2);
  REQUIRE(al.size() == 4);
  for (const auto& r : al) {
    CHECK(r.uar >= 0);
    CHECK(r.uar <= 100);
    CHECK(r.method == eval::Method::al);
  }
  for (const Task t : {Task::valence, Task::arousal}) {
    Index cluster_size = -1, medoid_size = -1;
    for (const auto& r : al)
      if (r.task == t) (r.label_mode == "cluster" ? cluster_size : medoid_size) = r.train_size;
    CHECK(cluster_size >= medoid_size);
    CHECK(medoid_size > 0);
  }

  const auto ccg = cmd_run_ccg(c, 1);
  REQUIRE(ccg.size() == 6);  // two 1-to-1 sources and the pooled set, two tasks each
  for (const auto& r : ccg)
    CHECK(r.train_size == (r.source == "acted+acted_copy" ? 64 : 32));

  const auto da = cmd_run_da(c, 2);
  REQUIRE(da.size() == 12);
  CHECK(fs::exists(c.run_dir / "da/acted_valence/history.jsonl"));
  std::ifstream history(c.run_dir / "da/acted_valence/history.jsonl");
  int lines = 0;
  for (std::string line; std::getline(history, line);) {
    const json j = json::parse(line);
    CHECK(j.contains("monitor_uar"));
    ++lines;
  }
  CHECK(lines == 5);

  const std::string table = cmd_report(c);
  CHECK(table.find("AL") != std::string::npos);
  CHECK(table.find("DA") != std::string::npos);
  CHECK(eval::reports_from_json(slurp(c.run_dir / "reports/summary.json")).size() == 22);
  CHECK(fs::exists(c.run_dir / "reports/summary.csv"));
}

TEST_CASE("semi-supervised DA needs imported labels") {
  const fs::path path = make_corpus("exp_da_nolabels");
  const ExperimentConfig c = ExperimentConfig::load(path);
  cmd_features(c, 1);
  CHECK_THROWS_WITH_AS(cmd_run_da(c, 1), doctest::Contains("import-labels"), Error);
}
