#include "ser/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "binary_io.hpp"
#include "ser/audio.hpp"
#include "ser/checkpoint.hpp"
#include "ser/corpus.hpp"
#include "ser/feature_store.hpp"
#include "ser/fingerprint.hpp"
#include "text_util.hpp"

namespace ser::exp {

using nlohmann::json;
namespace fs = std::filesystem;

// --- config ------------------------------------------------------------------

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

std::optional<fs::path> opt_path(const json& j, const char* key) {
  if (j.contains(key) && !j[key].is_null()) return fs::path(j[key].get<std::string>());
  return std::nullopt;
}

CorpusSpec parse_corpus(const json& j, const std::string& what) {
  CorpusSpec c;
  if (!j.is_object()) throw Error(what + " must be an object");
  c.name = j.at("name").get<std::string>();
  c.manifest = j.at("manifest").get<std::string>();
  c.gold_annotations = opt_path(j, "gold_annotations");
  c.mapping = opt_path(j, "mapping");
  c.external_features = opt_path(j, "external_features");
  if (c.name.empty() || c.name.find_first_of("/\\+") != std::string::npos)
    throw Error(what + ": corpus name '" + c.name + "' must be non-empty without '/', '\\' or '+'");
  return c;
}

void resolve_corpus(CorpusSpec& c, const ExperimentConfig& cfg) {
  c.manifest = cfg.resolve(c.manifest);
  if (c.gold_annotations) c.gold_annotations = cfg.resolve(*c.gold_annotations);
  if (c.mapping) c.mapping = cfg.resolve(*c.mapping);
  if (c.external_features) c.external_features = cfg.resolve(*c.external_features);
}

}  // namespace

fs::path ExperimentConfig::resolve(const fs::path& p) const { return p.is_absolute() ? p : base_dir / p; }

ExperimentConfig ExperimentConfig::load(const fs::path& path, std::optional<std::uint64_t> seed,
                                        std::optional<fs::path> run_dir) {
  if (path.extension() == ".toml")
    throw Error(path.string() + ": TOML configs are not supported, use the equivalent JSON document");
  return parse(detail::read_file(path.string()), path.parent_path(), seed, std::move(run_dir));
}

ExperimentConfig ExperimentConfig::parse(const std::string& json_text, const fs::path& base_dir,
                                         std::optional<std::uint64_t> seed, std::optional<fs::path> run_dir) {
  ExperimentConfig c;
  c.base_dir = base_dir.empty() ? fs::path(".") : base_dir;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(std::string("malformed config JSON: ") + e.what());
  }
  try {
    if (!j.is_object()) throw Error("config must be a JSON object");
    if (seed) j["seed"] = *seed;
    if (!j.contains("seed") || !j["seed"].is_number_unsigned())
      throw Error("config needs a non-negative integer \"seed\" (or pass --seed)");
    c.seed = j["seed"].get<std::uint64_t>();

    fs::path run = run_dir ? *run_dir : fs::path(j.value("run_dir", std::string("run")));
    c.run_dir = run_dir ? run : c.resolve(run);

    if (j.contains("tasks")) {
      c.tasks.clear();
      for (const auto& t : j["tasks"]) c.tasks.push_back(parse_task(t.get<std::string>()));
      if (c.tasks.empty()) throw Error("\"tasks\" must not be empty");
    }
    if (!j.contains("target")) throw Error("config needs a \"target\" corpus");
    c.target = parse_corpus(j["target"], "target");
    resolve_corpus(c.target, c);
    std::set<std::string> names{c.target.name};
    if (j.contains("sources"))
      for (const auto& s : j["sources"]) {
        c.sources.push_back(parse_corpus(s, "source"));
        resolve_corpus(c.sources.back(), c);
        if (!names.insert(c.sources.back().name).second)
          throw Error("corpus name '" + c.sources.back().name + "' is used twice");
      }

    if (j.contains("features")) {
      const auto& f = j["features"];
      const std::string kind = f.value("kind", std::string("logmel_functionals"));
      if (kind == "logmel_functionals") c.feature_kind = FeatureKind::logmel_functionals;
      else if (kind == "external_import") c.feature_kind = FeatureKind::external_import;
      else throw Error("unknown feature kind '" + kind + "'");
      read_opt(f, "min_duration_ms", c.min_duration_ms);
    }
    if (c.feature_kind == FeatureKind::external_import) {
      if (!c.target.external_features) throw Error("external_import needs target.external_features");
      for (const auto& s : c.sources)
        if (!s.external_features) throw Error("external_import needs external_features for source '" + s.name + "'");
    }

    if (j.contains("embedder")) {
      const auto& e = j["embedder"];
      read_opt(e, "patience", c.embedder.patience);
      read_opt(e, "max_epochs", c.embedder.max_epochs);
      read_opt(e, "batch_size", c.embedder.batch_size);
      read_opt(e, "learning_rate", c.embedder.learning_rate);
    }
    if (j.contains("al")) {
      const auto& a = j["al"];
      if (a.contains("label_modes")) {
        c.label_modes.clear();
        for (const auto& m : a["label_modes"]) c.label_modes.push_back(mal::parse_label_mode(m.get<std::string>()));
      }
      read_opt(a, "folds", c.folds);
      if (a.contains("grid")) {
        read_opt(a["grid"], "C", c.grid.C);
        read_opt(a["grid"], "gamma", c.grid.gamma);
      }
    }
    if (j.contains("ccg") && j["ccg"].contains("settings"))
      c.settings = j["ccg"]["settings"].get<std::vector<std::string>>();
    if (j.contains("da")) {
      const auto& d = j["da"];
      if (d.contains("variants")) {
        c.variants.clear();
        for (const auto& v : d["variants"]) c.variants.push_back(wda::parse_variant(v.get<std::string>()));
      }
      if (d.contains("settings")) c.settings = d["settings"].get<std::vector<std::string>>();
      read_opt(d, "max_epochs", c.adaptation.max_epochs);
      read_opt(d, "batch_size", c.adaptation.batch_size);
      read_opt(d, "critic_steps", c.adaptation.critic_steps);
      read_opt(d, "clip", c.adaptation.clip);
      read_opt(d, "critic_learning_rate", c.adaptation.critic_learning_rate);
      read_opt(d, "warmup_critic_steps", c.adaptation.warmup_critic_steps);
      read_opt(d, "smoothing_window", c.adaptation.smoothing_window);
      read_opt(d, "saturation_threshold", c.adaptation.saturation_threshold);
      if (d.contains("learning_rate") && !d["learning_rate"].is_null()) c.adaptation_lr = d["learning_rate"].get<double>();
      if (d.contains("source")) {
        const auto& s = d["source"];
        read_opt(s, "patience", c.source_training.patience);
        read_opt(s, "max_epochs", c.source_training.max_epochs);
        read_opt(s, "batch_size", c.source_training.batch_size);
        read_opt(s, "learning_rate", c.source_training.learning_rate);
      }
    }
    for (const auto& s : c.settings)
      if (s != "1-to-1" && s != "4-to-1") throw Error("unknown source setting '" + s + "' (use 1-to-1 or 4-to-1)");
    if (j.contains("serve")) {
      const auto& s = j["serve"];
      read_opt(s, "host", c.serve_host);
      read_opt(s, "port", c.serve_port);
      read_opt(s, "overlap_n", c.overlap_n);
      read_opt(s, "token", c.token);
      if (auto ui = opt_path(s, "ui_dir")) c.ui_dir = c.resolve(*ui);
    }
    if (c.folds < 2) throw Error("al.folds must be >= 2");
    if (c.grid.C.empty() || c.grid.gamma.empty()) throw Error("al.grid needs at least one C and one gamma");
    c.adaptation.validate();
  } catch (const json::exception& e) {
    throw Error(std::string("invalid config: ") + e.what());
  }
  json canonical = j;
  canonical.erase("run_dir");
  c.fingerprint = sha256_hex(canonical.dump());
  return c;
}

// --- corpora and features ------------------------------------------------------

Corpus load_corpus_spec(const ExperimentConfig& config, const CorpusSpec& spec) {
  Corpus corpus = load_corpus(spec.manifest, spec.gold_annotations, spec.name);
  return filter_min_duration(corpus, config.min_duration_ms);
}

fs::path audio_path(const CorpusSpec& spec, const std::string& audio_ref) {
  const fs::path p(audio_ref);
  return p.is_absolute() ? p : spec.manifest.parent_path() / p;
}

FeatureTable extract_corpus_features(const Corpus& corpus, const CorpusSpec& spec, int jobs) {
  const std::size_t n = corpus.utterances.size();
  if (n == 0) throw Error("corpus '" + corpus.name + "' has no utterances to extract");
  FeatureTable table;
  table.kind = FeatureKind::logmel_functionals;
  table.matrix.resize(static_cast<Index>(n), kLogMelFeatureDim);
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(n);
  auto work = [&] {
    for (std::size_t i; (i = next++) < n;) {
      const auto& u = corpus.utterances[i];
      try {
        const FeatureVector v = extract_logmel_features(read_wav(audio_path(spec, u.audio_ref)));
        table.matrix.row(static_cast<Index>(i)) = v.values.transpose();
      } catch (const Error& e) {
        errors[i] = u.id + ": " + e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::max(1, jobs); ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) throw Error("feature extraction failed for " + e);
  for (const auto& u : corpus.utterances) table.utterance_ids.push_back(u.id);
  return table;
}

namespace {

std::string feature_artifact(const std::string& corpus) { return "features:" + corpus; }

std::string report_fingerprint(const ExperimentConfig& config, std::initializer_list<std::string> inputs) {
  std::string s = config.fingerprint;
  for (const auto& i : inputs) s += "|" + i;
  return sha256_hex(s);
}

void write_text(const RunManifest& m, const std::string& relative, const std::string& text) {
  const fs::path p = m.resolve(relative);
  fs::create_directories(p.parent_path());
  detail::write_file(p.string(), text);
}

struct LoadedFeatures {
  FeatureTable table;
  std::string fingerprint;
};

LoadedFeatures load_features(const RunManifest& m, const std::string& corpus) {
  const std::string name = feature_artifact(corpus);
  const std::string fp = m.verify(name);
  return {read_feature_store(m.resolve(m.find(name)->path)), fp};
}

void write_report(const RunManifest& m, const std::string& stem, const eval::ExperimentReport& r) {
  write_text(m, "reports/" + stem + ".json", eval::report_to_json(r));
}

/// Runs `jobs` independent tasks on up to `jobs` threads, rethrowing the
/// first failure.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  auto work = [&] {
    for (std::size_t i; (i = next++) < count;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const auto extra = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, jobs))) - 1;
  for (std::size_t t = 0; t < extra; ++t) pool.emplace_back(work);
  if (count > 0) work();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

void cmd_features(const ExperimentConfig& config, int jobs) {
  RunManifest m = RunManifest::load(config.run_dir);
  std::vector<const CorpusSpec*> specs{&config.target};
  for (const auto& s : config.sources) specs.push_back(&s);
  for (const CorpusSpec* spec : specs) {
    const Corpus corpus = load_corpus_spec(config, *spec);
    FeatureTable raw;
    if (config.feature_kind == FeatureKind::external_import) {
      raw = import_external_features(*spec->external_features, corpus.ids());
    } else {
      raw = extract_corpus_features(corpus, *spec, jobs);
    }
    const FeatureTable z = zscore_table(raw).table;
    const std::string rel = "features/" + spec->name + ".serf";
    fs::create_directories(m.resolve("features"));
    write_feature_store(m.resolve(rel), z);
    m.record(feature_artifact(spec->name), rel, "features:" + to_string(z.kind), "features",
             {{"manifest:" + spec->name, sha256_file(spec->manifest)}});
    std::clog << "[features] " << spec->name << ": " << z.rows() << " x " << z.dim() << " -> " << rel << '\n';
  }
  m.save();
}

void cmd_embed(const ExperimentConfig& config) {
  RunManifest m = RunManifest::load(config.run_dir);
  const auto [table, fp] = load_features(m, config.target.name);
  const Corpus corpus = load_corpus_spec(config, config.target);
  const FeatureTable pool = table.select(corpus.ids(Split::train));
  const mal::EmbedderResult trained = mal::train_embedder(pool, derive_seed(config.seed, "embed"), config.embedder);
  const FeatureTable embedding = mal::encode(trained.encoder, pool);
  fs::create_directories(m.resolve("embedding"));
  fs::create_directories(m.resolve("models"));
  const std::string rel = "embedding/" + config.target.name + ".serf";
  write_feature_store(m.resolve(rel), embedding);
  nn::save_checkpoint(m.resolve("models/encoder.serm"), trained.encoder);
  m.record("embedding", rel, "embedding", "embed", {{feature_artifact(config.target.name), fp}});
  m.record("encoder", "models/encoder.serm", "checkpoint", "embed", {{feature_artifact(config.target.name), fp}});
  m.save();
  std::clog << "[embed] " << pool.rows() << " utterances, best epoch " << trained.best_epoch << ", validation MSE "
            << trained.initial_validation_mse << " -> " << trained.best_validation_mse << '\n';
}

std::string format_queue_csv(const mal::AnnotationQueue& queue) {
  std::ostringstream out;
  out << "rank,cluster_id,cluster_size,utterance_id,audio_path\n";
  for (const auto& e : queue)
    out << e.rank << ',' << e.cluster_id << ',' << e.cluster_size << ',' << detail::csv_escape(e.utterance_id) << ','
        << detail::csv_escape(e.audio_path) << '\n';
  return out.str();
}

mal::AnnotationQueue parse_queue_csv(const std::string& text, const std::string& what) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "rank,cluster_id,cluster_size,utterance_id,audio_path")
    throw Error(what + ": unexpected queue header");
  mal::AnnotationQueue queue;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != 5) throw Error(what + " line " + std::to_string(line_no) + ": expected 5 columns");
    mal::QueueEntry e;
    e.rank = std::stol(cells[0]);
    e.cluster_id = std::stol(cells[1]);
    e.cluster_size = std::stol(cells[2]);
    e.utterance_id = cells[3];
    e.audio_path = cells[4];
    queue.push_back(std::move(e));
  }
  return queue;
}

std::string clustering_to_json(const mal::Clustering& c, const std::vector<std::string>& ids,
                               const std::vector<std::string>& groups) {
  json medoid_ids = json::array();
  for (Index mi : c.medoids) medoid_ids.push_back(ids[static_cast<std::size_t>(mi)]);
  const json j = {{"k", c.k},           {"ids", ids},   {"medoids", c.medoids}, {"medoid_ids", medoid_ids},
                  {"assignment", c.assignment}, {"cost", c.cost}, {"groups", groups}};
  return j.dump(2) + "\n";
}

namespace {

struct LoadedClustering {
  mal::Clustering clustering;
  std::vector<std::string> ids;
  mal::AnnotationQueue queue;
  std::string fingerprint;
};

LoadedClustering load_clustering(const RunManifest& m) {
  LoadedClustering out;
  out.fingerprint = m.verify("clustering", "clustering");
  const fs::path p = m.resolve(m.find("clustering")->path);
  try {
    const json j = json::parse(detail::read_file(p.string()));
    out.clustering.k = j.at("k").get<Index>();
    out.clustering.medoids = j.at("medoids").get<std::vector<Index>>();
    out.clustering.assignment = j.at("assignment").get<std::vector<Index>>();
    out.clustering.cost = j.at("cost").get<double>();
    out.ids = j.at("ids").get<std::vector<std::string>>();
    for (const auto& q : j.at("queue")) {
      mal::QueueEntry e;
      e.rank = q.at("rank").get<Index>();
      e.cluster_id = q.at("cluster_id").get<Index>();
      e.cluster_size = q.at("cluster_size").get<Index>();
      e.utterance_id = q.at("utterance_id").get<std::string>();
      e.audio_path = q.at("audio_path").get<std::string>();
      e.group_id = q.value("group_id", std::string());
      out.queue.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw Error(p.string() + ": malformed clustering: " + e.what());
  }
  return out;
}

std::vector<Utterance> rows_for(const Corpus& corpus, const std::vector<std::string>& ids) {
  std::vector<Utterance> rows;
  for (const auto& id : ids) {
    const Utterance* u = corpus.find(id);
    if (!u) throw Error("utterance '" + id + "' is not in corpus '" + corpus.name + "'");
    rows.push_back(*u);
  }
  return rows;
}

}  // namespace

void cmd_cluster(const ExperimentConfig& config, const std::string& input) {
  RunManifest m = RunManifest::load(config.run_dir);
  const std::string fp = m.verify(input, std::string("embedding"));
  const FeatureTable table = read_feature_store(m.resolve(m.find(input)->path));
  if (table.kind != FeatureKind::embedding)
    throw Error("fingerprint check failed: '" + input + "' holds " + to_string(table.kind) + " features, not an embedding");
  const Corpus corpus = load_corpus_spec(config, config.target);
  const std::vector<Utterance> rows = rows_for(corpus, table.utterance_ids);
  const mal::MalResult r = mal::mal_per_group(rows, table.matrix, derive_seed(config.seed, "cluster"));

  json doc = json::parse(clustering_to_json(r.clustering, table.utterance_ids, r.groups));
  json queue = json::array();
  for (const auto& e : r.queue)
    queue.push_back({{"rank", e.rank},
                     {"cluster_id", e.cluster_id},
                     {"cluster_size", e.cluster_size},
                     {"utterance_id", e.utterance_id},
                     {"audio_path", e.audio_path},
                     {"group_id", e.group_id}});
  doc["queue"] = queue;
  write_text(m, "clusters/clustering.json", doc.dump(2) + "\n");
  m.record("clustering", "clusters/clustering.json", "clustering", "cluster", {{input, fp}});
  m.save();
  std::clog << "[cluster] " << rows.size() << " utterances, " << r.groups.size() << " groups, k = " << r.clustering.k
            << ", cost " << r.clustering.cost << '\n';
}

void cmd_queue(const ExperimentConfig& config) {
  RunManifest m = RunManifest::load(config.run_dir);
  const LoadedClustering c = load_clustering(m);
  write_text(m, "queue/queue.csv", format_queue_csv(c.queue));
  m.record("queue", "queue/queue.csv", "queue", "queue", {{"clustering", c.fingerprint}});
  m.save();
  std::clog << "[queue] " << c.queue.size() << " medoids -> queue/queue.csv\n";
}

void cmd_import_labels(const ExperimentConfig& config, const fs::path& annotations, bool queued_only) {
  RunManifest m = RunManifest::load(config.run_dir);
  const std::string qfp = m.verify("queue", std::string("queue"));
  const auto queue = parse_queue_csv(detail::read_file(m.resolve(m.find("queue")->path).string()), "queue.csv");
  std::set<std::string> queued;
  for (const auto& e : queue) queued.insert(e.utterance_id);

  std::vector<Annotation> kept;
  std::set<std::string> foreign;
  for (auto& a : load_annotations(annotations)) {
    if (queued.count(a.utterance_id)) {
      kept.push_back(std::move(a));
    } else {
      foreign.insert(a.utterance_id);
    }
  }
  if (!foreign.empty() && !queued_only) {
    std::string list;
    std::size_t shown = 0;
    for (const auto& id : foreign)
      if (shown++ < 5) list += (list.empty() ? "" : ", ") + id;
    if (foreign.size() > 5) list += ", ...";
    throw Error(std::to_string(foreign.size()) + " annotated ids are not queued medoids (" + list +
                "); pass --queued-only to drop them");
  }
  if (kept.empty()) throw Error("no annotations for queued medoids in " + annotations.string());
  write_text(m, "labels/medoid_labels.csv", format_annotations_csv(kept));
  m.record("labels", "labels/medoid_labels.csv", "annotations", "import-labels", {{"queue", qfp}});
  m.save();
  std::clog << "[import-labels] " << kept.size() << " annotations";
  if (!foreign.empty()) std::clog << " (" << foreign.size() << " non-queued ids dropped)";
  std::clog << '\n';
}

annotate::ServiceSetup annotation_setup(const ExperimentConfig& config) {
  const RunManifest m = RunManifest::load(config.run_dir);
  m.verify("queue", std::string("queue"));
  annotate::ServiceSetup s;
  s.queue = parse_queue_csv(detail::read_file(m.resolve(m.find("queue")->path).string()), "queue.csv");
  s.utterances = load_corpus_spec(config, config.target).utterances;
  s.audio_base = config.target.manifest.parent_path();
  s.label_log = m.resolve("labels/label_log.csv");
  s.export_path = m.resolve("labels/exported_labels.csv");
  s.overlap_n = config.overlap_n;
  s.seed = config.seed;
  s.session = annotate::utc_timestamp();
  return s;
}

// --- experiments -----------------------------------------------------------------

namespace {

struct TaskData {
  MatrixXd features;
  std::vector<int> labels;
};

TaskData gather(const FeatureTable& table, const std::map<std::string, int>& labels) {
  TaskData d;
  std::vector<std::string> ids;
  for (const auto& [id, y] : labels) {
    ids.push_back(id);
    d.labels.push_back(y);
  }
  d.features = table.select(ids).matrix;
  return d;
}

eval::ExperimentReport evaluate(const std::vector<int>& predictions, const std::vector<int>& truth, Task task) {
  eval::ExperimentReport r;
  r.task = task;
  r.uar = eval::uar(predictions, truth);
  r.confusion = eval::confusion(predictions, truth, class_names(task));
  r.test_size = static_cast<Index>(truth.size());
  return r;
}

svm::SvmModel fit_svm(const TaskData& train, const ExperimentConfig& config, std::uint64_t seed, int jobs,
                      const std::string& what) {
  std::map<int, Index> counts;
  for (int y : train.labels) ++counts[y];
  if (counts.size() < 2) throw Error(what + ": the labeled training set contains a single class");
  Index smallest = train.features.rows();
  for (const auto& [label, n] : counts) smallest = std::min(smallest, n);
  int folds = config.folds;
  if (smallest < folds) {
    if (smallest < 2) throw Error(what + ": a class has fewer than 2 labeled samples, cross-validation impossible");
    folds = static_cast<int>(smallest);
    std::clog << "[svm] " << what << ": only " << smallest << " samples in the rarest class, using " << folds
              << " folds\n";
  }
  const svm::GridSearchResult gs = svm::grid_search_cv(train.features, train.labels, config.grid, folds, seed, jobs);
  const auto& best = gs.cells[gs.best];
  std::clog << "[svm] " << what << ": best C = " << best.C << ", gamma = " << best.gamma << ", CV UAR "
            << best.mean_uar << '\n';
  return gs.model;
}

struct SourceSet {
  std::string name;  // "a" or "a+b+c"
  std::vector<const CorpusSpec*> corpora;
};

std::vector<SourceSet> source_sets(const ExperimentConfig& config) {
  if (config.sources.empty()) throw Error("this experiment needs at least one source corpus in the config");
  std::vector<SourceSet> sets;
  for (const auto& setting : config.settings) {
    if (setting == "1-to-1") {
      for (const auto& s : config.sources) sets.push_back({s.name, {&s}});
    } else if (config.sources.size() > 1) {
      SourceSet pooled;
      for (const auto& s : config.sources) {
        pooled.name += (pooled.name.empty() ? "" : "+") + s.name;
        pooled.corpora.push_back(&s);
      }
      sets.push_back(pooled);
    } else {
      std::clog << "[exp] 4-to-1 setting skipped: only one source corpus configured\n";
    }
  }
  return sets;
}

struct PooledSource {
  TaskData data;
  std::vector<std::string> fingerprints;
};

PooledSource pool_sources(const ExperimentConfig& config, const RunManifest& m, const SourceSet& set, Task task,
                          const FeatureTable& target) {
  PooledSource out;
  for (const CorpusSpec* spec : set.corpora) {
    const auto [table, fp] = load_features(m, spec->name);
    if (table.kind != target.kind || table.dim() != target.dim())
      throw Error("feature kind mismatch: source '" + spec->name + "' has " + to_string(table.kind) + " (" +
                  std::to_string(table.dim()) + "-dim), the target has " + to_string(target.kind) + " (" +
                  std::to_string(target.dim()) + "-dim)");
    const Corpus corpus = load_corpus_spec(config, *spec);
    const EmotionMapping mapping = spec->mapping ? EmotionMapping::from_csv(*spec->mapping) : EmotionMapping();
    const TaskData d = gather(table, emotion_task_labels(corpus, task, std::nullopt, mapping));
    const Index old_rows = out.data.features.rows();
    out.data.features.conservativeResize(old_rows + d.features.rows(), d.features.cols());
    out.data.features.bottomRows(d.features.rows()) = d.features;
    out.data.labels.insert(out.data.labels.end(), d.labels.begin(), d.labels.end());
    out.fingerprints.push_back(fp);
  }
  return out;
}

std::string join(const std::vector<std::string>& parts) {
  std::string s;
  for (const auto& p : parts) s += (s.empty() ? "" : "|") + p;
  return s;
}

}  // namespace

std::vector<eval::ExperimentReport> cmd_run_al(const ExperimentConfig& config, int jobs) {
  const RunManifest m = RunManifest::load(config.run_dir);
  const auto [table, features_fp] = load_features(m, config.target.name);
  const LoadedClustering c = load_clustering(m);
  const std::string labels_fp = m.verify("labels", std::string("annotations"));
  const auto annotations = load_annotations(m.resolve(m.find("labels")->path));
  const Corpus corpus = load_corpus_spec(config, config.target);
  const std::vector<Utterance> rows = rows_for(corpus, c.ids);
  const auto medoid_labels = resolve_va_labels(annotations);

  std::vector<eval::ExperimentReport> reports;
  for (const mal::LabelMode mode : config.label_modes) {
    const auto labeled = mal::materialize_labels(c.clustering, rows, medoid_labels, mode);
    if (labeled.empty()) throw Error("no labeled medoids: every queued medoid is unlabeled or erroneous");
    for (const Task task : config.tasks) {
      std::map<std::string, int> train_labels;
      for (const auto& s : labeled) train_labels[s.utterance_id] = s.label.for_task(task);
      const TaskData train = gather(table, train_labels);
      const std::string what = "AL " + mal::to_string(mode) + " " + to_string(task);
      const svm::SvmModel model =
          fit_svm(train, config, derive_seed(config.seed, "al-cv:" + to_string(task)), jobs, what);
      const TaskData test = gather(table, resolve_task_labels(corpus, task, Split::test, corpus.annotations));
      if (test.labels.empty()) throw Error("the target test split has no gold-standard labels for " + to_string(task));
      eval::ExperimentReport r = evaluate(model.predict(test.features), test.labels, task);
      r.method = eval::Method::al;
      r.source = config.target.name;
      r.feature_kind = to_string(table.kind);
      r.label_mode = mal::to_string(mode);
      r.seed = config.seed;
      r.train_size = static_cast<Index>(train.labels.size());
      r.fingerprint = report_fingerprint(config, {features_fp, c.fingerprint, labels_fp});
      write_report(m, "al_" + r.label_mode + "_" + to_string(task), r);
      std::clog << "[run-al] " << what << ": " << r.train_size << " labeled, UAR " << r.uar << '\n';
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

std::vector<eval::ExperimentReport> cmd_run_ccg(const ExperimentConfig& config, int jobs) {
  const RunManifest m = RunManifest::load(config.run_dir);
  const auto [target, target_fp] = load_features(m, config.target.name);
  const Corpus corpus = load_corpus_spec(config, config.target);
  std::vector<eval::ExperimentReport> reports;
  for (const auto& set : source_sets(config)) {
    for (const Task task : config.tasks) {
      const PooledSource src = pool_sources(config, m, set, task, target);
      const std::string what = "CCG " + set.name + " " + to_string(task);
      const svm::SvmModel model =
          fit_svm(src.data, config, derive_seed(config.seed, "ccg:" + set.name + ":" + to_string(task)), jobs, what);
      const TaskData test = gather(target, resolve_task_labels(corpus, task, Split::test, corpus.annotations));
      if (test.labels.empty()) throw Error("the target test split has no gold-standard labels for " + to_string(task));
      eval::ExperimentReport r = evaluate(model.predict(test.features), test.labels, task);
      r.method = eval::Method::ccg;
      r.source = set.name;
      r.feature_kind = to_string(target.kind);
      r.seed = config.seed;
      r.train_size = static_cast<Index>(src.data.labels.size());
      r.fingerprint = report_fingerprint(config, {target_fp, join(src.fingerprints)});
      write_report(m, "ccg_" + set.name + "_" + to_string(task), r);
      std::clog << "[run-ccg] " << what << ": " << r.train_size << " source samples, UAR " << r.uar << '\n';
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

std::vector<eval::ExperimentReport> cmd_run_da(const ExperimentConfig& config, int jobs) {
  RunManifest m = RunManifest::load(config.run_dir);
  const auto [target, target_fp] = load_features(m, config.target.name);
  const Corpus corpus = load_corpus_spec(config, config.target);
  const bool needs_monitor =
      std::find(config.variants.begin(), config.variants.end(), wda::Variant::semi_supervised) != config.variants.end();
  std::vector<Annotation> monitor_annotations;
  std::string labels_fp;
  if (needs_monitor) {
    if (!m.find("labels"))
      throw Error("the semi-supervised variant needs a labeled target monitor set: run import-labels first");
    labels_fp = m.verify("labels", std::string("annotations"));
    monitor_annotations = load_annotations(m.resolve(m.find("labels")->path));
  }
  const FeatureTable pool = target.select(corpus.ids(Split::train));

  struct Run {
    SourceSet set;
    Task task;
  };
  std::vector<Run> runs;
  for (const auto& set : source_sets(config))
    for (const Task task : config.tasks) runs.push_back({set, task});

  std::vector<std::vector<eval::ExperimentReport>> per_run(runs.size());
  std::mutex log_mutex;
  parallel_for(runs.size(), jobs, [&](std::size_t i) {
    const auto& [set, task] = runs[i];
    const std::string tag = set.name + "_" + to_string(task);
    const std::uint64_t seed = derive_seed(config.seed, "da:" + tag);
    const PooledSource src = pool_sources(config, m, set, task, target);
    const wda::SourceModel source = wda::train_source(src.data.features, src.data.labels, task, seed, config.source_training);

    wda::AdaptationConfig ac = config.adaptation;
    ac.seed = derive_seed(seed, "adapt");
    std::vector<std::string> names;
    for (const auto* c : set.corpora) names.push_back(c->name);
    ac.learning_rate = config.adaptation_lr ? *config.adaptation_lr : wda::default_adaptation_lr(names, task);

    std::optional<wda::MonitorSet> monitor;
    if (needs_monitor) {
      std::map<std::string, int> labels;
      for (const auto& [id, va] : resolve_va_labels(monitor_annotations))
        if (va) labels[id] = va->for_task(task);
      if (labels.empty()) throw Error("DA " + tag + ": the labeled target monitor set is empty");
      const TaskData d = gather(target, labels);
      monitor = wda::MonitorSet{d.features, d.labels};
    }
    const wda::AdaptationResult adapted =
        wda::adapt(source, src.data.features, src.data.labels, pool.matrix, ac, monitor ? &*monitor : nullptr);

    const std::string dir = "da/" + tag;
    std::ostringstream hist;
    for (const auto& e : adapted.history) {
      json line = {{"epoch", e.epoch}, {"critic_gap", e.critic_gap}, {"target_term", e.target_term}};
      if (e.monitor_uar) line["monitor_uar"] = *e.monitor_uar;
      hist << line.dump() << '\n';
    }
    write_text(m, dir + "/history.jsonl", hist.str());
    nn::save_checkpoint(m.resolve(dir + "/f_source.serm"), source.extractor);
    nn::save_checkpoint(m.resolve(dir + "/classifier_source.serm"), source.classifier);
    nn::save_checkpoint(m.resolve(dir + "/critic.serm"), adapted.critic);

    const TaskData test = gather(target, resolve_task_labels(corpus, task, Split::test, corpus.annotations));
    if (test.labels.empty()) throw Error("the target test split has no gold-standard labels for " + to_string(task));
    for (const wda::Variant v : config.variants) {
      const wda::AdaptedModel& chosen = adapted.selected(v);
      nn::save_checkpoint(m.resolve(dir + "/f_target_" + wda::to_string(v) + ".serm"), chosen.extractor);
      nn::save_checkpoint(m.resolve(dir + "/classifier_" + wda::to_string(v) + ".serm"), chosen.classifier);
      eval::ExperimentReport r = evaluate(wda::predict_target(chosen, test.features), test.labels, task);
      r.method = eval::Method::da;
      r.source = set.name;
      r.feature_kind = to_string(target.kind);
      r.label_mode = wda::to_string(v);
      r.seed = config.seed;
      r.train_size = static_cast<Index>(src.data.labels.size());
      r.fingerprint = report_fingerprint(config, {target_fp, join(src.fingerprints), labels_fp});
      write_report(m, "da_" + set.name + "_" + r.label_mode + "_" + to_string(task), r);
      {
        std::lock_guard<std::mutex> lock(log_mutex);
        std::clog << "[run-da] " << tag << " " << r.label_mode << ": epoch " << chosen.epoch << ", UAR " << r.uar
                  << '\n';
      }
      per_run[i].push_back(std::move(r));
    }
  });
  std::vector<eval::ExperimentReport> reports;
  for (auto& r : per_run) reports.insert(reports.end(), r.begin(), r.end());
  return reports;
}

std::string cmd_report(const ExperimentConfig& config) {
  const RunManifest m = RunManifest::load(config.run_dir);
  const fs::path dir = m.resolve("reports");
  if (!fs::exists(dir)) throw Error("no reports in " + dir.string() + ": run an experiment first");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".json" && entry.path().stem() != "summary") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<eval::ExperimentReport> reports;
  for (const auto& f : files) {
    try {
      reports.push_back(eval::report_from_json(detail::read_file(f.string())));
    } catch (const Error& e) {
      throw Error(f.string() + ": " + e.what());
    }
  }
  const std::string table = eval::render_table(reports);
  detail::write_file((dir / "summary.txt").string(), table);
  detail::write_file((dir / "summary.json").string(), eval::reports_to_json(reports));
  detail::write_file((dir / "summary.csv").string(), eval::render_csv(reports));
  return table;
}

}  // namespace ser::exp
