#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ser/annotation_service.hpp"
#include "ser/eval.hpp"
#include "ser/features.hpp"
#include "ser/mal.hpp"
#include "ser/svm.hpp"
#include "ser/wda.hpp"

// Experiment orchestration behind the `ser` command line. Every command reads
// an ExperimentConfig, works inside the run directory and records what it
// writes in the run manifest.

namespace ser::exp {

struct CorpusSpec {
  std::string name;
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> gold_annotations;  // test-split labels (target)
  std::optional<std::filesystem::path> mapping;           // emotion mapping override (sources)
  std::optional<std::filesystem::path> external_features; // CSV for feature kind external_import
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path run_dir;
  std::filesystem::path base_dir;  // relative paths in the file resolve against it
  std::vector<Task> tasks = {Task::valence, Task::arousal};
  CorpusSpec target;
  std::vector<CorpusSpec> sources;
  FeatureKind feature_kind = FeatureKind::logmel_functionals;
  double min_duration_ms = 600;

  mal::EmbedderConfig embedder;
  std::vector<mal::LabelMode> label_modes = {mal::LabelMode::cluster_labels, mal::LabelMode::medoid_labels};
  int folds = 5;
  svm::Grid grid = svm::Grid::default_grid();

  std::vector<std::string> settings = {"1-to-1", "4-to-1"};  // CCG and DA source settings
  std::vector<wda::Variant> variants = {wda::Variant::unsupervised, wda::Variant::semi_supervised};
  wda::SourceConfig source_training;
  wda::AdaptationConfig adaptation;
  std::optional<double> adaptation_lr;  // overrides the per-setting table

  std::string serve_host = "127.0.0.1";
  int serve_port = 8080;
  std::size_t overlap_n = 0;
  std::string token;
  std::optional<std::filesystem::path> ui_dir;

  /// sha256 of the config document without its run directory.
  std::string fingerprint;

  /// Parses the JSON config; `seed` and `run_dir` override the file.
  static ExperimentConfig load(const std::filesystem::path& path, std::optional<std::uint64_t> seed = std::nullopt,
                               std::optional<std::filesystem::path> run_dir = std::nullopt);
  static ExperimentConfig parse(const std::string& json_text, const std::filesystem::path& base_dir,
                                std::optional<std::uint64_t> seed = std::nullopt,
                                std::optional<std::filesystem::path> run_dir = std::nullopt);

  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

/// Loads a corpus manifest (plus gold annotations when configured) and
/// applies the minimum-duration filter.
Corpus load_corpus_spec(const ExperimentConfig& config, const CorpusSpec& spec);

/// Audio reference resolved against the manifest directory.
std::filesystem::path audio_path(const CorpusSpec& spec, const std::string& audio_ref);

/// Log-mel functionals of every utterance, extracted on `jobs` threads.
FeatureTable extract_corpus_features(const Corpus& corpus, const CorpusSpec& spec, int jobs);

/// Writes features/<corpus>.serf (z-scored per corpus) for the target and
/// every source.
void cmd_features(const ExperimentConfig& config, int jobs);
/// Trains the autoencoder on the target train split; writes the embedding
/// table and the encoder checkpoint.
void cmd_embed(const ExperimentConfig& config);
/// Per-group MAL over the artifact `input` (an embedding table).
void cmd_cluster(const ExperimentConfig& config, const std::string& input = "embedding");
/// queue/queue.csv from the clustering.
void cmd_queue(const ExperimentConfig& config);
/// Copies medoid annotations into the run. Rows for ids outside the queue
/// are an error unless `queued_only` drops them.
void cmd_import_labels(const ExperimentConfig& config, const std::filesystem::path& annotations, bool queued_only);

/// Annotation service state for the run's queue: labels are logged to
/// labels/label_log.csv and exported to labels/exported_labels.csv.
annotate::ServiceSetup annotation_setup(const ExperimentConfig& config);

std::vector<eval::ExperimentReport> cmd_run_al(const ExperimentConfig& config, int jobs);
std::vector<eval::ExperimentReport> cmd_run_ccg(const ExperimentConfig& config, int jobs);
std::vector<eval::ExperimentReport> cmd_run_da(const ExperimentConfig& config, int jobs);
/// Collects reports/*.json into summary.txt, summary.json and summary.csv;
/// returns the text table.
std::string cmd_report(const ExperimentConfig& config);

/// queue.csv text: rank,cluster_id,cluster_size,utterance_id,audio_path.
std::string format_queue_csv(const mal::AnnotationQueue& queue);
mal::AnnotationQueue parse_queue_csv(const std::string& text, const std::string& what);

/// Clustering dump {k, medoids, medoid_ids, assignment, cost, groups}.
std::string clustering_to_json(const mal::Clustering& c, const std::vector<std::string>& ids,
                               const std::vector<std::string>& groups);

}  // namespace ser::exp
