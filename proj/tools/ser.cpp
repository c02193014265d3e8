#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ser/annotation_service.hpp"
#include "ser/experiment.hpp"
#include "ser/synth_corpus.hpp"

namespace {

struct Globals {
  std::string config = "config.json";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_dir;
  int jobs = 1;
};

ser::exp::ExperimentConfig load(const Globals& g) {
  std::optional<std::filesystem::path> run_dir;
  if (g.run_dir) run_dir = *g.run_dir;
  return ser::exp::ExperimentConfig::load(g.config, g.seed, run_dir);
}

void print_reports(const std::vector<ser::eval::ExperimentReport>& reports) {
  for (const auto& r : reports)
    std::cout << ser::eval::to_string(r.method) << ' ' << r.source << ' ' << (r.label_mode.empty() ? "-" : r.label_mode)
              << ' ' << ser::to_string(r.task) << " UAR " << r.uar << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech emotion recognition with few labels: medoid-based active learning and "
               "Wasserstein domain adaptation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "master seed, overrides the config");
  app.add_option("--run-dir", g.run_dir, "run directory, overrides the config");
  app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber);

  auto* features = app.add_subcommand("features", "extract and normalize features for every corpus");
  auto* embed = app.add_subcommand("embed", "train the autoencoder and embed the target train split");
  auto* cluster = app.add_subcommand("cluster", "per-family farthest-first + k-medoids clustering");
  std::string cluster_input = "embedding";
  cluster->add_option("--input", cluster_input, "run artifact to cluster");
  auto* queue = app.add_subcommand("queue", "write the medoid annotation queue");
  auto* serve = app.add_subcommand("serve", "run the annotation server");
  std::optional<int> port;
  serve->add_option("--port", port, "listen port, overrides the config");
  auto* import = app.add_subcommand("import-labels", "import medoid annotations into the run");
  std::string import_path;
  bool queued_only = false;
  import->add_option("--input", import_path, "annotation CSV")->required();
  import->add_flag("--queued-only", queued_only, "drop rows for ids outside the queue instead of failing");
  auto* run_al = app.add_subcommand("run-al", "SVM on MAL-labeled target data");
  auto* run_ccg = app.add_subcommand("run-ccg", "SVM trained on source corpora only");
  auto* run_da = app.add_subcommand("run-da", "Wasserstein domain adaptation");
  auto* report = app.add_subcommand("report", "collect reports into a comparison table");
  auto* synth = app.add_subcommand("synth-corpus", "write a synthetic mini-corpus with a ready config");
  std::string synth_out;
  ser::SynthCorpusOptions synth_options;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--clips", synth_options.target_clips, "target clips");
  synth->add_option("--train-clips", synth_options.train_clips, "target clips in the train split");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      if (g.seed) synth_options.seed = *g.seed;
      const auto files = ser::write_synthetic_corpus(synth_out, synth_options);
      std::cout << files.config.string() << '\n';
      return 0;
    }
    const auto config = load(g);
    if (*features) ser::exp::cmd_features(config, g.jobs);
    if (*embed) ser::exp::cmd_embed(config);
    if (*cluster) ser::exp::cmd_cluster(config, cluster_input);
    if (*queue) ser::exp::cmd_queue(config);
    if (*import) ser::exp::cmd_import_labels(config, import_path, queued_only);
    if (*run_al) print_reports(ser::exp::cmd_run_al(config, g.jobs));
    if (*run_ccg) print_reports(ser::exp::cmd_run_ccg(config, g.jobs));
    if (*run_da) print_reports(ser::exp::cmd_run_da(config, g.jobs));
    if (*report) std::cout << ser::exp::cmd_report(config);
    if (*serve) {
      ser::annotate::AnnotationService service(ser::exp::annotation_setup(config));
      ser::annotate::ServeOptions options;
      options.host = config.serve_host;
      options.port = port.value_or(config.serve_port);
      options.token = config.token;
      options.ui_dir = config.ui_dir;
      ser::annotate::serve(service, options, [&](int bound) {
        std::clog << "[serve] listening on http://" << options.host << ':' << bound << '\n';
      });
    }
  } catch (const ser::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
