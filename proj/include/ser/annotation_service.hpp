#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ser/corpus.hpp"
#include "ser/mal.hpp"

// Labeling backend for the annotation web client. The service is plain C++
// and returns (status, body, content type) triples; `serve` binds it to HTTP.

namespace ser::annotate {

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

struct ServiceSetup {
  mal::AnnotationQueue queue;
  std::vector<Utterance> utterances;   // at least every queued id
  std::filesystem::path audio_base;    // audio_ref and recording resolve against it
  std::filesystem::path label_log;     // append-only CSV, replayed on start
  std::filesystem::path export_path;   // written by /export
  std::size_t overlap_n = 0;           // leading queue items every annotator labels
  std::uint64_t seed = 0;              // drives the per-item dimension order
  std::string session;                 // written to every log row
  double context_s = 10.0;
};

/// Wall-clock UTC time as YYYY-MM-DDTHH:MM:SSZ.
std::string utc_timestamp();

class AnnotationService {
 public:
  explicit AnnotationService(ServiceSetup setup, std::function<std::string()> clock = utc_timestamp);

  /// Next item for `annotator`: {utterance_id, rank, cluster_size, audio_url,
  /// context_url, dimension_order} or {"done": true}.
  Response next(const std::string& annotator);
  Response audio(const std::string& utterance_id) const;
  /// The `context_s` seconds of the source recording before the utterance.
  Response context(const std::string& utterance_id) const;
  /// Body {utterance_id, annotator, valence, arousal, erroneous, order}.
  Response label(const std::string& json_body);
  Response progress() const;
  /// Active labels in annotation CSV form; also written to `export_path`.
  Response export_labels() const;

  /// Latest label per (utterance, annotator).
  std::vector<Annotation> active_labels() const;
  PresentationOrder dimension_order(const std::string& utterance_id) const;

 private:
  void apply(const Annotation& a);
  const mal::QueueEntry* entry(const std::string& id) const;
  bool is_overlap(const mal::QueueEntry& e) const;

  ServiceSetup setup_;
  std::function<std::string()> clock_;
  std::map<std::string, std::size_t> index_;  // utterance id -> queue position
  std::map<std::string, const Utterance*> utterances_;
  std::map<std::pair<std::string, std::string>, Annotation> active_;
  std::map<std::string, std::string> claims_;  // non-overlap item -> annotator
  mutable std::mutex mutex_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string token;                          // required in X-Annotation-Token when set
  std::optional<std::filesystem::path> ui_dir;  // static client files mounted at /
};

/// Blocks serving the endpoints until the process is interrupted.
/// `on_bound` is called with the bound port once listening (port 0 picks one).
void serve(AnnotationService& service, const ServeOptions& options,
           const std::function<void(int)>& on_bound = {});

/// Binds the service in a background thread for tests and embedding.
class BackgroundServer {
 public:
  BackgroundServer(AnnotationService& service, ServeOptions options);
  ~BackgroundServer();
  BackgroundServer(const BackgroundServer&) = delete;
  BackgroundServer& operator=(const BackgroundServer&) = delete;
  int port() const { return port_; }
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

}  // namespace ser::annotate
