#include "ser/annotation_service.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "binary_io.hpp"
#include "ser/audio.hpp"
#include "text_util.hpp"

namespace ser::annotate {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

Response error(int status, const std::string& message) { return {status, json{{"error", message}}.dump()}; }

std::string annotation_header() {
  std::string h = format_annotations_csv({});
  while (!h.empty() && (h.back() == '\n' || h.back() == '\r')) h.pop_back();
  return h;
}

std::string log_header() { return annotation_header() + ",rank,session"; }

std::string url_id(const std::string& id) {
  std::string out;
  for (unsigned char c : id) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.') {
      out.push_back(static_cast<char>(c));
    } else {
      char buf[4];
      std::snprintf(buf, sizeof buf, "%%%02X", c);
      out += buf;
    }
  }
  return out;
}

}  // namespace

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

AnnotationService::AnnotationService(ServiceSetup setup, std::function<std::string()> clock)
    : setup_(std::move(setup)), clock_(std::move(clock)) {
  for (std::size_t i = 0; i < setup_.queue.size(); ++i) {
    if (!index_.emplace(setup_.queue[i].utterance_id, i).second)
      throw Error("annotation queue lists '" + setup_.queue[i].utterance_id + "' twice");
  }
  for (const auto& u : setup_.utterances) utterances_[u.id] = &u;
  for (const auto& e : setup_.queue)
    if (!utterances_.count(e.utterance_id))
      throw Error("queued utterance '" + e.utterance_id + "' is not in the corpus manifest");

  if (!fs::exists(setup_.label_log)) return;
  std::ifstream in(setup_.label_log);
  std::string line;
  std::size_t line_no = 0;
  const std::string header = annotation_header();
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    if (line_no == 1) {
      if (detail::trim(line) != log_header()) throw Error(setup_.label_log.string() + ": unexpected label log header");
      continue;
    }
    auto fields = detail::split_csv(line);
    if (fields.size() != 9)
      throw Error(setup_.label_log.string() + " line " + std::to_string(line_no) + ": expected 9 fields");
    fields.resize(7);
    std::string row;
    for (const auto& f : fields) row += (row.empty() ? "" : ",") + detail::csv_escape(f);
    for (const auto& a : parse_annotations_csv(header + "\n" + row + "\n", setup_.label_log.string()))
      if (entry(a.utterance_id)) apply(a);
  }
}

const mal::QueueEntry* AnnotationService::entry(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &setup_.queue[it->second];
}

bool AnnotationService::is_overlap(const mal::QueueEntry& e) const {
  return index_.at(e.utterance_id) < setup_.overlap_n;
}

void AnnotationService::apply(const Annotation& a) {
  active_[{a.utterance_id, a.annotator_id}] = a;
  const mal::QueueEntry* e = entry(a.utterance_id);
  if (e && !is_overlap(*e)) claims_.emplace(a.utterance_id, a.annotator_id);
}

PresentationOrder AnnotationService::dimension_order(const std::string& utterance_id) const {
  return derive_seed(setup_.seed, "dimension-order:" + utterance_id) & 1 ? PresentationOrder::arousal_first
                                                                        : PresentationOrder::valence_first;
}

Response AnnotationService::next(const std::string& annotator) {
  if (annotator.empty()) return error(400, "missing annotator");
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& e : setup_.queue) {
    if (active_.count({e.utterance_id, annotator})) continue;
    if (!is_overlap(e)) {
      auto claim = claims_.find(e.utterance_id);
      if (claim != claims_.end() && claim->second != annotator) continue;
      claims_[e.utterance_id] = annotator;
    }
    const Utterance* u = utterances_.at(e.utterance_id);
    json j = {{"utterance_id", e.utterance_id},
              {"rank", e.rank},
              {"cluster_size", e.cluster_size},
              {"audio_url", "/audio/" + url_id(e.utterance_id)},
              {"context_url", nullptr},
              {"dimension_order", to_string(dimension_order(e.utterance_id))}};
    if (u->recording && u->recording_offset_s) j["context_url"] = "/audio/" + url_id(e.utterance_id) + "/context";
    return {200, j.dump()};
  }
  return {200, json{{"done", true}}.dump()};
}

Response AnnotationService::audio(const std::string& utterance_id) const {
  if (!entry(utterance_id)) return error(404, "unknown utterance '" + utterance_id + "'");
  const fs::path p = setup_.audio_base / utterances_.at(utterance_id)->audio_ref;
  try {
    return {200, detail::read_file(p.string()), "audio/wav"};
  } catch (const Error& e) {
    return error(404, e.what());
  }
}

Response AnnotationService::context(const std::string& utterance_id) const {
  if (!entry(utterance_id)) return error(404, "unknown utterance '" + utterance_id + "'");
  const Utterance* u = utterances_.at(utterance_id);
  if (!u->recording || !u->recording_offset_s) return error(404, "no source recording for '" + utterance_id + "'");
  const double end = *u->recording_offset_s;
  if (end <= 0) return error(404, "'" + utterance_id + "' starts at the beginning of its recording");
  try {
    const AudioClip clip =
        read_wav_range(setup_.audio_base / *u->recording, std::max(0.0, end - setup_.context_s), end);
    const auto bytes = encode_wav_pcm16(clip);
    return {200, std::string(bytes.begin(), bytes.end()), "audio/wav"};
  } catch (const Error& e) {
    return error(404, e.what());
  }
}

Response AnnotationService::label(const std::string& json_body) {
  Annotation a;
  try {
    const json j = json::parse(json_body);
    if (!j.is_object()) return error(400, "label body must be a JSON object");
    a.utterance_id = j.at("utterance_id").get<std::string>();
    a.annotator_id = j.at("annotator").get<std::string>();
    a.erroneous = j.value("erroneous", false);
    if (j.contains("valence") && !j["valence"].is_null()) a.valence = parse_raw_valence(j["valence"].get<std::string>());
    if (j.contains("arousal") && !j["arousal"].is_null()) a.arousal = parse_arousal(j["arousal"].get<std::string>());
    a.order = j.contains("order") ? parse_order(j["order"].get<std::string>()) : dimension_order(a.utterance_id);
  } catch (const json::exception& e) {
    return error(400, std::string("malformed label: ") + e.what());
  } catch (const Error& e) {
    return error(400, std::string("malformed label: ") + e.what());
  }
  if (a.annotator_id.empty()) return error(400, "missing annotator");
  if (a.annotator_id.find_first_of(",\"\n\r") != std::string::npos)
    return error(400, "annotator ids may not contain commas, quotes or newlines");
  if (!a.erroneous && (!a.valence || !a.arousal))
    return error(400, "valence and arousal are both required unless the clip is flagged erroneous");

  std::lock_guard<std::mutex> lock(mutex_);
  const mal::QueueEntry* e = entry(a.utterance_id);
  if (!e) return error(409, "'" + a.utterance_id + "' is not in the annotation queue");
  if (!is_overlap(*e)) {
    auto claim = claims_.find(a.utterance_id);
    if (claim != claims_.end() && claim->second != a.annotator_id)
      return error(409, "'" + a.utterance_id + "' is assigned to another annotator");
  }
  a.timestamp = clock_();

  const bool fresh = !fs::exists(setup_.label_log);
  if (!setup_.label_log.parent_path().empty()) fs::create_directories(setup_.label_log.parent_path());
  std::ofstream out(setup_.label_log, std::ios::app);
  if (fresh) out << log_header() << '\n';
  std::string row = format_annotations_csv(std::span<const Annotation>(&a, 1));
  row = row.substr(row.find('\n') + 1);
  while (!row.empty() && row.back() == '\n') row.pop_back();
  out << row << ',' << e->rank << ',' << detail::csv_escape(setup_.session) << '\n';
  out.flush();
  if (!out) return error(500, "cannot append to " + setup_.label_log.string());
  apply(a);
  return {200, json{{"ok", true}, {"timestamp", a.timestamp}}.dump()};
}

Response AnnotationService::progress() const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::set<std::string> labeled;
  std::map<std::string, int> per_annotator;
  for (const auto& [key, a] : active_) {
    labeled.insert(key.first);
    ++per_annotator[key.second];
  }
  const auto total = setup_.queue.size();
  const double percent = total ? 100.0 * static_cast<double>(labeled.size()) / static_cast<double>(total) : 100.0;
  return {200, json{{"total", total}, {"labeled", labeled.size()}, {"percent", percent}, {"per_annotator", per_annotator}}
                   .dump()};
}

std::vector<Annotation> AnnotationService::active_labels() const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::vector<Annotation> out;
  for (const auto& [key, a] : active_) out.push_back(a);
  std::stable_sort(out.begin(), out.end(), [&](const Annotation& x, const Annotation& y) {
    const auto rx = index_.at(x.utterance_id), ry = index_.at(y.utterance_id);
    return rx != ry ? rx < ry : x.annotator_id < y.annotator_id;
  });
  return out;
}

Response AnnotationService::export_labels() const {
  const std::string csv = format_annotations_csv(active_labels());
  if (!setup_.export_path.empty()) {
    try {
      if (!setup_.export_path.parent_path().empty()) fs::create_directories(setup_.export_path.parent_path());
      detail::write_file(setup_.export_path.string(), csv);
    } catch (const Error& e) {
      return error(500, e.what());
    }
  }
  return {200, csv, "text/csv"};
}

// --- HTTP ------------------------------------------------------------------------

namespace {

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

void install_routes(httplib::Server& svr, AnnotationService& service, const ServeOptions& options) {
  if (!options.token.empty()) {
    const std::string token = options.token;
    svr.set_pre_routing_handler([token](const httplib::Request& req, httplib::Response& res) {
      const bool api = req.path.rfind("/next", 0) == 0 || req.path.rfind("/label", 0) == 0 ||
                       req.path.rfind("/audio", 0) == 0 || req.path.rfind("/progress", 0) == 0 ||
                       req.path.rfind("/export", 0) == 0;
      if (api && req.get_header_value("X-Annotation-Token") != token) {
        reply(res, error(401, "missing or wrong X-Annotation-Token"));
        return httplib::Server::HandlerResponse::Handled;
      }
      return httplib::Server::HandlerResponse::Unhandled;
    });
  }
  svr.Get("/next", [s = &service](const httplib::Request& req, httplib::Response& res) {
    reply(res, s->next(req.get_param_value("annotator")));
  });
  svr.Get(R"(/audio/([^/]+)/context)", [s = &service](const httplib::Request& req, httplib::Response& res) {
    reply(res, s->context(httplib::detail::decode_url(req.matches[1], false)));
  });
  svr.Get(R"(/audio/([^/]+))", [s = &service](const httplib::Request& req, httplib::Response& res) {
    reply(res, s->audio(httplib::detail::decode_url(req.matches[1], false)));
  });
  svr.Post("/label", [s = &service](const httplib::Request& req, httplib::Response& res) {
    reply(res, s->label(req.body));
  });
  svr.Get("/progress", [s = &service](const httplib::Request&, httplib::Response& res) { reply(res, s->progress()); });
  svr.Get("/export", [s = &service](const httplib::Request&, httplib::Response& res) {
    reply(res, s->export_labels());
  });
  if (options.ui_dir && !svr.set_mount_point("/", options.ui_dir->string()))
    throw Error("annotation UI directory " + options.ui_dir->string() + " does not exist");
}

int bind(httplib::Server& svr, const ServeOptions& options) {
  if (options.port == 0) {
    const int port = svr.bind_to_any_port(options.host);
    if (port <= 0) throw Error("cannot bind to " + options.host);
    return port;
  }
  if (!svr.bind_to_port(options.host, options.port))
    throw Error("cannot bind to " + options.host + ":" + std::to_string(options.port));
  return options.port;
}

}  // namespace

void serve(AnnotationService& service, const ServeOptions& options, const std::function<void(int)>& on_bound) {
  httplib::Server svr;
  install_routes(svr, service, options);
  const int port = bind(svr, options);
  if (on_bound) on_bound(port);
  if (!svr.listen_after_bind()) throw Error("annotation server stopped unexpectedly");
}

struct BackgroundServer::Impl {
  httplib::Server svr;
  std::thread thread;
};

BackgroundServer::BackgroundServer(AnnotationService& service, ServeOptions options) : impl_(std::make_unique<Impl>()) {
  install_routes(impl_->svr, service, options);
  port_ = bind(impl_->svr, options);
  impl_->thread = std::thread([this] { impl_->svr.listen_after_bind(); });
  impl_->svr.wait_until_ready();
}

BackgroundServer::~BackgroundServer() { stop(); }

void BackgroundServer::stop() {
  if (!impl_) return;
  impl_->svr.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace ser::annotate
