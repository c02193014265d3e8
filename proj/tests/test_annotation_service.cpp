#include <doctest.h>

#include <json.hpp>

#include "ser/annotation_service.hpp"
#include "ser/audio.hpp"
#include "test_util.hpp"

// After Eigen: the resolver headers pulled in here define `res`.
#include <httplib.h>

using namespace ser;
using namespace ser::annotate;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  fs::path dir;
  ServiceSetup setup;
};

Fixture make_fixture(const std::string& name, std::size_t overlap = 0) {
  Fixture f;
  f.dir = test::scratch_dir(name);
  fs::create_directories(f.dir / "audio");
  AudioClip clip;
  clip.sample_rate = 16000;
  clip.samples = VectorXd::LinSpaced(8000, -0.5, 0.5);
  AudioClip recording;
  recording.sample_rate = 16000;
  recording.samples = VectorXd::Constant(16000 * 15, 0.25);
  write_wav_pcm16(f.dir / "rec.wav", recording);
  for (int i = 0; i < 4; ++i) {
    Utterance u;
    u.id = "clip" + std::to_string(i);
    u.audio_ref = "audio/" + u.id + ".wav";
    u.duration_s = 0.5;
    u.group_id = "fam";
    u.split = Split::train;
    if (i < 2) {
      u.recording = "rec.wav";
      u.recording_offset_s = i == 0 ? 12.0 : 4.0;
    }
    write_wav_pcm16(f.dir / u.audio_ref, clip);
    f.setup.utterances.push_back(u);
    f.setup.queue.push_back({i + 1, i, 10 - i, u.id, u.audio_ref, "fam"});
  }
  Utterance extra;
  extra.id = "not_queued";
  extra.audio_ref = "audio/clip0.wav";
  extra.duration_s = 0.5;
  f.setup.utterances.push_back(extra);
  f.setup.audio_base = f.dir;
  f.setup.label_log = f.dir / "labels/label_log.csv";
  f.setup.export_path = f.dir / "labels/exported.csv";
  f.setup.overlap_n = overlap;
  f.setup.seed = 3;
  f.setup.session = "s1";
  return f;
}

std::function<std::string()> fixed_clock() {
  auto n = std::make_shared<int>(0);
  return [n] { return "2024-05-01T00:00:" + std::string(*n < 10 ? "0" : "") + std::to_string((*n)++) + "Z"; };
}

std::string label_body(const std::string& id, const std::string& who, const char* v, const char* a,
                       bool erroneous = false) {
  json j = {{"utterance_id", id}, {"annotator", who}, {"erroneous", erroneous}};
  j["valence"] = v ? json(v) : json(nullptr);
  j["arousal"] = a ? json(a) : json(nullptr);
  return j.dump();
}

}  // namespace

TEST_CASE("queue items are handed out in rank order and labelled") {
  Fixture f = make_fixture("annot_basic");
  AnnotationService s(f.setup, fixed_clock());

  const json first = json::parse(s.next("ann1").body);
  CHECK(first["utterance_id"] == "clip0");
  CHECK(first["rank"] == 1);
  CHECK(first["cluster_size"] == 10);
  CHECK(first["audio_url"] == "/audio/clip0");
  CHECK(first["context_url"] == "/audio/clip0/context");
  const std::string order = first["dimension_order"];
  CHECK((order == "valence_first" || order == "arousal_first"));
  CHECK(order == to_string(s.dimension_order("clip0")));

  CHECK(json::parse(s.next("ann1").body)["utterance_id"] == "clip0");  // unanswered item is repeated
  CHECK(json::parse(s.next("ann2").body)["utterance_id"] == "clip1");  // claimed items go to one annotator

  CHECK(s.label(label_body("clip0", "ann1", "positive", "high")).status == 200);
  CHECK(s.label(label_body("clip1", "ann1", "neutral", "low")).status == 409);  // held by ann2
  CHECK(s.label(label_body("clip1", "ann2", nullptr, nullptr, true)).status == 200);
  CHECK(json::parse(s.next("ann1").body)["utterance_id"] == "clip2");
  CHECK(json::parse(s.next("ann1").body)["context_url"].is_null());
  CHECK(s.label(label_body("clip2", "ann1", "negative", "low")).status == 200);
  CHECK(s.label(label_body("clip3", "ann2", "neutral", "high")).status == 200);
  CHECK(json::parse(s.next("ann1").body)["done"] == true);

  const json progress = json::parse(s.progress().body);
  CHECK(progress["total"] == 4);
  CHECK(progress["labeled"] == 4);
  CHECK(progress["percent"] == 100.0);
  CHECK(progress["per_annotator"]["ann1"] == 2);

  const Response exported = s.export_labels();
  CHECK(exported.content_type == "text/csv");
  const auto rows = parse_annotations_csv(exported.body, "export");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].utterance_id == "clip0");
  CHECK(rows[1].erroneous);
  CHECK_FALSE(rows[1].valence.has_value());
  CHECK(rows[0].timestamp == "2024-05-01T00:00:00Z");
  CHECK(load_annotations(f.setup.export_path) == rows);
  // Re-importing the export yields the same annotation set.
  CHECK(parse_annotations_csv(format_annotations_csv(rows), "again") == rows);
}

TEST_CASE("label validation") {
  Fixture f = make_fixture("annot_validation");
  AnnotationService s(f.setup, fixed_clock());
  CHECK(s.label("{oops").status == 400);
  CHECK(s.label(R"({"utterance_id":"clip0"})").status == 400);
  CHECK(s.label(label_body("clip0", "a", "positive", nullptr)).status == 400);
  CHECK(s.label(label_body("clip0", "a", "happy", "high")).status == 400);
  CHECK(s.label(label_body("not_queued", "a", "positive", "high")).status == 409);
  CHECK(s.label(label_body("nowhere", "a", "positive", "high")).status == 409);
  CHECK(s.label(label_body("clip0", "a,b", "positive", "high")).status == 400);
  CHECK(s.label(label_body("clip0", "a", nullptr, nullptr, true)).status == 200);
  CHECK(s.next("").status == 400);
}

TEST_CASE("overlap items go to every annotator") {
  Fixture f = make_fixture("annot_overlap", 2);
  AnnotationService s(f.setup, fixed_clock());
  for (const std::string who : {"a", "b"}) {
    for (const std::string id : {"clip0", "clip1"}) {
      CHECK(json::parse(s.next(who).body)["utterance_id"] == id);
      CHECK(s.label(label_body(id, who, "positive", "low")).status == 200);
    }
  }
  CHECK(json::parse(s.next("a").body)["utterance_id"] == "clip2");
  CHECK(json::parse(s.next("b").body)["utterance_id"] == "clip3");
  CHECK(s.active_labels().size() == 4);
}

TEST_CASE("the label log is replayed and later rows win") {
  Fixture f = make_fixture("annot_replay");
  {
    AnnotationService s(f.setup, fixed_clock());
    CHECK(s.label(label_body("clip0", "a", "positive", "high")).status == 200);
    CHECK(s.label(label_body("clip0", "a", "negative", "low")).status == 200);
    CHECK(s.label(label_body("clip1", "b", "neutral", "low")).status == 200);
  }
  AnnotationService again(f.setup, fixed_clock());
  const auto active = again.active_labels();
  REQUIRE(active.size() == 2);
  CHECK(active[0].valence == RawValence::negative);
  CHECK(active[0].timestamp == "2024-05-01T00:00:01Z");
  CHECK(again.label(label_body("clip1", "a", "neutral", "low")).status == 409);  // claim restored

  std::ifstream log(f.setup.label_log);
  std::string header;
  std::getline(log, header);
  CHECK(header == "utterance_id,annotator,valence,arousal,erroneous,order,timestamp,rank,session");
}

TEST_CASE("audio and context clips") {
  Fixture f = make_fixture("annot_audio");
  AnnotationService s(f.setup, fixed_clock());
  const Response a = s.audio("clip0");
  CHECK(a.status == 200);
  CHECK(a.content_type == "audio/wav");
  CHECK(a.body.rfind("RIFF", 0) == 0);
  CHECK(s.audio("not_queued").status == 404);

  const Response ctx = s.context("clip0");
  REQUIRE(ctx.status == 200);
  CHECK(ctx.body.size() == 44 + 2 * 16000 * 10);  // ten seconds before offset 12 s
  CHECK(s.context("clip1").body.size() == 44 + 2 * 16000 * 4);  // clamped to the recording start
  CHECK(s.context("clip2").status == 404);
}

TEST_CASE("HTTP endpoints") {
  Fixture f = make_fixture("annot_http");
  AnnotationService s(f.setup, fixed_clock());
  ServeOptions options;
  options.port = 0;
  options.token = "secret";
  BackgroundServer server(s, options);
  httplib::Client client("127.0.0.1", server.port());

  CHECK(client.Get("/next?annotator=x")->status == 401);
  const httplib::Headers auth{{"X-Annotation-Token", "secret"}};
  auto next = client.Get("/next?annotator=x", auth);
  REQUIRE(next);
  CHECK(next->status == 200);
  CHECK(json::parse(next->body)["utterance_id"] == "clip0");

  auto audio = client.Get("/audio/clip0", auth);
  CHECK(audio->status == 200);
  CHECK(audio->get_header_value("Content-Type") == "audio/wav");
  CHECK(client.Get("/audio/clip0/context", auth)->status == 200);
  CHECK(client.Get("/audio/zzz", auth)->status == 404);

  auto posted = client.Post("/label", auth, label_body("clip0", "x", "positive", "high"), "application/json");
  CHECK(posted->status == 200);
  CHECK(client.Post("/label", auth, label_body("zzz", "x", "positive", "high"), "application/json")->status == 409);
  CHECK(client.Post("/label", auth, "{", "application/json")->status == 400);
  auto err = client.Post("/label", auth, label_body("clip1", "x", nullptr, nullptr, true), "application/json");
  CHECK(err->status == 200);

  const json progress = json::parse(client.Get("/progress", auth)->body);
  CHECK(progress["labeled"] == 2);
  CHECK(progress["percent"] == 50.0);
  auto exported = client.Get("/export", auth);
  CHECK(exported->status == 200);
  CHECK(parse_annotations_csv(exported->body, "export").size() == 2);
}

TEST_CASE("static client files are served") {
  Fixture f = make_fixture("annot_static");
  fs::create_directories(f.dir / "ui");
  std::ofstream(f.dir / "ui/index.html") << "<html>ok</html>";
  AnnotationService s(f.setup, fixed_clock());
  ServeOptions options;
  options.port = 0;
  options.ui_dir = f.dir / "ui";
  BackgroundServer server(s, options);
  httplib::Client client("127.0.0.1", server.port());
  auto page = client.Get("/index.html");
  REQUIRE(page);
  CHECK(page->body == "<html>ok</html>");
  CHECK(client.Get("/progress")->status == 200);
}
