#include "ser/corpus.hpp"

#include <fstream>
#include <iostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "text_util.hpp"

namespace ser {

using nlohmann::json;

// --- enum names ------------------------------------------------------------

namespace {

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const std::pair<const char*, E> (&table)[N], const char* what) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw Error(std::string("unknown ") + what + " '" + s + "'");
}

template <typename E, std::size_t N>
std::string enum_name(E v, const std::pair<const char*, E> (&table)[N]) {
  for (const auto& [name, value] : table)
    if (v == value) return name;
  return "?";
}

constexpr std::pair<const char*, SpeakerTag> kSpeakers[] = {
    {"male_adult", SpeakerTag::male_adult}, {"female_adult", SpeakerTag::female_adult},
    {"key_child", SpeakerTag::key_child},   {"other_child", SpeakerTag::other_child},
    {"unknown", SpeakerTag::unknown}};
constexpr std::pair<const char*, Split> kSplits[] = {
    {"train", Split::train}, {"test", Split::test}, {"unlabeled", Split::unlabeled}};
constexpr std::pair<const char*, Emotion> kEmotions[] = {
    {"anger", Emotion::anger},     {"boredom", Emotion::boredom},   {"disgust", Emotion::disgust},
    {"fear", Emotion::fear},       {"joy", Emotion::joy},           {"neutral", Emotion::neutral},
    {"sadness", Emotion::sadness}, {"surprise", Emotion::surprise}, {"calm", Emotion::calm},
    {"tenderness", Emotion::tenderness}};
constexpr std::pair<const char*, Emotion> kEmotionAliases[] = {
    {"happy", Emotion::joy}, {"sad", Emotion::sadness}, {"angry", Emotion::anger}, {"fearful", Emotion::fear}};
constexpr std::pair<const char*, RawValence> kRawValence[] = {
    {"negative", RawValence::negative}, {"neutral", RawValence::neutral}, {"positive", RawValence::positive}};
constexpr std::pair<const char*, Valence> kValence[] = {{"neutral", Valence::neutral},
                                                        {"positive", Valence::positive}};
constexpr std::pair<const char*, Arousal> kArousal[] = {{"low", Arousal::low}, {"high", Arousal::high}};
constexpr std::pair<const char*, PresentationOrder> kOrders[] = {
    {"valence_first", PresentationOrder::valence_first}, {"arousal_first", PresentationOrder::arousal_first}};

}  // namespace

std::string to_string(SpeakerTag v) { return enum_name(v, kSpeakers); }
std::string to_string(Split v) { return enum_name(v, kSplits); }
std::string to_string(Emotion v) { return enum_name(v, kEmotions); }
std::string to_string(RawValence v) { return enum_name(v, kRawValence); }
std::string to_string(Valence v) { return enum_name(v, kValence); }
std::string to_string(Arousal v) { return enum_name(v, kArousal); }
std::string to_string(PresentationOrder v) { return enum_name(v, kOrders); }

SpeakerTag parse_speaker(const std::string& s) { return parse_enum(s, kSpeakers, "speaker tag"); }
Split parse_split(const std::string& s) { return parse_enum(s, kSplits, "split"); }
RawValence parse_raw_valence(const std::string& s) { return parse_enum(s, kRawValence, "valence"); }
Arousal parse_arousal(const std::string& s) { return parse_enum(s, kArousal, "arousal"); }
PresentationOrder parse_order(const std::string& s) { return parse_enum(s, kOrders, "presentation order"); }

Emotion parse_emotion(const std::string& s) {
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const auto& [name, value] : kEmotionAliases)
    if (lower == name) return value;
  return parse_enum(lower, kEmotions, "emotion");
}

std::vector<std::string> class_names(Task task) {
  return task == Task::valence ? std::vector<std::string>{"neutral", "positive"}
                               : std::vector<std::string>{"low", "high"};
}

// --- corpus ----------------------------------------------------------------

void Annotation::validate() const {
  if (utterance_id.empty()) throw Error("annotation without utterance id");
  if (!erroneous && (!valence || !arousal))
    throw Error("annotation for '" + utterance_id + "' lacks a valence or arousal label");
}

void Corpus::validate() const {
  std::unordered_set<std::string> ids;
  for (const auto& u : utterances) {
    if (u.id.empty()) throw Error(name + ": utterance with empty id");
    if (!ids.insert(u.id).second) throw Error(name + ": duplicate utterance id '" + u.id + "'");
    if (!(u.duration_s > 0)) throw Error(name + ": utterance '" + u.id + "' has non-positive duration");
  }
  for (const auto& a : annotations) {
    if (!ids.count(a.utterance_id))
      throw Error(name + ": annotation references unknown utterance '" + a.utterance_id + "'");
    a.validate();
  }
}

const Utterance* Corpus::find(const std::string& id) const {
  for (const auto& u : utterances)
    if (u.id == id) return &u;
  return nullptr;
}

std::vector<std::string> Corpus::ids(std::optional<Split> split) const {
  std::vector<std::string> out;
  for (const auto& u : utterances)
    if (!split || u.split == *split) out.push_back(u.id);
  return out;
}

Corpus filter_min_duration(const Corpus& corpus, double min_ms) {
  Corpus out;
  out.name = corpus.name;
  std::unordered_set<std::string> kept;
  for (const auto& u : corpus.utterances) {
    if (u.duration_s * 1000.0 >= min_ms - 1e-9) {
      out.utterances.push_back(u);
      kept.insert(u.id);
    }
  }
  for (const auto& a : corpus.annotations)
    if (kept.count(a.utterance_id)) out.annotations.push_back(a);
  std::clog << "[corpus] " << corpus.name << ": kept " << out.utterances.size() << " of "
            << corpus.utterances.size() << " utterances >= " << min_ms << " ms\n";
  if (out.utterances.empty() && !corpus.utterances.empty())
    std::clog << "[corpus] warning: " << corpus.name << " has no utterances left after duration filter\n";
  return out;
}

// --- label mapping ---------------------------------------------------------

EmotionMapping::EmotionMapping() {
  using enum Emotion;
  const auto N = RawValence::negative;
  const auto Z = RawValence::neutral;
  const auto P = RawValence::positive;
  const auto H = Arousal::high;
  const auto L = Arousal::low;
  table_ = {{anger, {N, H}},    {fear, {N, H}},       {disgust, {N, H}}, {joy, {P, H}},
            {surprise, {P, H}}, {boredom, {N, L}},    {sadness, {N, L}}, {neutral, {Z, L}},
            {calm, {P, L}},     {tenderness, {P, L}}};
}

EmotionMapping EmotionMapping::from_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  EmotionMapping m;
  m.table_.clear();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(line);
    if (line_no == 1 && f.size() == 3 && detail::trim(f[0]) == "emotion") continue;
    if (f.size() != 3) throw Error(path.string() + " line " + std::to_string(line_no) + ": expected 3 fields");
    try {
      m.table_[parse_emotion(std::string(detail::trim(f[0])))] = {
          parse_raw_valence(std::string(detail::trim(f[1]))), parse_arousal(std::string(detail::trim(f[2])))};
    } catch (const Error& e) {
      throw Error(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return m;
}

VALabel EmotionMapping::map(Emotion emotion) const {
  const auto it = table_.find(emotion);
  if (it == table_.end()) throw Error("emotion '" + to_string(emotion) + "' has no valence/arousal mapping");
  return {merge_valence(it->second.first), it->second.second};
}

VALabel map_emotion_to_va(Emotion emotion, const EmotionMapping& mapping) { return mapping.map(emotion); }

// --- voting ----------------------------------------------------------------

VoteOutcome<Valence> vote_valence(std::span<const Annotation> annotations) {
  std::vector<RawValence> votes;
  for (const auto& a : annotations)
    if (!a.erroneous && a.valence) votes.push_back(*a.valence);
  const auto raw = majority_vote<RawValence>(votes);
  if (!raw.label) return {std::nullopt, raw.reason};
  return {merge_valence(*raw.label), ""};
}

VoteOutcome<Arousal> vote_arousal(std::span<const Annotation> annotations) {
  std::vector<Arousal> votes;
  for (const auto& a : annotations)
    if (!a.erroneous && a.arousal) votes.push_back(*a.arousal);
  return majority_vote<Arousal>(votes);
}

namespace {

std::map<std::string, std::vector<Annotation>> group_by_utterance(std::span<const Annotation> annotations) {
  std::map<std::string, std::vector<Annotation>> groups;
  for (const auto& a : annotations) groups[a.utterance_id].push_back(a);
  return groups;
}

struct Resolved {
  bool usable = false;
  std::optional<Valence> valence;
  std::optional<Arousal> arousal;
};

Resolved resolve_one(const std::vector<Annotation>& anns) {
  std::size_t flagged = 0, usable = 0;
  const Annotation* single = nullptr;
  for (const auto& a : anns) {
    if (a.erroneous) {
      ++flagged;
    } else {
      ++usable;
      single = &a;
    }
  }
  Resolved r;
  if (usable == 0 || flagged >= usable) return r;
  r.usable = true;
  if (usable == 1) {
    if (single->valence) r.valence = merge_valence(*single->valence);
    r.arousal = single->arousal;
  } else {
    r.valence = vote_valence(anns).label;
    r.arousal = vote_arousal(anns).label;
  }
  return r;
}

}  // namespace

std::map<std::string, int> resolve_task_labels(const Corpus& corpus, Task task, std::optional<Split> split,
                                               std::span<const Annotation> annotations) {
  std::map<std::string, int> out;
  for (const auto& [id, anns] : group_by_utterance(annotations)) {
    const Utterance* u = corpus.find(id);
    if (!u || (split && u->split != *split)) continue;
    const Resolved r = resolve_one(anns);
    if (!r.usable) continue;
    if (task == Task::valence && r.valence) out[id] = *r.valence == Valence::positive ? 1 : 0;
    if (task == Task::arousal && r.arousal) out[id] = *r.arousal == Arousal::high ? 1 : 0;
  }
  return out;
}

std::map<std::string, std::optional<VALabel>> resolve_va_labels(std::span<const Annotation> annotations) {
  std::map<std::string, std::optional<VALabel>> out;
  for (const auto& [id, anns] : group_by_utterance(annotations)) {
    const Resolved r = resolve_one(anns);
    if (r.usable && r.valence && r.arousal)
      out[id] = VALabel{*r.valence, *r.arousal};
    else
      out[id] = std::nullopt;
  }
  return out;
}

std::map<std::string, int> emotion_task_labels(const Corpus& corpus, Task task, std::optional<Split> split,
                                               const EmotionMapping& mapping) {
  std::map<std::string, int> out;
  std::size_t unmapped = 0;
  for (const auto& u : corpus.utterances) {
    if (split && u.split != *split) continue;
    if (!u.emotion) continue;
    if (!mapping.contains(*u.emotion)) {
      ++unmapped;
      continue;
    }
    out[u.id] = mapping.map(*u.emotion).for_task(task);
  }
  if (unmapped > 0)
    std::clog << "[corpus] warning: " << corpus.name << ": " << unmapped
              << " utterances have emotions outside the mapping and were skipped\n";
  return out;
}

// --- manifest --------------------------------------------------------------

Corpus load_manifest(const std::filesystem::path& path, const std::string& name) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  Corpus corpus;
  corpus.name = name.empty() ? path.stem().string() : name;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const std::string where = path.string() + " line " + std::to_string(line_no);
    try {
      const json j = json::parse(line);
      Utterance u;
      u.id = j.at("id").get<std::string>();
      u.audio_ref = j.at("audio").get<std::string>();
      u.duration_s = j.at("duration_s").get<double>();
      u.speaker = parse_speaker(j.value("speaker", std::string("unknown")));
      u.group_id = j.value("group", std::string());
      u.split = parse_split(j.value("split", std::string("unlabeled")));
      if (j.contains("emotion") && !j["emotion"].is_null()) u.emotion = parse_emotion(j["emotion"].get<std::string>());
      if (j.contains("recording") && !j["recording"].is_null()) u.recording = j["recording"].get<std::string>();
      if (j.contains("recording_offset_s") && !j["recording_offset_s"].is_null())
        u.recording_offset_s = j["recording_offset_s"].get<double>();
      if (!(u.duration_s > 0)) throw Error("non-positive duration_s");
      if (!seen.insert(u.id).second) throw Error("duplicate utterance id '" + u.id + "'");
      corpus.utterances.push_back(std::move(u));
    } catch (const json::exception& e) {
      throw Error(where + ": malformed manifest line: " + e.what());
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    }
  }
  return corpus;
}

void save_manifest(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& u : corpus.utterances) {
    json j = {{"id", u.id},
              {"audio", u.audio_ref},
              {"duration_s", u.duration_s},
              {"speaker", to_string(u.speaker)},
              {"group", u.group_id},
              {"split", to_string(u.split)}};
    if (u.emotion) j["emotion"] = to_string(*u.emotion);
    if (u.recording) j["recording"] = *u.recording;
    if (u.recording_offset_s) j["recording_offset_s"] = *u.recording_offset_s;
    out << j.dump() << '\n';
  }
}

// --- annotations -----------------------------------------------------------

namespace {
constexpr const char* kAnnotationHeader = "utterance_id,annotator,valence,arousal,erroneous,order,timestamp";
}

std::string format_annotations_csv(std::span<const Annotation> annotations) {
  std::ostringstream out;
  out << kAnnotationHeader << '\n';
  for (const auto& a : annotations) {
    out << detail::csv_escape(a.utterance_id) << ',' << detail::csv_escape(a.annotator_id) << ','
        << (a.valence ? to_string(*a.valence) : "") << ',' << (a.arousal ? to_string(*a.arousal) : "") << ','
        << (a.erroneous ? 1 : 0) << ',' << to_string(a.order) << ',' << detail::csv_escape(a.timestamp) << '\n';
  }
  return out.str();
}

std::vector<Annotation> parse_annotations_csv(const std::string& text, const std::string& what) {
  std::istringstream in(text);
  std::vector<Annotation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    if (line_no == 1) {
      if (detail::trim(line) != kAnnotationHeader) throw Error(what + ": unexpected annotation header");
      continue;
    }
    const std::string where = what + " line " + std::to_string(line_no);
    const auto f = detail::split_csv(line);
    if (f.size() != 7) throw Error(where + ": expected 7 fields, got " + std::to_string(f.size()));
    try {
      Annotation a;
      a.utterance_id = f[0];
      a.annotator_id = f[1];
      const std::string v(detail::trim(f[2])), ar(detail::trim(f[3])), err(detail::trim(f[4]));
      if (!v.empty()) a.valence = parse_raw_valence(v);
      if (!ar.empty()) a.arousal = parse_arousal(ar);
      if (err == "1" || err == "true")
        a.erroneous = true;
      else if (err == "0" || err == "false" || err.empty())
        a.erroneous = false;
      else
        throw Error("bad erroneous flag '" + err + "'");
      a.order = parse_order(std::string(detail::trim(f[5])));
      a.timestamp = f[6];
      a.validate();
      out.push_back(std::move(a));
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    }
  }
  return out;
}

std::vector<Annotation> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_annotations_csv(buf.str(), path.string());
}

void save_labels(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << format_annotations_csv(corpus.annotations);
}

Corpus load_corpus(const std::filesystem::path& manifest, const std::optional<std::filesystem::path>& annotations,
                   const std::string& name) {
  Corpus corpus = load_manifest(manifest, name);
  if (annotations) corpus.annotations = load_annotations(*annotations);
  corpus.validate();
  return corpus;
}

}  // namespace ser
