#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ser/common.hpp"

namespace ser {

enum class SpeakerTag { male_adult, female_adult, key_child, other_child, unknown };
enum class Split { train, test, unlabeled };

/// Normalized emotion categories of the source corpora. Aliases such as
/// `happy` or `angry` parse to their canonical category.
enum class Emotion { anger, boredom, disgust, fear, joy, neutral, sadness, surprise, calm, tenderness };

enum class RawValence { negative, neutral, positive };
enum class Valence { neutral, positive };
enum class Arousal { low, high };
enum class PresentationOrder { valence_first, arousal_first };

struct VALabel {
  Valence valence = Valence::neutral;
  Arousal arousal = Arousal::low;

  /// 0/1 class index for a task (1 = positive valence / high arousal).
  int for_task(Task task) const {
    return task == Task::valence ? (valence == Valence::positive ? 1 : 0) : (arousal == Arousal::high ? 1 : 0);
  }
  bool operator==(const VALabel&) const = default;
};

std::string to_string(SpeakerTag v);
std::string to_string(Split v);
std::string to_string(Emotion v);
std::string to_string(RawValence v);
std::string to_string(Valence v);
std::string to_string(Arousal v);
std::string to_string(PresentationOrder v);

SpeakerTag parse_speaker(const std::string& s);
Split parse_split(const std::string& s);
Emotion parse_emotion(const std::string& s);
RawValence parse_raw_valence(const std::string& s);
Arousal parse_arousal(const std::string& s);
PresentationOrder parse_order(const std::string& s);

/// Negative and neutral valence collapse to `neutral`.
inline Valence merge_valence(RawValence v) {
  return v == RawValence::positive ? Valence::positive : Valence::neutral;
}

/// Display names of the two classes of a task, index 0 then 1.
std::vector<std::string> class_names(Task task);

struct Utterance {
  std::string id;
  std::string audio_ref;
  double duration_s = 0;
  SpeakerTag speaker = SpeakerTag::unknown;
  std::string group_id;
  Split split = Split::unlabeled;
  /// Categorical label of acted source corpora.
  std::optional<Emotion> emotion;
  /// Long recording this segment was cut from, for annotation context.
  std::optional<std::string> recording;
  std::optional<double> recording_offset_s;

  bool operator==(const Utterance&) const = default;
};

struct Annotation {
  std::string utterance_id;
  std::string annotator_id;
  std::optional<RawValence> valence;
  std::optional<Arousal> arousal;
  bool erroneous = false;
  PresentationOrder order = PresentationOrder::valence_first;
  std::string timestamp;

  /// Throws unless the record is either erroneous or carries both dimensions.
  void validate() const;
  bool operator==(const Annotation&) const = default;
};

struct Corpus {
  std::string name;
  std::vector<Utterance> utterances;
  std::vector<Annotation> annotations;

  /// Unique ids, positive durations, annotations referencing known ids.
  void validate() const;
  const Utterance* find(const std::string& id) const;
  std::vector<std::string> ids(std::optional<Split> split = std::nullopt) const;
  bool operator==(const Corpus&) const = default;
};

/// Drops utterances shorter than `min_ms` (and their annotations).
Corpus filter_min_duration(const Corpus& corpus, double min_ms = 600.0);

/// Emotion category to valence/arousal quadrant, with negative valence
/// merged into neutral.
class EmotionMapping {
public:
  /// The default quadrant table.
  EmotionMapping();
  /// Replaces the table with a CSV `emotion,valence,arousal`; categories the
  /// file omits become unmapped.
  static EmotionMapping from_csv(const std::filesystem::path& path);

  VALabel map(Emotion emotion) const;
  bool contains(Emotion emotion) const { return table_.count(emotion) > 0; }

private:
  std::map<Emotion, std::pair<RawValence, Arousal>> table_;
};

VALabel map_emotion_to_va(Emotion emotion, const EmotionMapping& mapping = EmotionMapping());

/// Result of a strict-majority vote; `label` is empty when there is no
/// strict majority or too few votes, with the cause in `reason`.
template <typename Label>
struct VoteOutcome {
  std::optional<Label> label;
  std::string reason;
};

template <typename Label>
VoteOutcome<Label> majority_vote(std::span<const Label> votes) {
  if (votes.size() < 2) return {std::nullopt, "fewer than 2 usable annotations"};
  for (const Label& candidate : votes) {
    std::size_t count = 0;
    for (const Label& v : votes) count += (v == candidate) ? 1 : 0;
    if (2 * count > votes.size()) return {candidate, ""};
  }
  return {std::nullopt, "no strict majority"};
}

/// Valence vote over raw (ternary) labels of the non-erroneous annotations,
/// merged to binary afterwards.
VoteOutcome<Valence> vote_valence(std::span<const Annotation> annotations);
VoteOutcome<Arousal> vote_arousal(std::span<const Annotation> annotations);

/// Cohen's kappa with marginal-product chance agreement.
template <typename Label>
double cohens_kappa(std::span<const Label> a, std::span<const Label> b) {
  if (a.size() != b.size()) throw Error("kappa: label sequences differ in length");
  if (a.size() < 2) throw Error("kappa: need at least 2 paired items");
  std::vector<Label> classes;
  for (const auto* seq : {&a, &b})
    for (const Label& v : *seq)
      if (std::find(classes.begin(), classes.end(), v) == classes.end()) classes.push_back(v);
  const double n = static_cast<double>(a.size());
  double agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) agree += (a[i] == b[i]) ? 1 : 0;
  const double p_o = agree / n;
  double p_e = 0;
  for (const Label& c : classes) {
    const double pa = static_cast<double>(std::count(a.begin(), a.end(), c)) / n;
    const double pb = static_cast<double>(std::count(b.begin(), b.end(), c)) / n;
    p_e += pa * pb;
  }
  if (p_e >= 1.0) return p_o >= 1.0 ? 1.0 : 0.0;
  return (p_o - p_e) / (1.0 - p_e);
}

/// Per-utterance 0/1 labels for `task` derived from annotations. An
/// utterance is dropped when at least as many annotators flagged it
/// erroneous as gave usable labels. One usable annotation is taken as is;
/// two or more go through strict-majority voting and drop on no majority.
std::map<std::string, int> resolve_task_labels(const Corpus& corpus, Task task, std::optional<Split> split,
                                               std::span<const Annotation> annotations);

/// Both dimensions per annotated utterance under the same rules; an
/// utterance resolves to nullopt when it is erroneous or either dimension
/// has no majority.
std::map<std::string, std::optional<VALabel>> resolve_va_labels(std::span<const Annotation> annotations);

/// Labels from the `emotion` field of every utterance in the split.
std::map<std::string, int> emotion_task_labels(const Corpus& corpus, Task task, std::optional<Split> split,
                                               const EmotionMapping& mapping);

// --- persistence -----------------------------------------------------------

/// JSONL manifest, one utterance per line:
///   {"id","audio","duration_s","speaker","group","split"} plus optional
///   "emotion", "recording", "recording_offset_s".
Corpus load_manifest(const std::filesystem::path& path, const std::string& name = "");
void save_manifest(const Corpus& corpus, const std::filesystem::path& path);

/// CSV `utterance_id,annotator,valence,arousal,erroneous,order,timestamp`.
std::vector<Annotation> load_annotations(const std::filesystem::path& path);
std::string format_annotations_csv(std::span<const Annotation> annotations);
std::vector<Annotation> parse_annotations_csv(const std::string& text, const std::string& what);
void save_labels(const Corpus& corpus, const std::filesystem::path& path);

/// Manifest plus optional annotations file, validated together.
Corpus load_corpus(const std::filesystem::path& manifest, const std::optional<std::filesystem::path>& annotations,
                   const std::string& name = "");

}  // namespace ser
