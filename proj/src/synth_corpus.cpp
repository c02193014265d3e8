#include "ser/synth_corpus.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include <json.hpp>

#include "binary_io.hpp"

namespace ser {

using nlohmann::json;

AudioClip synthesize_utterance(const VALabel& label, double duration_s, int sample_rate, Rng& rng,
                               double domain_shift) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const bool high = label.arousal == Arousal::high;
  const bool positive = label.valence == Valence::positive;

  const double f0 = (high ? 220.0 + 80.0 * u(rng) : 110.0 + 50.0 * u(rng)) * (1.0 + 0.15 * domain_shift);
  const double amplitude = high ? 0.35 + 0.25 * u(rng) : 0.08 + 0.10 * u(rng);
  const double glide = positive ? 0.3 : -0.2;
  const double decay = (positive ? 0.7 : 1.6) + 0.5 * domain_shift;
  const double vibrato_rate = 4.0 + 2.0 * u(rng);
  const double noise_level = 0.01 + 0.05 * domain_shift;

  const auto n = static_cast<Index>(std::llround(duration_s * sample_rate));
  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.resize(n);
  const double ramp = 0.05 * sample_rate;
  double phase = 0;
  for (Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    const double progress = static_cast<double>(i) / static_cast<double>(n);
    const double f = f0 * (1.0 + glide * progress) * (1.0 + 0.01 * std::sin(2 * std::numbers::pi * vibrato_rate * t));
    phase += 2 * std::numbers::pi * f / sample_rate;
    double v = 0;
    for (int h = 1; h <= 8 && h * f < 0.45 * sample_rate; ++h) v += std::sin(h * phase) / std::pow(h, decay);
    double env = 1.0;
    if (i < ramp) env = std::sin(0.5 * std::numbers::pi * i / ramp);
    if (n - 1 - i < ramp) env = std::min(env, std::sin(0.5 * std::numbers::pi * (n - 1 - i) / ramp));
    clip.samples[i] = std::clamp(amplitude * env * v / 2.0 + noise_level * noise(rng), -1.0, 1.0);
  }
  return clip;
}

namespace {

std::string numbered(const std::string& prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", i);
  return prefix + buf;
}

std::string timestamp(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "2024-01-01T%02d:%02d:%02dZ", (i / 3600) % 24, (i / 60) % 60, i % 60);
  return buf;
}

RawValence raw_valence(const VALabel& label, Rng& rng) {
  if (label.valence == Valence::positive) return RawValence::positive;
  return std::uniform_int_distribution<int>(0, 1)(rng) ? RawValence::neutral : RawValence::negative;
}

}  // namespace

SynthCorpusFiles write_synthetic_corpus(const std::filesystem::path& dir, const SynthCorpusOptions& o) {
  if (o.target_clips < 2 || o.train_clips < 1 || o.train_clips >= o.target_clips)
    throw Error("synthetic corpus: need 1 <= train_clips < target_clips");
  if (o.groups < 1 || o.annotators < 1 || o.source_clips < 0) throw Error("synthetic corpus: invalid options");
  namespace fs = std::filesystem;
  fs::create_directories(dir / "audio");
  fs::create_directories(dir / "recordings");
  fs::create_directories(dir / "source" / "audio");

  Rng rng(derive_seed(o.seed, "synth-corpus"));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> coin(0, 1);

  Corpus target;
  target.name = "mini";
  std::vector<VALabel> truth;
  std::vector<AudioClip> clips;
  for (int i = 0; i < o.target_clips; ++i) {
    Utterance utt;
    utt.id = numbered("mini_", i + 1);
    const bool train = i < o.train_clips;
    utt.split = train ? Split::train : Split::test;
    utt.group_id = train ? "fam" + std::to_string(i % o.groups + 1) : "fam_test";
    utt.speaker = coin(rng) ? SpeakerTag::female_adult : SpeakerTag::male_adult;
    const VALabel label{coin(rng) ? Valence::positive : Valence::neutral, coin(rng) ? Arousal::high : Arousal::low};
    const double duration = 0.7 + 1.3 * u(rng);
    AudioClip clip = synthesize_utterance(label, duration, o.sample_rate, rng);
    utt.audio_ref = "audio/" + utt.id + ".wav";
    utt.duration_s = clip.duration();
    write_wav_pcm16(dir / utt.audio_ref, clip);
    target.utterances.push_back(utt);
    truth.push_back(label);
    clips.push_back(std::move(clip));
  }

  // Train clips of each family are also laid out in one continuous recording.
  for (int g = 1; g <= o.groups; ++g) {
    const std::string group = "fam" + std::to_string(g);
    const std::string rec = "recordings/" + group + ".wav";
    std::vector<double> samples;
    for (std::size_t i = 0; i < target.utterances.size(); ++i) {
      auto& utt = target.utterances[i];
      if (utt.group_id != group) continue;
      for (int s = 0; s < static_cast<int>(0.4 * o.sample_rate); ++s) samples.push_back(0.005 * (u(rng) - 0.5));
      utt.recording = rec;
      utt.recording_offset_s = static_cast<double>(samples.size()) / o.sample_rate;
      for (Index s = 0; s < clips[i].samples.size(); ++s) samples.push_back(clips[i].samples[s]);
    }
    AudioClip recording;
    recording.sample_rate = o.sample_rate;
    recording.samples = Eigen::Map<const VectorXd>(samples.data(), static_cast<Index>(samples.size()));
    write_wav_pcm16(dir / rec, recording);
  }

  SynthCorpusFiles files;
  files.target_manifest = dir / "manifest.jsonl";
  save_manifest(target, files.target_manifest);

  std::vector<Annotation> gold, oracle;
  int stamp = 0;
  for (std::size_t i = 0; i < target.utterances.size(); ++i) {
    const auto& utt = target.utterances[i];
    if (utt.split == Split::train) {
      oracle.push_back({utt.id, "oracle", raw_valence(truth[i], rng), truth[i].arousal, false,
                        PresentationOrder::valence_first, timestamp(stamp++)});
      continue;
    }
    for (int a = 1; a <= o.annotators; ++a) {
      Annotation ann{utt.id, "gs" + std::to_string(a), raw_valence(truth[i], rng), truth[i].arousal, false,
                     coin(rng) ? PresentationOrder::arousal_first : PresentationOrder::valence_first,
                     timestamp(stamp++)};
      if (u(rng) < 0.1) ann.valence = static_cast<RawValence>(std::uniform_int_distribution<int>(0, 2)(rng));
      if (u(rng) < 0.1) ann.arousal = ann.arousal == Arousal::high ? Arousal::low : Arousal::high;
      gold.push_back(ann);
    }
  }
  files.gold_annotations = dir / "gold_annotations.csv";
  files.oracle_annotations = dir / "oracle_annotations.csv";
  detail::write_file(files.gold_annotations.string(), format_annotations_csv(gold));
  detail::write_file(files.oracle_annotations.string(), format_annotations_csv(oracle));

  Corpus source;
  source.name = "acted";
  const Emotion emotions[] = {Emotion::joy,     Emotion::anger,   Emotion::sadness, Emotion::calm,
                              Emotion::surprise, Emotion::fear,   Emotion::boredom, Emotion::tenderness};
  for (int i = 0; i < o.source_clips; ++i) {
    Utterance utt;
    utt.id = numbered("acted_", i + 1);
    utt.split = Split::train;
    utt.group_id = "spk" + std::to_string(i % 4 + 1);
    utt.speaker = i % 2 ? SpeakerTag::female_adult : SpeakerTag::male_adult;
    utt.emotion = emotions[i % 8];
    const AudioClip clip = synthesize_utterance(map_emotion_to_va(*utt.emotion), 0.8 + 1.0 * u(rng), o.sample_rate,
                                                rng, 0.6);
    utt.audio_ref = "audio/" + utt.id + ".wav";
    utt.duration_s = clip.duration();
    write_wav_pcm16(dir / "source" / utt.audio_ref, clip);
    source.utterances.push_back(utt);
  }
  files.source_manifest = dir / "source" / "manifest.jsonl";
  save_manifest(source, files.source_manifest);

  const json config = {
      {"seed", o.seed},
      {"run_dir", "run"},
      {"tasks", {"valence", "arousal"}},
      {"target", {{"name", "mini"}, {"manifest", "manifest.jsonl"}, {"gold_annotations", "gold_annotations.csv"}}},
      {"sources", json::array({{{"name", "acted"}, {"manifest", "source/manifest.jsonl"}}})},
      {"features", {{"kind", "logmel_functionals"}, {"min_duration_ms", 600}}},
      {"embedder", {{"patience", 50}, {"max_epochs", 400}}},
      {"al", {{"label_modes", {"cluster", "medoid"}}, {"folds", 5}}},
      {"ccg", {{"settings", {"1-to-1"}}}},
      {"da",
       {{"variants", {"us", "ss"}},
        {"max_epochs", 30},
        {"batch_size", 32},
        {"warmup_critic_steps", 20},
        {"source", {{"patience", 20}, {"max_epochs", 200}, {"batch_size", 64}}}}},
      {"serve", {{"host", "127.0.0.1"}, {"port", 8080}, {"overlap_n", 0}}}};
  files.config = dir / "config.json";
  detail::write_file(files.config.string(), config.dump(2) + "\n");
  return files;
}

}  // namespace ser
