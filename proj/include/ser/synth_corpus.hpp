#pragma once

#include <filesystem>

#include "ser/audio.hpp"
#include "ser/corpus.hpp"

// Deterministic synthetic corpora for smoke runs and tests: tone-and-noise
// clips whose pitch, loudness and contour depend on the valence/arousal class.

namespace ser {

struct SynthCorpusOptions {
  std::uint64_t seed = 1;
  int target_clips = 100;
  int train_clips = 75;
  int groups = 3;
  int annotators = 3;  // gold-standard annotators of the test split
  int source_clips = 80;
  int sample_rate = 16000;
};

struct SynthCorpusFiles {
  std::filesystem::path target_manifest;
  std::filesystem::path gold_annotations;    // every test clip, `annotators` raters
  std::filesystem::path oracle_annotations;  // one rater, every train clip
  std::filesystem::path source_manifest;     // acted corpus with emotion labels
  std::filesystem::path config;              // experiment config using all of the above
};

/// One clip of the given class. `domain_shift` in [0, 1] alters timbre and
/// noise the way a different recording setup would.
AudioClip synthesize_utterance(const VALabel& label, double duration_s, int sample_rate, Rng& rng,
                               double domain_shift = 0.0);

SynthCorpusFiles write_synthetic_corpus(const std::filesystem::path& dir, const SynthCorpusOptions& options);

}  // namespace ser
