#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ser/common.hpp"

namespace ser {

/// Mono PCM in [-1, 1].
struct AudioClip {
  VectorXd samples;
  int sample_rate = 0;

  double duration() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

/// Throws unless the clip has a positive rate, at least one sample and
/// only finite values.
void validate(const AudioClip& clip);

/// Reads a mono WAV file holding 16-bit PCM or 32-bit float samples.
/// Multi-channel files are rejected rather than downmixed.
AudioClip read_wav(const std::filesystem::path& path);

/// Reads the part of a mono WAV file between `begin_s` and `end_s`
/// (clamped to the file).
AudioClip read_wav_range(const std::filesystem::path& path, double begin_s, double end_s);

/// Serializes a clip as 16-bit PCM WAV bytes.
std::string encode_wav_pcm16(const AudioClip& clip);

void write_wav_pcm16(const std::filesystem::path& path, const AudioClip& clip);

}  // namespace ser
