#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ser/audio.hpp"

namespace ser {

// Frame-level analysis settings. These are fixed for the whole toolkit.
inline constexpr int kMelBands = 40;
inline constexpr double kWindowSeconds = 0.030;
inline constexpr double kHopSeconds = 0.010;
inline constexpr double kLogFloor = 1e-10;

inline constexpr int kStaticFunctionals = 7;  // mean, var, skew, kurt, min, max, range
inline constexpr int kDeltaFunctionals = 4;   // mean, var, skew, kurt
inline constexpr int kLogMelFeatureDim =
    kMelBands * kStaticFunctionals + 2 * kMelBands * kDeltaFunctionals;
static_assert(kLogMelFeatureDim == 600);

enum class FeatureKind : std::uint8_t {
  logmel_functionals = 0,
  external_import = 1,
  embedding = 2,
};

enum class Normalization : std::uint8_t { raw = 0, zscored = 1 };

std::string to_string(FeatureKind kind);

/// T x 40 log mel-filterbank energies, one row per 10 ms frame.
struct LogMelSpec {
  MatrixXd frames;

  Index num_frames() const { return frames.rows(); }
};

struct FeatureVector {
  VectorXd values;
  FeatureKind source = FeatureKind::logmel_functionals;

  Index dim() const { return values.size(); }
};

/// N x D features with one row per utterance.
struct FeatureTable {
  std::vector<std::string> utterance_ids;
  MatrixXd matrix;
  FeatureKind kind = FeatureKind::logmel_functionals;
  Normalization normalization = Normalization::raw;

  Index rows() const { return matrix.rows(); }
  Index dim() const { return matrix.cols(); }

  /// Throws unless ids and rows line up and the ids are unique.
  void validate() const;
  /// Row index for `id`, or -1.
  Index find(const std::string& id) const;
  /// Subtable with the given ids, in that order. Throws on a missing id.
  FeatureTable select(const std::vector<std::string>& ids) const;
};

/// Triangular mel filterbank on the HTK mel scale spanning 0 Hz to Nyquist.
class MelFilterbank {
public:
  MelFilterbank(int sample_rate, int fft_size, int bands = kMelBands);

  /// bands x (fft_size/2 + 1) weights.
  const MatrixXd& weights() const { return weights_; }
  /// Peak frequency of every triangle in Hz.
  const VectorXd& center_frequencies() const { return centers_; }

  static double hz_to_mel(double hz);
  static double mel_to_hz(double mel);

private:
  MatrixXd weights_;
  VectorXd centers_;
};

/// Reusable log-mel front end for a fixed sample rate.
class LogMelExtractor {
public:
  explicit LogMelExtractor(int sample_rate);

  LogMelSpec compute(const AudioClip& clip) const;

  int sample_rate() const { return sample_rate_; }
  int window_length() const { return window_length_; }
  int hop_length() const { return hop_length_; }
  int fft_size() const { return fft_size_; }
  const MelFilterbank& filterbank() const { return filterbank_; }

private:
  int sample_rate_;
  int window_length_;
  int hop_length_;
  int fft_size_;
  VectorXd window_;
  MelFilterbank filterbank_;
};

/// Hann-windowed power spectrum, 40 mel bands, natural log with a 1e-10
/// floor. Frames are not padded: T = floor((len - win) / hop) + 1.
LogMelSpec compute_logmel(const AudioClip& clip);

/// Regression deltas over a +-2 frame window with replicated edges;
/// order 2 is the delta of the delta.
MatrixXd deltas(const MatrixXd& frames, int order);

/// Population mean, variance, skewness and (non-excess) kurtosis.
/// Skewness and kurtosis are 0 for a zero-variance series.
struct Moments {
  double mean = 0;
  double variance = 0;
  double skewness = 0;
  double kurtosis = 0;
};

template <typename Derived>
Moments moments(const Eigen::DenseBase<Derived>& series) {
  Moments m;
  const auto n = static_cast<double>(series.size());
  m.mean = series.derived().mean();
  double m2 = 0, m3 = 0, m4 = 0;
  for (Index i = 0; i < series.size(); ++i) {
    const double d = series.derived().coeff(i) - m.mean;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  m.variance = m2;
  if (m2 > 0) {
    m.skewness = m3 / std::pow(m2, 1.5);
    m.kurtosis = m4 / (m2 * m2);
  }
  return m;
}

/// 600-dim utterance vector. Layout:
///   [0, 280)    per band b: mean, var, skew, kurt, min, max, range of the log-mel
///   [280, 440)  per band b: mean, var, skew, kurt of the first-order deltas
///   [440, 600)  per band b: mean, var, skew, kurt of the second-order deltas
FeatureVector functionals(const LogMelSpec& spec);

/// compute_logmel followed by functionals.
FeatureVector extract_logmel_features(const AudioClip& clip);

struct ZScoreStats {
  VectorXd mean;
  VectorXd stddev;  // population; 0 marks a degenerate column
};

struct ZScoreResult {
  FeatureTable table;
  ZScoreStats stats;
};

/// Corpus-level z-scoring. Zero-variance columns become all zeros.
ZScoreResult zscore_table(const FeatureTable& table);

/// Applies previously computed statistics to another raw table.
FeatureTable apply_zscore(const FeatureTable& table, const ZScoreStats& stats);

/// Maps a z-scored table back to raw units.
FeatureTable invert_zscore(const FeatureTable& table, const ZScoreStats& stats);

/// Reads a CSV with header `utterance_id,f0,f1,...` and returns the rows for
/// `utterance_ids` in that order.
FeatureTable import_external_features(const std::filesystem::path& path,
                                      const std::vector<std::string>& utterance_ids);

}  // namespace ser
