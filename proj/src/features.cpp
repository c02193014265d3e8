#include "ser/features.hpp"

#include <algorithm>
#include <complex>
#include <fstream>
#include <numbers>
#include <unordered_map>
#include <unordered_set>

#include <unsupported/Eigen/FFT>

#include "text_util.hpp"

namespace ser {

std::string to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::logmel_functionals: return "logmel_functionals";
    case FeatureKind::external_import: return "external_import";
    case FeatureKind::embedding: return "embedding";
  }
  return "unknown";
}

void FeatureTable::validate() const {
  if (static_cast<Index>(utterance_ids.size()) != matrix.rows())
    throw Error("feature table has " + std::to_string(utterance_ids.size()) + " ids but " +
                std::to_string(matrix.rows()) + " rows");
  std::unordered_set<std::string> seen;
  for (const auto& id : utterance_ids)
    if (!seen.insert(id).second) throw Error("feature table has duplicate id '" + id + "'");
}

Index FeatureTable::find(const std::string& id) const {
  const auto it = std::find(utterance_ids.begin(), utterance_ids.end(), id);
  return it == utterance_ids.end() ? -1 : static_cast<Index>(it - utterance_ids.begin());
}

FeatureTable FeatureTable::select(const std::vector<std::string>& ids) const {
  std::unordered_map<std::string, Index> index;
  for (std::size_t i = 0; i < utterance_ids.size(); ++i) index.emplace(utterance_ids[i], static_cast<Index>(i));
  FeatureTable out;
  out.kind = kind;
  out.normalization = normalization;
  out.utterance_ids = ids;
  out.matrix.resize(static_cast<Index>(ids.size()), matrix.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto it = index.find(ids[i]);
    if (it == index.end()) throw Error("feature table has no row for '" + ids[i] + "'");
    out.matrix.row(static_cast<Index>(i)) = matrix.row(it->second);
  }
  return out;
}

// --- mel filterbank --------------------------------------------------------

double MelFilterbank::hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double MelFilterbank::mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(int sample_rate, int fft_size, int bands) {
  if (sample_rate <= 0 || fft_size < 2 || bands < 1) throw Error("invalid mel filterbank geometry");
  const int bins = fft_size / 2 + 1;
  const double nyquist = sample_rate / 2.0;
  const double mel_hi = hz_to_mel(nyquist);
  VectorXd edges(bands + 2);
  for (int i = 0; i < bands + 2; ++i) edges[i] = mel_to_hz(mel_hi * i / (bands + 1));
  centers_ = edges.segment(1, bands);
  weights_ = MatrixXd::Zero(bands, bins);
  for (int b = 0; b < bands; ++b) {
    const double lo = edges[b], mid = edges[b + 1], hi = edges[b + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / fft_size;
      const double w = std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid));
      weights_(b, k) = std::max(0.0, w);
    }
  }
}

// --- log-mel front end -----------------------------------------------------

LogMelExtractor::LogMelExtractor(int sample_rate)
    : sample_rate_(sample_rate),
      window_length_(static_cast<int>(std::lround(kWindowSeconds * sample_rate))),
      hop_length_(static_cast<int>(std::lround(kHopSeconds * sample_rate))),
      fft_size_(1),
      filterbank_(sample_rate > 0 ? sample_rate : 1, 2) {
  if (sample_rate <= 0) throw Error("sample rate must be positive");
  if (window_length_ < 2 || hop_length_ < 1) throw Error("sample rate too low for 30 ms frames");
  while (fft_size_ < window_length_) fft_size_ *= 2;
  window_.resize(window_length_);
  for (int n = 0; n < window_length_; ++n)
    window_[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / (window_length_ - 1));
  filterbank_ = MelFilterbank(sample_rate, fft_size_);
}

LogMelSpec LogMelExtractor::compute(const AudioClip& clip) const {
  validate(clip);
  if (clip.sample_rate != sample_rate_)
    throw Error("clip sample rate " + std::to_string(clip.sample_rate) + " Hz does not match " +
                std::to_string(sample_rate_) + " Hz");
  const Index len = clip.samples.size();
  if (len < window_length_)
    throw Error("clip too short: " + std::to_string(len) + " samples, need " +
                std::to_string(window_length_));
  const Index frames = (len - window_length_) / hop_length_ + 1;
  const int bins = fft_size_ / 2 + 1;

  Eigen::FFT<double> fft;
  std::vector<double> buffer(static_cast<std::size_t>(fft_size_), 0.0);
  std::vector<std::complex<double>> spectrum;
  VectorXd power(bins);
  LogMelSpec spec;
  spec.frames.resize(frames, filterbank_.weights().rows());
  for (Index t = 0; t < frames; ++t) {
    const Index start = t * hop_length_;
    for (int n = 0; n < window_length_; ++n) buffer[n] = clip.samples[start + n] * window_[n];
    fft.fwd(spectrum, buffer);
    for (int k = 0; k < bins; ++k) power[k] = std::norm(spectrum[static_cast<std::size_t>(k)]);
    const VectorXd energies = filterbank_.weights() * power;
    spec.frames.row(t) = (energies.array() + kLogFloor).log().transpose();
  }
  return spec;
}

LogMelSpec compute_logmel(const AudioClip& clip) {
  validate(clip);
  return LogMelExtractor(clip.sample_rate).compute(clip);
}

// --- deltas and functionals ------------------------------------------------

namespace {

MatrixXd regression_delta(const MatrixXd& x) {
  constexpr int kReach = 2;
  constexpr double kNorm = 2.0 * (1 * 1 + 2 * 2);
  const Index t_count = x.rows();
  MatrixXd d = MatrixXd::Zero(t_count, x.cols());
  for (Index t = 0; t < t_count; ++t) {
    for (int n = 1; n <= kReach; ++n) {
      const Index ahead = std::min<Index>(t + n, t_count - 1);
      const Index behind = std::max<Index>(t - n, 0);
      d.row(t) += n * (x.row(ahead) - x.row(behind));
    }
  }
  return d / kNorm;
}

}  // namespace

MatrixXd deltas(const MatrixXd& frames, int order) {
  if (order != 1 && order != 2) throw Error("delta order must be 1 or 2");
  if (frames.rows() < 3) throw Error("deltas need at least 3 frames");
  MatrixXd d = regression_delta(frames);
  return order == 1 ? d : regression_delta(d);
}

FeatureVector functionals(const LogMelSpec& spec) {
  const MatrixXd& x = spec.frames;
  if (x.rows() < 3) throw Error("functionals need at least 3 frames");
  if (x.cols() != kMelBands) throw Error("log-mel spectrogram must have 40 bands");
  const MatrixXd d1 = deltas(x, 1);
  const MatrixXd d2 = deltas(x, 2);

  FeatureVector out;
  out.source = FeatureKind::logmel_functionals;
  out.values.resize(kLogMelFeatureDim);
  constexpr Index kDeltaBase = kMelBands * kStaticFunctionals;
  constexpr Index kDelta2Base = kDeltaBase + kMelBands * kDeltaFunctionals;
  for (Index b = 0; b < kMelBands; ++b) {
    const Moments m = moments(x.col(b));
    const double lo = x.col(b).minCoeff();
    const double hi = x.col(b).maxCoeff();
    out.values.segment<kStaticFunctionals>(b * kStaticFunctionals)
        << m.mean, m.variance, m.skewness, m.kurtosis, lo, hi, hi - lo;

    const Moments m1 = moments(d1.col(b));
    out.values.segment<kDeltaFunctionals>(kDeltaBase + b * kDeltaFunctionals)
        << m1.mean, m1.variance, m1.skewness, m1.kurtosis;
    const Moments m2 = moments(d2.col(b));
    out.values.segment<kDeltaFunctionals>(kDelta2Base + b * kDeltaFunctionals)
        << m2.mean, m2.variance, m2.skewness, m2.kurtosis;
  }
  return out;
}

FeatureVector extract_logmel_features(const AudioClip& clip) {
  return functionals(compute_logmel(clip));
}

// --- z-scoring -------------------------------------------------------------

ZScoreResult zscore_table(const FeatureTable& table) {
  table.validate();
  if (table.normalization != Normalization::raw) throw Error("table is already z-scored");
  if (table.rows() < 2) throw Error("z-scoring needs at least 2 rows");
  ZScoreStats stats;
  stats.mean = table.matrix.colwise().mean().transpose();
  stats.stddev = ((table.matrix.rowwise() - stats.mean.transpose()).array().square().colwise().sum() /
                  static_cast<double>(table.rows()))
                     .sqrt()
                     .transpose();
  // Columns whose spread is at rounding level are treated as constant.
  for (Index j = 0; j < stats.stddev.size(); ++j)
    if (stats.stddev[j] <= 1e-12 * std::max(1.0, std::abs(stats.mean[j]))) stats.stddev[j] = 0;
  return {apply_zscore(table, stats), stats};
}

FeatureTable apply_zscore(const FeatureTable& table, const ZScoreStats& stats) {
  if (table.dim() != stats.mean.size()) throw Error("z-score statistics have the wrong dimension");
  FeatureTable out = table;
  for (Index j = 0; j < table.dim(); ++j) {
    if (stats.stddev[j] > 0)
      out.matrix.col(j) = (table.matrix.col(j).array() - stats.mean[j]) / stats.stddev[j];
    else
      out.matrix.col(j).setZero();
  }
  out.normalization = Normalization::zscored;
  return out;
}

FeatureTable invert_zscore(const FeatureTable& table, const ZScoreStats& stats) {
  if (table.dim() != stats.mean.size()) throw Error("z-score statistics have the wrong dimension");
  FeatureTable out = table;
  for (Index j = 0; j < table.dim(); ++j)
    out.matrix.col(j) = table.matrix.col(j).array() * stats.stddev[j] + stats.mean[j];
  out.normalization = Normalization::raw;
  return out;
}

// --- external feature tables -----------------------------------------------

FeatureTable import_external_features(const std::filesystem::path& path,
                                      const std::vector<std::string>& utterance_ids) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(path.string() + ": empty feature file");
  const auto header = detail::split_csv(line);
  if (header.size() < 2 || detail::trim(header[0]) != "utterance_id")
    throw Error(path.string() + ": header must start with utterance_id");
  const std::size_t dim = header.size() - 1;

  std::unordered_map<std::string, std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv(line);
    const std::string where = path.string() + " row " + std::to_string(line_no);
    if (fields.size() != header.size())
      throw Error(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                  std::to_string(fields.size()));
    std::vector<double> values(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      const auto v = detail::parse_double(fields[j + 1]);
      if (!v) throw Error(where + ": non-numeric value '" + fields[j + 1] + "' in column " + header[j + 1]);
      values[j] = *v;
    }
    const std::string id(detail::trim(fields[0]));
    if (!rows.emplace(id, std::move(values)).second) throw Error(where + ": duplicate id '" + id + "'");
  }

  std::vector<std::string> missing;
  for (const auto& id : utterance_ids)
    if (!rows.count(id)) missing.push_back(id);
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    throw Error(path.string() + ": missing requested ids: " + list);
  }

  FeatureTable table;
  table.kind = FeatureKind::external_import;
  table.normalization = Normalization::raw;
  table.utterance_ids = utterance_ids;
  table.matrix.resize(static_cast<Index>(utterance_ids.size()), static_cast<Index>(dim));
  for (std::size_t i = 0; i < utterance_ids.size(); ++i) {
    const auto& values = rows.at(utterance_ids[i]);
    for (std::size_t j = 0; j < dim; ++j) table.matrix(static_cast<Index>(i), static_cast<Index>(j)) = values[j];
  }
  return table;
}

}  // namespace ser
