#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ser/common.hpp"

namespace ser::eval {

/// Unweighted average recall in percent: mean per-class recall over the
/// classes present in `truth`.
double uar(std::span<const int> predictions, std::span<const int> truth);

struct ConfusionMatrix {
  std::vector<std::string> labels;
  Eigen::MatrixXi counts;  // rows: truth, columns: prediction

  /// Rows divided by their sums; empty rows stay zero.
  MatrixXd normalized() const;
  Index total() const { return counts.sum(); }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Labels are indices into `label_order`.
ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> truth,
                          std::vector<std::string> label_order);

enum class Method { al, ccg, da };
std::string to_string(Method m);
Method parse_method(const std::string& s);

struct ExperimentReport {
  Method method = Method::al;
  std::string source;         // source corpora ("+"-joined) or the target corpus for AL
  std::string feature_kind;
  std::string label_mode;     // cluster / medoid for AL, us / ss for DA, empty otherwise
  Task task = Task::valence;
  double uar = 0;
  ConfusionMatrix confusion;
  std::string fingerprint;
  std::uint64_t seed = 0;
  Index train_size = 0;
  Index test_size = 0;

  bool operator==(const ExperimentReport&) const = default;
};

std::string report_to_json(const ExperimentReport& r);
ExperimentReport report_from_json(const std::string& text);
std::string reports_to_json(const std::vector<ExperimentReport>& reports);
std::vector<ExperimentReport> reports_from_json(const std::string& text);

/// Sorted by (method, source, feature kind, label mode, task).
std::vector<ExperimentReport> sort_reports(std::vector<ExperimentReport> reports);

/// Aligned text table with one row per configuration and one UAR column
/// per task; the column maximum is wrapped in ** like a bold table cell.
std::string render_table(const std::vector<ExperimentReport>& reports);
std::string render_csv(const std::vector<ExperimentReport>& reports);

}  // namespace ser::eval
