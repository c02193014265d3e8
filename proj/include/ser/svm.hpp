#pragma once

#include <map>
#include <span>
#include <vector>

#include "ser/common.hpp"

// Binary RBF-kernel SVM with per-class penalty weights. Features are
// row-per-sample.

namespace ser::svm {

struct SvmConfig {
  double C = 1.0;
  double gamma = 1.0;
  /// Label -> weight; empty means balanced weights N / (2 count(label)).
  std::map<int, double> class_weights;
  double tolerance = 1e-3;

  void validate() const;
};

/// N / (2 count(label)) for both labels.
std::map<int, double> balanced_weights(std::span<const int> labels);

struct SvmModel {
  MatrixXd support_vectors;  // one row per support vector
  VectorXd dual_coef;        // y_i alpha_i, y in {-1, +1}
  VectorXd upper_bound;      // C weight(y_i) of each support vector
  double bias = 0;
  double gamma = 1.0;
  int negative_label = 0;    // the smaller label
  int positive_label = 1;
  Index iterations = 0;

  Index dim() const { return support_vectors.cols(); }
  /// sum_i y_i alpha_i k(x_i, x) + bias, one value per row.
  VectorXd decision_values(const MatrixXd& features) const;
  std::vector<int> predict(const MatrixXd& features) const;
};

double rbf_kernel(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b, double gamma);

/// Soft-margin dual solved by SMO with second-order working-set selection,
/// stopping when the maximal KKT violation falls below the tolerance.
SvmModel train(const MatrixXd& features, std::span<const int> labels, const SvmConfig& config);

struct Grid {
  std::vector<double> C;
  std::vector<double> gamma;

  /// C in {0.1, 1, 10, 100}; gamma log-spaced over [1e-4, 1] in 8 steps.
  static Grid default_grid();
};

struct GridCell {
  double C = 0;
  double gamma = 0;
  double mean_uar = 0;
  std::vector<double> fold_uar;
};

struct GridSearchResult {
  std::vector<GridCell> cells;  // C-major, both axes in grid order
  std::size_t best = 0;
  std::vector<int> fold_of;     // validation fold of every sample
  SvmModel model;               // best cell refit on all samples
};

/// Every class is shuffled by the seed and dealt round-robin into the folds.
std::vector<int> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed);

/// Mean validation UAR per cell; the best cell (ties to smaller C, then
/// smaller gamma) is refit on all data. `jobs` threads evaluate cells.
GridSearchResult grid_search_cv(const MatrixXd& features, std::span<const int> labels, const Grid& grid,
                                int folds, std::uint64_t seed, int jobs = 1);

}  // namespace ser::svm
