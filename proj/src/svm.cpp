#include "ser/svm.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>
#include <thread>

#include "ser/eval.hpp"

namespace ser::svm {

namespace {

constexpr double kTau = 1e-12;

struct Problem {
  const MatrixXd& kernel;  // N x N
  VectorXd y;              // +-1
  VectorXd bound;          // per-sample C weight(y_i)
};

struct Solution {
  VectorXd alpha;
  double bias = 0;
  Index iterations = 0;
};

// Dual: min 1/2 a'Qa - e'a, 0 <= a_i <= bound_i, y'a = 0, Q_ij = y_i y_j K_ij.
Solution smo(const Problem& p, double eps) {
  const Index n = p.y.size();
  const MatrixXd& K = p.kernel;
  const VectorXd& y = p.y;
  Solution s;
  s.alpha = VectorXd::Zero(n);
  VectorXd& a = s.alpha;
  VectorXd G = VectorXd::Constant(n, -1.0);
  auto upper = [&](Index t) { return a[t] >= p.bound[t]; };
  auto lower = [&](Index t) { return a[t] <= 0; };
  auto in_up = [&](Index t) { return y[t] > 0 ? !upper(t) : !lower(t); };
  auto in_low = [&](Index t) { return y[t] > 0 ? !lower(t) : !upper(t); };

  const Index max_iter = std::max<Index>(10'000'000, 100 * n);
  for (; s.iterations < max_iter; ++s.iterations) {
    double gmax = -std::numeric_limits<double>::infinity();
    Index i = -1;
    for (Index t = 0; t < n; ++t)
      if (in_up(t) && -y[t] * G[t] > gmax) {
        gmax = -y[t] * G[t];
        i = t;
      }
    double gmax2 = -std::numeric_limits<double>::infinity();
    Index j = -1;
    double obj_min = std::numeric_limits<double>::infinity();
    for (Index t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      gmax2 = std::max(gmax2, y[t] * G[t]);
      if (i < 0) continue;
      const double b = gmax + y[t] * G[t];
      if (b > 0) {
        double quad = K(i, i) + K(t, t) - 2.0 * K(i, t);
        if (quad <= 0) quad = kTau;
        const double obj = -(b * b) / quad;
        if (obj < obj_min) {
          obj_min = obj;
          j = t;
        }
      }
    }
    if (i < 0 || j < 0 || gmax + gmax2 < eps) break;

    const double ci = p.bound[i], cj = p.bound[j];
    const double old_i = a[i], old_j = a[j];
    const double qij = y[i] * y[j] * K(i, j);
    if (y[i] != y[j]) {
      double quad = K(i, i) + K(j, j) + 2.0 * qij;
      if (quad <= 0) quad = kTau;
      const double delta = (-G[i] - G[j]) / quad;
      const double diff = a[i] - a[j];
      a[i] += delta;
      a[j] += delta;
      if (diff > 0) {
        if (a[j] < 0) {
          a[j] = 0;
          a[i] = diff;
        }
      } else if (a[i] < 0) {
        a[i] = 0;
        a[j] = -diff;
      }
      if (diff > ci - cj) {
        if (a[i] > ci) {
          a[i] = ci;
          a[j] = ci - diff;
        }
      } else if (a[j] > cj) {
        a[j] = cj;
        a[i] = cj + diff;
      }
    } else {
      double quad = K(i, i) + K(j, j) - 2.0 * qij;
      if (quad <= 0) quad = kTau;
      const double delta = (G[i] - G[j]) / quad;
      const double sum = a[i] + a[j];
      a[i] -= delta;
      a[j] += delta;
      if (sum > ci) {
        if (a[i] > ci) {
          a[i] = ci;
          a[j] = sum - ci;
        }
      } else if (a[j] < 0) {
        a[j] = 0;
        a[i] = sum;
      }
      if (sum > cj) {
        if (a[j] > cj) {
          a[j] = cj;
          a[i] = sum - cj;
        }
      } else if (a[i] < 0) {
        a[i] = 0;
        a[j] = sum;
      }
    }
    const double di = a[i] - old_i, dj = a[j] - old_j;
    G.array() += (y.array() * K.col(i).array() * (y[i] * di) + y.array() * K.col(j).array() * (y[j] * dj));
  }
  if (s.iterations >= max_iter) std::clog << "[svm] warning: SMO stopped at the iteration limit\n";

  double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum_free = 0;
  Index n_free = 0;
  for (Index t = 0; t < n; ++t) {
    const double yg = y[t] * G[t];
    if (upper(t)) {
      if (y[t] < 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (lower(t)) {
      if (y[t] > 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }
  const double rho = n_free > 0 ? sum_free / static_cast<double>(n_free) : 0.5 * (ub + lb);
  s.bias = -rho;
  return s;
}

MatrixXd squared_distances(const MatrixXd& x) {
  const VectorXd norms = x.rowwise().squaredNorm();
  MatrixXd d = -2.0 * (x * x.transpose());
  d.colwise() += norms;
  d.rowwise() += norms.transpose();
  d = d.cwiseMax(0.0);
  d.diagonal().setZero();
  return d;
}

struct BinaryLabels {
  int negative = 0;
  int positive = 1;
  VectorXd y;
};

BinaryLabels encode_labels(std::span<const int> labels) {
  const std::set<int> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) throw Error("SVM training needs two classes, got " + std::to_string(distinct.size()));
  if (distinct.size() > 2) throw Error("SVM training supports exactly two classes, got " + std::to_string(distinct.size()));
  BinaryLabels b;
  b.negative = *distinct.begin();
  b.positive = *distinct.rbegin();
  b.y.resize(static_cast<Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) b.y[static_cast<Index>(i)] = labels[i] == b.positive ? 1.0 : -1.0;
  return b;
}

SvmModel fit_kernel(const MatrixXd& features, std::span<const int> labels, const MatrixXd& kernel,
                    const SvmConfig& config) {
  const BinaryLabels enc = encode_labels(labels);
  const auto weights = config.class_weights.empty() ? balanced_weights(labels) : config.class_weights;
  VectorXd bound(enc.y.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = weights.find(labels[i]);
    if (it == weights.end()) throw Error("no class weight for label " + std::to_string(labels[i]));
    bound[static_cast<Index>(i)] = config.C * it->second;
  }
  const Solution sol = smo({kernel, enc.y, bound}, config.tolerance);

  SvmModel m;
  m.gamma = config.gamma;
  m.bias = sol.bias;
  m.negative_label = enc.negative;
  m.positive_label = enc.positive;
  m.iterations = sol.iterations;
  std::vector<Index> sv;
  for (Index i = 0; i < sol.alpha.size(); ++i)
    if (sol.alpha[i] > 0) sv.push_back(i);
  m.support_vectors.resize(static_cast<Index>(sv.size()), features.cols());
  m.dual_coef.resize(static_cast<Index>(sv.size()));
  m.upper_bound.resize(static_cast<Index>(sv.size()));
  for (std::size_t k = 0; k < sv.size(); ++k) {
    const auto r = static_cast<Index>(k);
    m.support_vectors.row(r) = features.row(sv[k]);
    m.dual_coef[r] = enc.y[sv[k]] * sol.alpha[sv[k]];
    m.upper_bound[r] = bound[sv[k]];
  }
  return m;
}

MatrixXd rows_of(const MatrixXd& m, const std::vector<Index>& idx) {
  MatrixXd out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Index>(r)) = m.row(idx[r]);
  return out;
}

}  // namespace

void SvmConfig::validate() const {
  if (!(C > 0) || !(gamma > 0)) throw Error("SVM C and gamma must be positive");
  for (const auto& [label, w] : class_weights)
    if (!(w > 0)) throw Error("class weight of label " + std::to_string(label) + " must be positive");
  if (!(tolerance > 0)) throw Error("SVM tolerance must be positive");
}

std::map<int, double> balanced_weights(std::span<const int> labels) {
  std::map<int, Index> counts;
  for (int y : labels) ++counts[y];
  std::map<int, double> w;
  for (const auto& [label, count] : counts)
    w[label] = static_cast<double>(labels.size()) / (2.0 * static_cast<double>(count));
  return w;
}

double rbf_kernel(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b, double gamma) {
  return std::exp(-gamma * (a - b).squaredNorm());
}

VectorXd SvmModel::decision_values(const MatrixXd& features) const {
  if (features.cols() != dim())
    throw Error("SVM input has dimension " + std::to_string(features.cols()) + ", the model expects " +
                std::to_string(dim()));
  VectorXd out(features.rows());
  for (Index r = 0; r < features.rows(); ++r) {
    double v = bias;
    for (Index s = 0; s < support_vectors.rows(); ++s)
      v += dual_coef[s] * std::exp(-gamma * (features.row(r) - support_vectors.row(s)).squaredNorm());
    out[r] = v;
  }
  return out;
}

std::vector<int> SvmModel::predict(const MatrixXd& features) const {
  const VectorXd d = decision_values(features);
  std::vector<int> out(static_cast<std::size_t>(d.size()));
  for (Index i = 0; i < d.size(); ++i) out[static_cast<std::size_t>(i)] = d[i] > 0 ? positive_label : negative_label;
  return out;
}

SvmModel train(const MatrixXd& features, std::span<const int> labels, const SvmConfig& config) {
  config.validate();
  if (static_cast<Index>(labels.size()) != features.rows())
    throw Error("SVM: " + std::to_string(labels.size()) + " labels for " + std::to_string(features.rows()) + " rows");
  if (!features.allFinite()) throw Error("SVM features contain non-finite values");
  const MatrixXd kernel = (-config.gamma * squared_distances(features)).array().exp().matrix();
  return fit_kernel(features, labels, kernel, config);
}

Grid Grid::default_grid() {
  Grid g;
  g.C = {0.1, 1, 10, 100};
  for (int i = 0; i < 8; ++i) g.gamma.push_back(std::pow(10.0, -4.0 + 4.0 * i / 7.0));
  return g;
}

std::vector<int> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed) {
  if (folds < 2) throw Error("cross-validation needs at least 2 folds");
  std::map<int, std::vector<Index>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<Index>(i));
  for (const auto& [label, members] : by_class)
    if (static_cast<int>(members.size()) < folds)
      throw Error("class " + std::to_string(label) + " has " + std::to_string(members.size()) +
                  " samples, fewer than the " + std::to_string(folds) + " folds");
  Rng rng(seed);
  std::vector<int> fold_of(labels.size(), -1);
  int next = 0;
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (Index i : members) {
      fold_of[static_cast<std::size_t>(i)] = next;
      next = (next + 1) % folds;
    }
  }
  return fold_of;
}

GridSearchResult grid_search_cv(const MatrixXd& features, std::span<const int> labels, const Grid& grid, int folds,
                                std::uint64_t seed, int jobs) {
  if (grid.C.empty() || grid.gamma.empty()) throw Error("grid search needs at least one C and one gamma");
  if (static_cast<Index>(labels.size()) != features.rows()) throw Error("grid search: label count mismatch");
  encode_labels(labels);
  GridSearchResult result;
  result.fold_of = stratified_folds(labels, folds, seed);

  std::vector<std::vector<Index>> train_idx(static_cast<std::size_t>(folds)), val_idx(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (int f = 0; f < folds; ++f)
      (result.fold_of[i] == f ? val_idx : train_idx)[static_cast<std::size_t>(f)].push_back(static_cast<Index>(i));

  const MatrixXd d2 = squared_distances(features);
  for (double c : grid.C)
    for (double g : grid.gamma) result.cells.push_back({c, g, 0, {}});

  auto evaluate = [&](GridCell& cell) {
    SvmConfig cfg;
    cfg.C = cell.C;
    cfg.gamma = cell.gamma;
    cfg.validate();
    for (int f = 0; f < folds; ++f) {
      const auto& tr = train_idx[static_cast<std::size_t>(f)];
      const auto& va = val_idx[static_cast<std::size_t>(f)];
      MatrixXd k(static_cast<Index>(tr.size()), static_cast<Index>(tr.size()));
      for (std::size_t a = 0; a < tr.size(); ++a)
        for (std::size_t b = 0; b < tr.size(); ++b)
          k(static_cast<Index>(a), static_cast<Index>(b)) = std::exp(-cell.gamma * d2(tr[a], tr[b]));
      std::vector<int> ytr, yva;
      for (Index i : tr) ytr.push_back(labels[static_cast<std::size_t>(i)]);
      for (Index i : va) yva.push_back(labels[static_cast<std::size_t>(i)]);
      const SvmModel m = fit_kernel(rows_of(features, tr), ytr, k, cfg);
      cell.fold_uar.push_back(eval::uar(m.predict(rows_of(features, va)), yva));
    }
    cell.mean_uar = std::accumulate(cell.fold_uar.begin(), cell.fold_uar.end(), 0.0) / folds;
  };

  const auto workers = static_cast<std::size_t>(std::clamp(jobs, 1, static_cast<int>(result.cells.size())));
  if (workers == 1) {
    for (auto& cell : result.cells) evaluate(cell);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c; (c = next++) < result.cells.size();) evaluate(result.cells[c]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  // Ties go to the smaller C, then the smaller gamma.
  std::vector<std::size_t> order(result.cells.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = result.cells[a];
    const auto& y = result.cells[b];
    return std::tie(x.C, x.gamma) < std::tie(y.C, y.gamma);
  });
  result.best = order.front();
  for (std::size_t c : order)
    if (result.cells[c].mean_uar > result.cells[result.best].mean_uar) result.best = c;

  SvmConfig best;
  best.C = result.cells[result.best].C;
  best.gamma = result.cells[result.best].gamma;
  const MatrixXd kernel = (-best.gamma * d2).array().exp().matrix();
  result.model = fit_kernel(features, labels, kernel, best);
  return result;
}

}  // namespace ser::svm
