#include "ser/mal.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>
#include <set>

namespace ser::mal {

// --- embedder ------------------------------------------------------------------

EmbedderResult train_embedder(const FeatureTable& features, std::uint64_t seed, const EmbedderConfig& config) {
  features.validate();
  const Index n = features.rows();
  if (n < 10) throw Error("autoencoder training needs at least 10 samples, got " + std::to_string(n));
  if (config.encoder_units.empty() || config.encoder_units.back() < 1) throw Error("invalid encoder layout");
  const RowMatrixXd centered = features.matrix.rowwise() - features.matrix.colwise().mean();
  if (centered.cwiseAbs().maxCoeff() == 0) throw Error("autoencoder input features are constant");

  Rng rng(derive_seed(seed, "embedder-split"));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const Index n_val = std::clamp<Index>(static_cast<Index>(std::llround(config.validation_fraction * n)), 1, n - 1);

  const MatrixXd x = features.matrix.transpose();
  nn::Dataset all{x, x};
  const nn::Dataset validation = all.subset({order.begin(), order.begin() + n_val});
  const nn::Dataset train = all.subset({order.begin() + n_val, order.end()});

  std::vector<nn::LayerSpec> specs;
  std::size_t layer = 0;
  for (int units : config.encoder_units)
    specs.push_back({units, nn::Activation::elu, layer++ < 2 ? config.dropout : 0.0, false});
  for (int units : config.decoder_units)
    specs.push_back({units, nn::Activation::elu, layer++ < 2 ? config.dropout : 0.0, false});
  specs.push_back({static_cast<int>(features.dim()), nn::Activation::linear, 0.0, false});

  nn::Mlp autoencoder(static_cast<int>(features.dim()), specs, derive_seed(seed, "embedder-init"));
  nn::TrainConfig tc;
  tc.batch_size = static_cast<int>(std::min<Index>(config.batch_size, train.size()));
  tc.patience = config.patience;
  tc.max_epochs = config.max_epochs;
  tc.seed = derive_seed(seed, "embedder-train");
  tc.loss = nn::LossKind::mse;
  tc.monitor = nn::MonitorKind::loss;
  nn::OptimizerConfig oc;
  oc.kind = nn::OptimizerKind::adam;
  oc.learning_rate = config.learning_rate;

  nn::TrainResult trained = nn::train_early_stopping(std::move(autoencoder), oc, train, validation, tc);
  EmbedderResult result;
  result.autoencoder = trained.model;
  result.encoder = trained.model.slice(0, config.encoder_units.size());
  result.best_epoch = trained.best_epoch;
  result.initial_validation_mse = trained.monitor_history.front();
  result.best_validation_mse = trained.best_monitor;
  result.validation_history = std::move(trained.monitor_history);
  return result;
}

FeatureTable encode(const nn::Mlp& encoder, const FeatureTable& features) {
  features.validate();
  if (features.dim() != encoder.input_dim()) throw Error("feature dimension does not match the encoder input");
  FeatureTable out;
  out.utterance_ids = features.utterance_ids;
  out.matrix = nn::predict(encoder, features.matrix.transpose()).transpose();
  out.kind = FeatureKind::embedding;
  out.normalization = Normalization::raw;
  return out;
}

// --- distances -------------------------------------------------------------------

DistanceMatrix::DistanceMatrix(Index n) : n_(n), packed_(static_cast<std::size_t>(n * (n - 1) / 2), 0.0f) {}

void DistanceMatrix::set(Index i, Index j, double value) {
  if (i == j) return;
  if (i > j) std::swap(i, j);
  packed_[static_cast<std::size_t>(offset(i) + (j - i - 1))] = static_cast<float>(value);
}

DistanceMatrix DistanceMatrix::from_dense(const MatrixXd& dense) {
  if (dense.rows() != dense.cols()) throw Error("distance matrix must be square");
  DistanceMatrix d(dense.rows());
  for (Index i = 0; i < dense.rows(); ++i)
    for (Index j = i + 1; j < dense.cols(); ++j) d.set(i, j, dense(i, j));
  return d;
}

MatrixXd DistanceMatrix::to_dense() const {
  MatrixXd m(n_, n_);
  for (Index i = 0; i < n_; ++i)
    for (Index j = 0; j < n_; ++j) m(i, j) = (*this)(i, j);
  return m;
}

DistanceMatrix pearson_distance_matrix(const MatrixXd& rows) {
  const Index n = rows.rows();
  if (rows.cols() < 2) throw Error("pearson distances need vectors of length at least 2");
  MatrixXd z = rows.colwise() - rows.rowwise().mean();
  std::vector<bool> constant(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const double norm = z.row(i).norm();
    constant[static_cast<std::size_t>(i)] = norm == 0;
    if (norm > 0) z.row(i) /= norm;
  }
  DistanceMatrix d(n);
  constexpr Index kBlock = 512;
  for (Index start = 0; start < n; start += kBlock) {
    const Index len = std::min(kBlock, n - start);
    const MatrixXd r = z.middleRows(start, len) * z.middleRows(start, n - start).transpose();
    for (Index a = 0; a < len; ++a) {
      const Index i = start + a;
      for (Index j = i + 1; j < n; ++j) {
        const bool flat = constant[static_cast<std::size_t>(i)] || constant[static_cast<std::size_t>(j)];
        const double corr = flat ? 0.0 : std::clamp(r(a, j - start), -1.0, 1.0);
        d.set(i, j, 1.0 - corr);
      }
    }
  }
  return d;
}

// --- farthest-first ----------------------------------------------------------------

std::vector<Index> farthest_first(const DistanceMatrix& distances, Index k, std::uint64_t seed) {
  const Index n = distances.size();
  if (k < 1) throw Error("farthest-first needs k >= 1");
  if (k > n) throw Error("farthest-first: k = " + std::to_string(k) + " exceeds N = " + std::to_string(n));
  Rng rng(seed);
  std::uniform_int_distribution<Index> pick(0, n - 1);
  std::vector<Index> chosen{pick(rng)};
  std::vector<bool> in_set(static_cast<std::size_t>(n), false);
  in_set[static_cast<std::size_t>(chosen[0])] = true;
  VectorXd to_set(n);
  for (Index i = 0; i < n; ++i) to_set[i] = distances(i, chosen[0]);
  while (static_cast<Index>(chosen.size()) < k) {
    Index best = -1;
    for (Index i = 0; i < n; ++i) {
      if (in_set[static_cast<std::size_t>(i)]) continue;
      if (best < 0 || to_set[i] > to_set[best]) best = i;
    }
    chosen.push_back(best);
    in_set[static_cast<std::size_t>(best)] = true;
    for (Index i = 0; i < n; ++i) to_set[i] = std::min(to_set[i], distances(i, best));
  }
  return chosen;
}

// --- k-medoids ---------------------------------------------------------------------

std::vector<Index> Clustering::cluster_sizes() const {
  std::vector<Index> sizes(static_cast<std::size_t>(k), 0);
  for (Index c : assignment) ++sizes[static_cast<std::size_t>(c)];
  return sizes;
}

std::vector<Index> assign_to_medoids(const DistanceMatrix& distances, std::span<const Index> medoids) {
  const Index n = distances.size();
  std::vector<Index> assignment(static_cast<std::size_t>(n), -1);
  for (std::size_t c = 0; c < medoids.size(); ++c) assignment[static_cast<std::size_t>(medoids[c])] = static_cast<Index>(c);
  for (Index i = 0; i < n; ++i) {
    if (assignment[static_cast<std::size_t>(i)] >= 0) continue;
    Index best = -1;
    double best_d = 0;
    for (std::size_t c = 0; c < medoids.size(); ++c) {
      const double d = distances(i, medoids[c]);
      if (best < 0 || d < best_d || (d == best_d && medoids[c] < medoids[static_cast<std::size_t>(best)])) {
        best = static_cast<Index>(c);
        best_d = d;
      }
    }
    assignment[static_cast<std::size_t>(i)] = best;
  }
  return assignment;
}

double clustering_cost(const DistanceMatrix& distances, std::span<const Index> medoids) {
  double cost = 0;
  for (Index i = 0; i < distances.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Index m : medoids) best = std::min(best, distances(i, m));
    cost += best;
  }
  return cost;
}

namespace {

double assigned_cost(const DistanceMatrix& d, std::span<const Index> medoids, const std::vector<Index>& assignment) {
  double cost = 0;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    cost += d(static_cast<Index>(i), medoids[static_cast<std::size_t>(assignment[i])]);
  return cost;
}

// Best single medoid/non-medoid exchange. Returns false when no exchange
// lowers the cost.
bool best_swap(const DistanceMatrix& d, std::vector<Index>& medoids) {
  const Index n = d.size();
  const auto k = static_cast<Index>(medoids.size());
  if (k == n) return false;
  std::vector<Index> nearest(static_cast<std::size_t>(n));
  VectorXd near(n), second(n);
  for (Index i = 0; i < n; ++i) {
    double d1 = std::numeric_limits<double>::infinity(), d2 = d1;
    Index c1 = -1;
    for (Index c = 0; c < k; ++c) {
      const double v = d(i, medoids[static_cast<std::size_t>(c)]);
      if (v < d1) {
        d2 = d1;
        d1 = v;
        c1 = c;
      } else if (v < d2) {
        d2 = v;
      }
    }
    nearest[static_cast<std::size_t>(i)] = c1;
    near[i] = d1;
    second[i] = k > 1 ? d2 : std::numeric_limits<double>::infinity();
  }
  std::vector<bool> is_medoid(static_cast<std::size_t>(n), false);
  for (Index m : medoids) is_medoid[static_cast<std::size_t>(m)] = true;

  double best_delta = 0;
  Index best_h = -1, best_c = -1;
  VectorXd delta(k);
  for (Index h = 0; h < n; ++h) {
    if (is_medoid[static_cast<std::size_t>(h)]) continue;
    double common = 0;
    delta.setZero();
    for (Index i = 0; i < n; ++i) {
      const double dih = d(i, h);
      if (dih < near[i]) {
        common += dih - near[i];
      } else {
        delta[nearest[static_cast<std::size_t>(i)]] += std::min(dih, second[i]) - near[i];
      }
    }
    for (Index c = 0; c < k; ++c) {
      const double total = common + delta[c];
      if (total < best_delta - 1e-12) {
        best_delta = total;
        best_h = h;
        best_c = c;
      }
    }
  }
  if (best_h < 0) return false;
  medoids[static_cast<std::size_t>(best_c)] = best_h;
  return true;
}

}  // namespace

Clustering k_medoids(const DistanceMatrix& distances, std::span<const Index> initial_medoids,
                     const KMedoidsOptions& options) {
  const Index n = distances.size();
  if (initial_medoids.empty()) throw Error("k-medoids needs at least one initial medoid");
  std::set<Index> unique;
  for (Index m : initial_medoids) {
    if (m < 0 || m >= n) throw Error("k-medoids: initial medoid " + std::to_string(m) + " out of range");
    if (!unique.insert(m).second) throw Error("k-medoids: duplicate initial medoid " + std::to_string(m));
  }

  Clustering c;
  c.k = static_cast<Index>(initial_medoids.size());
  c.medoids.assign(initial_medoids.begin(), initial_medoids.end());
  c.assignment = assign_to_medoids(distances, c.medoids);
  c.cost = assigned_cost(distances, c.medoids, c.assignment);
  c.cost_history.push_back(c.cost);

  for (int iter = 0; iter < options.max_iterations; ++iter) {
    bool changed = false;
    std::vector<std::vector<Index>> members(static_cast<std::size_t>(c.k));
    for (Index i = 0; i < n; ++i) members[static_cast<std::size_t>(c.assignment[static_cast<std::size_t>(i)])].push_back(i);
    for (Index cl = 0; cl < c.k; ++cl) {
      const auto& group = members[static_cast<std::size_t>(cl)];
      auto total = [&](Index candidate) {
        double s = 0;
        for (Index j : group) s += distances(candidate, j);
        return s;
      };
      Index best = c.medoids[static_cast<std::size_t>(cl)];
      double best_sum = total(best);
      for (Index candidate : group) {
        const double s = total(candidate);
        if (s < best_sum) {
          best_sum = s;
          best = candidate;
        }
      }
      if (best != c.medoids[static_cast<std::size_t>(cl)]) {
        c.medoids[static_cast<std::size_t>(cl)] = best;
        changed = true;
      }
    }
    c.iterations = iter + 1;
    if (!changed) break;
    c.assignment = assign_to_medoids(distances, c.medoids);
    c.cost = assigned_cost(distances, c.medoids, c.assignment);
    c.cost_history.push_back(c.cost);
  }

  if (options.swap_refinement) {
    for (int s = 0; s < options.max_swaps && best_swap(distances, c.medoids); ++s) {
      c.assignment = assign_to_medoids(distances, c.medoids);
      c.cost = assigned_cost(distances, c.medoids, c.assignment);
      c.cost_history.push_back(c.cost);
    }
  }
  return c;
}

Index choose_k(Index n) {
  if (n < 1) throw Error("choose_k needs N >= 1");
  return std::max<Index>(1, n / 3);
}

// --- queue and labels ------------------------------------------------------------

AnnotationQueue build_queue(const Clustering& clustering, std::span<const Utterance> rows) {
  if (static_cast<std::size_t>(clustering.assignment.size()) != rows.size())
    throw Error("clustering covers " + std::to_string(clustering.assignment.size()) + " samples but " +
                std::to_string(rows.size()) + " utterances were given");
  const auto sizes = clustering.cluster_sizes();
  std::vector<Index> order(static_cast<std::size_t>(clustering.k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return sizes[static_cast<std::size_t>(a)] > sizes[static_cast<std::size_t>(b)];
  });
  AnnotationQueue queue;
  for (Index cl : order) {
    const auto& u = rows[static_cast<std::size_t>(clustering.medoids[static_cast<std::size_t>(cl)])];
    queue.push_back({static_cast<Index>(queue.size()) + 1, cl, sizes[static_cast<std::size_t>(cl)], u.id,
                     u.audio_ref, u.group_id});
  }
  return queue;
}

std::string to_string(LabelMode mode) { return mode == LabelMode::cluster_labels ? "cluster" : "medoid"; }

LabelMode parse_label_mode(const std::string& s) {
  if (s == "cluster" || s == "cluster_labels") return LabelMode::cluster_labels;
  if (s == "medoid" || s == "medoid_labels") return LabelMode::medoid_labels;
  throw Error("unknown label mode '" + s + "'");
}

std::vector<LabeledSample> materialize_labels(const Clustering& clustering, std::span<const Utterance> rows,
                                              const std::map<std::string, std::optional<VALabel>>& medoid_labels,
                                              LabelMode mode) {
  if (clustering.assignment.size() != rows.size()) throw Error("clustering and utterance rows differ in size");
  std::map<std::string, Index> medoid_cluster;
  for (Index cl = 0; cl < clustering.k; ++cl)
    medoid_cluster[rows[static_cast<std::size_t>(clustering.medoids[static_cast<std::size_t>(cl)])].id] = cl;
  for (const auto& [id, label] : medoid_labels)
    if (!medoid_cluster.count(id)) throw Error("annotation for '" + id + "', which is not a queued medoid");

  std::vector<std::optional<VALabel>> cluster_label(static_cast<std::size_t>(clustering.k));
  for (const auto& [id, label] : medoid_labels) cluster_label[static_cast<std::size_t>(medoid_cluster.at(id))] = label;

  std::vector<LabeledSample> out;
  if (mode == LabelMode::medoid_labels) {
    for (Index cl = 0; cl < clustering.k; ++cl) {
      const auto& label = cluster_label[static_cast<std::size_t>(cl)];
      if (!label) continue;
      const Index row = clustering.medoids[static_cast<std::size_t>(cl)];
      out.push_back({row, rows[static_cast<std::size_t>(row)].id, *label});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.row < b.row; });
  } else {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& label = cluster_label[static_cast<std::size_t>(clustering.assignment[i])];
      if (label) out.push_back({static_cast<Index>(i), rows[i].id, *label});
    }
  }
  return out;
}

MalResult mal_per_group(std::span<const Utterance> rows, const MatrixXd& embedding, std::uint64_t seed,
                        const KMedoidsOptions& options) {
  if (static_cast<Index>(rows.size()) != embedding.rows())
    throw Error("embedding has " + std::to_string(embedding.rows()) + " rows for " + std::to_string(rows.size()) +
                " utterances");
  std::map<std::string, std::vector<Index>> groups;
  for (std::size_t i = 0; i < rows.size(); ++i) groups[rows[i].group_id].push_back(static_cast<Index>(i));

  MalResult result;
  result.clustering.assignment.assign(rows.size(), -1);
  for (auto& [group, members] : groups) {
    std::sort(members.begin(), members.end(), [&](Index a, Index b) {
      return rows[static_cast<std::size_t>(a)].id < rows[static_cast<std::size_t>(b)].id;
    });
    const auto n = static_cast<Index>(members.size());
    if (n < 3)
      std::clog << "[mal] warning: group '" << group << "' has only " << n << " samples, using k = 1\n";
    MatrixXd local(n, embedding.cols());
    std::vector<Utterance> local_rows;
    for (Index a = 0; a < n; ++a) {
      local.row(a) = embedding.row(members[static_cast<std::size_t>(a)]);
      local_rows.push_back(rows[static_cast<std::size_t>(members[static_cast<std::size_t>(a)])]);
    }
    const DistanceMatrix d = pearson_distance_matrix(local);
    const Index k = choose_k(n);
    const auto init = farthest_first(d, k, derive_seed(seed, "mal-group:" + group));
    const Clustering c = k_medoids(d, init, options);

    const Index offset = result.clustering.k;
    for (Index m : c.medoids) result.clustering.medoids.push_back(members[static_cast<std::size_t>(m)]);
    for (Index a = 0; a < n; ++a)
      result.clustering.assignment[static_cast<std::size_t>(members[static_cast<std::size_t>(a)])] =
          offset + c.assignment[static_cast<std::size_t>(a)];
    result.clustering.k += c.k;
    result.clustering.cost += c.cost;
    result.clustering.iterations = std::max(result.clustering.iterations, c.iterations);

    for (QueueEntry e : build_queue(c, local_rows)) {
      e.cluster_id += offset;
      e.rank = static_cast<Index>(result.queue.size()) + 1;
      result.queue.push_back(std::move(e));
    }
    result.groups.push_back(group);
  }
  return result;
}

}  // namespace ser::mal
