#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ser/corpus.hpp"
#include "ser/features.hpp"
#include "ser/nn.hpp"

// Medoid-based active learning: autoencoder embedding, Pearson distances,
// farthest-first seeded k-medoids, and the annotation queue.

namespace ser::mal {

inline constexpr int kEmbeddingDim = 32;

struct EmbedderConfig {
  std::vector<int> encoder_units = {512, 512, kEmbeddingDim};
  std::vector<int> decoder_units = {512, 512};
  double dropout = 0.1;  // applied to the first two layers
  double learning_rate = 1e-4;
  int batch_size = 1024;
  int patience = 300;
  int max_epochs = 10000;
  double validation_fraction = 0.2;
};

struct EmbedderResult {
  nn::Mlp encoder;
  nn::Mlp autoencoder;
  int best_epoch = 0;
  double initial_validation_mse = 0;
  double best_validation_mse = 0;
  std::vector<double> validation_history;
};

/// Trains the ELU autoencoder on a random utterance-level split and returns
/// the encoder of the best-validation model.
EmbedderResult train_embedder(const FeatureTable& features, std::uint64_t seed,
                              const EmbedderConfig& config = EmbedderConfig());

/// N x 32 bottleneck features, kind = embedding.
FeatureTable encode(const nn::Mlp& encoder, const FeatureTable& features);

/// 1 - r(a, b); r is taken as 0 when either vector is constant.
template <typename A, typename B>
double pearson_distance(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != b.size()) throw Error("pearson distance: vectors differ in length");
  if (a.size() < 2) throw Error("pearson distance: vectors need at least 2 entries");
  const VectorXd ca = a.derived().reshaped().array() - a.derived().mean();
  const VectorXd cb = b.derived().reshaped().array() - b.derived().mean();
  const double na = ca.norm(), nb = cb.norm();
  if (na == 0 || nb == 0) return 1.0;
  const double r = std::clamp(ca.dot(cb) / (na * nb), -1.0, 1.0);
  return 1.0 - r;
}

/// Symmetric N x N distances with zero diagonal, stored as a packed float32
/// upper triangle.
class DistanceMatrix {
public:
  DistanceMatrix() = default;
  explicit DistanceMatrix(Index n);

  /// Takes the upper triangle of a dense matrix; the diagonal is forced to 0.
  static DistanceMatrix from_dense(const MatrixXd& dense);

  Index size() const { return n_; }
  double operator()(Index i, Index j) const {
    if (i == j) return 0.0;
    if (i > j) std::swap(i, j);
    return packed_[static_cast<std::size_t>(offset(i) + (j - i - 1))];
  }
  void set(Index i, Index j, double value);
  MatrixXd to_dense() const;

private:
  Index offset(Index i) const { return i * (2 * n_ - i - 1) / 2; }
  Index n_ = 0;
  std::vector<float> packed_;
};

/// Pairwise Pearson distances between the rows of `rows`.
DistanceMatrix pearson_distance_matrix(const MatrixXd& rows);

/// Greedy maximin seeding. The first index is drawn uniformly from the seed;
/// each next one maximizes the distance to the chosen set (ties to the
/// lowest index).
std::vector<Index> farthest_first(const DistanceMatrix& distances, Index k, std::uint64_t seed);

struct Clustering {
  Index k = 0;
  std::vector<Index> medoids;     // cluster id -> sample index
  std::vector<Index> assignment;  // sample index -> cluster id
  double cost = 0;
  int iterations = 0;
  std::vector<double> cost_history;  // initial assignment first

  std::vector<Index> cluster_sizes() const;
};

struct KMedoidsOptions {
  int max_iterations = 300;
  /// After the alternating phase converges, apply best-improvement
  /// medoid/non-medoid swaps until none lowers the cost.
  bool swap_refinement = true;
  int max_swaps = 1000;
};

/// Total distance of every sample to its nearest medoid.
double clustering_cost(const DistanceMatrix& distances, std::span<const Index> medoids);

/// Nearest-medoid assignment; medoids keep their own cluster and remaining
/// ties go to the medoid with the lowest sample index.
std::vector<Index> assign_to_medoids(const DistanceMatrix& distances, std::span<const Index> medoids);

/// Alternating assignment / in-cluster medoid update until the medoids stop
/// changing, then swap refinement. Cost never increases.
Clustering k_medoids(const DistanceMatrix& distances, std::span<const Index> initial_medoids,
                     const KMedoidsOptions& options = KMedoidsOptions());

/// max(1, floor(N / 3)).
Index choose_k(Index n);

struct QueueEntry {
  Index rank = 0;  // 1-based
  Index cluster_id = 0;
  Index cluster_size = 0;
  std::string utterance_id;
  std::string audio_path;
  std::string group_id;
};

using AnnotationQueue = std::vector<QueueEntry>;

/// One entry per cluster, largest first, ties by cluster id. `rows` maps
/// sample index to utterance.
AnnotationQueue build_queue(const Clustering& clustering, std::span<const Utterance> rows);

enum class LabelMode { cluster_labels, medoid_labels };
std::string to_string(LabelMode mode);
LabelMode parse_label_mode(const std::string& s);

struct LabeledSample {
  Index row = 0;
  std::string utterance_id;
  VALabel label;
};

/// Training labels from annotated medoids. `medoid_labels` maps a medoid
/// utterance id to its label, or nullopt when it was judged erroneous.
/// Clusters whose medoid is erroneous or unlabeled contribute nothing.
std::vector<LabeledSample> materialize_labels(const Clustering& clustering, std::span<const Utterance> rows,
                                              const std::map<std::string, std::optional<VALabel>>& medoid_labels,
                                              LabelMode mode);

struct MalResult {
  /// Global view: indices refer to the `rows` passed to mal_per_group,
  /// cluster ids are numbered group after group.
  Clustering clustering;
  AnnotationQueue queue;
  std::vector<std::string> groups;  // processing order
};

/// Runs choose_k, farthest_first and k_medoids separately for every group
/// (groups sorted by id; rows inside a group sorted by utterance id; the
/// seed of each group derived from its id) and concatenates the queues.
MalResult mal_per_group(std::span<const Utterance> rows, const MatrixXd& embedding, std::uint64_t seed,
                        const KMedoidsOptions& options = KMedoidsOptions());

}  // namespace ser::mal
