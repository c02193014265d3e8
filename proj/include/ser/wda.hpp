#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ser/nn.hpp"

// Two-stage Wasserstein domain adaptation. Feature matrices are row-per-sample
// (N x D); labels are class indices 0/1.

namespace ser::wda {

inline constexpr int kSharedDim = 256;

struct SourceConfig {
  std::vector<int> extractor_units = {512, 512, kSharedDim};
  double extractor_dropout = 0.4;
  std::vector<int> classifier_units = {256, 256};
  double classifier_dropout = 0.3;
  double learning_rate = 1e-4;
  int batch_size = 256;
  int patience = 100;
  int max_epochs = 2000;
  double test_fraction = 0.15;
};

struct SourceModel {
  nn::Mlp extractor;   // F_S
  nn::Mlp classifier;  // C_L
  Task task = Task::valence;
  int best_epoch = 0;
  double heldout_accuracy = 0;
  std::vector<Index> train_rows;
  std::vector<Index> test_rows;
};

/// Seeded split that keeps the class proportions: about `fraction` of every
/// class goes to the second list. Both lists are sorted.
std::pair<std::vector<Index>, std::vector<Index>> stratified_split(std::span<const int> labels, double fraction,
                                                                   std::uint64_t seed);

/// Supervised stage: F (BN after every layer, LReLU + dropout on the first
/// two) and C_L (LReLU + dropout on the first two, softmax head), trained
/// with cross-entropy and early stopping on held-out accuracy.
SourceModel train_source(const MatrixXd& features, std::span<const int> labels, Task task, std::uint64_t seed,
                         const SourceConfig& config = SourceConfig());

/// 512-512-256-1 critic, ReLU on the first three layers, weights clipped to
/// [-clip, clip] from the start.
nn::Mlp make_critic(int input_dim, std::uint64_t seed, double clip);
void clip_parameters(nn::Mlp& model, double clip);

enum class Variant { unsupervised, semi_supervised };
std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

/// Adaptation learning rates by source setting: 4-to-1 uses 7e-5 (valence)
/// and 6e-5 (arousal); 1-to-1 uses 7e-5 for FESC valence and RAVDESS
/// arousal, 5e-5 otherwise.
double default_adaptation_lr(const std::vector<std::string>& sources, Task task);

struct AdaptationConfig {
  Variant variant = Variant::unsupervised;
  double learning_rate = 5e-5;         // Adam, F_T and C_L
  double critic_learning_rate = 5e-5;  // RMSProp, C_D
  int critic_steps = 5;
  double clip = 0.01;
  int batch_size = 256;
  int max_epochs = 2000;
  int warmup_critic_steps = 100;
  int smoothing_window = 10;
  double saturation_threshold = 1e-3;
  /// End the run once the unsupervised stop has fired.
  bool stop_at_saturation = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MonitorSet {
  MatrixXd features;
  std::vector<int> labels;
};

struct EpochRecord {
  int epoch = 0;
  /// mean C_D(F_T(target)) - mean C_D(F_S(source)) over the full pools; the
  /// critic is trained to make it large, so it estimates W_d.
  double critic_gap = 0;
  double target_term = 0;  // mean C_D(F_T(target))
  std::optional<double> monitor_uar;
};

struct AdaptedModel {
  nn::Mlp extractor;   // F_T
  nn::Mlp classifier;  // C_L
  int epoch = 0;
};

struct StopDecision {
  int epoch = 0;
  bool saturated = false;
};

struct AdaptationResult {
  std::vector<EpochRecord> history;
  AdaptedModel initial;  // epoch 0
  AdaptedModel last;
  AdaptedModel unsupervised;
  StopDecision unsupervised_stop;
  std::optional<AdaptedModel> semi_supervised;  // present when a monitor set was given
  nn::Mlp critic;

  const AdaptedModel& selected(Variant v) const;
};

/// Called after every critic update, with the clipped critic.
using CriticObserver = std::function<void(const nn::Mlp& critic)>;

/// Stage 2. F_S stays fixed; F_T starts as a copy of it. Every generator step
/// is preceded by `critic_steps` RMSProp critic updates on balanced source and
/// target batches. An epoch is one pass over the target pool. F_T and C_L run
/// in eval mode (batch-norm statistics of F_S, no dropout).
AdaptationResult adapt(const SourceModel& source, const MatrixXd& source_features, std::span<const int> source_labels,
                       const MatrixXd& target_features, const AdaptationConfig& config,
                       const MonitorSet* monitor = nullptr, const CriticObserver& observer = {});

/// Critic objective in batch-mean form:
/// mean C_D(F_S(source)) - mean C_D(F_T(target)).
double critic_objective(const nn::Mlp& f_source, const nn::Mlp& f_target, const nn::Mlp& critic,
                        const MatrixXd& source_features, const MatrixXd& target_features);

struct GeneratorStep {
  double adversarial = 0;  // mean C_D(F_T(target batch))
  double label_loss = 0;   // batch-mean cross-entropy of C_L(F_T(source batch))
  nn::Gradients extractor;
  nn::Gradients classifier;
  MatrixXd target_input_gradient;        // of the full objective
  MatrixXd label_term_target_gradient;   // of the label term alone
};

/// Gradients of the generator objective mean C_D(F_T(z)) + L_M(x, y). The
/// batches are feature-major (D x B), as in the network engine.
GeneratorStep generator_gradients(const nn::Mlp& f_target, const nn::Mlp& classifier, const nn::Mlp& critic,
                                  const MatrixXd& source_batch, std::span<const int> source_labels,
                                  const MatrixXd& target_batch);

/// Trailing median of the last `window` target terms; relative change
/// r_e = |m_e - m_{e-1}| / max(|m_{e-1}|, 1e-12). Returns the first epoch of
/// the first run of `window` consecutive epochs with r below `threshold`, or
/// the last epoch with saturated = false.
StopDecision stop_unsupervised(std::span<const double> target_terms, int window = 10, double threshold = 1e-3);

/// Epoch of the highest monitor UAR, earliest on ties.
int stop_semisupervised(std::span<const double> monitor_uars);

std::vector<int> predict_target(const nn::Mlp& extractor, const nn::Mlp& classifier, const MatrixXd& features);
std::vector<int> predict_target(const AdaptedModel& model, const MatrixXd& features);

}  // namespace ser::wda
