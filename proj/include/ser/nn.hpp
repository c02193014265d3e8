#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "ser/common.hpp"

// Small feed-forward network engine. Activations are stored feature-major:
// a batch is a (features x batch) matrix, one column per sample.

namespace ser::nn {

enum class Activation : std::uint8_t { elu, lrelu, relu, linear, softmax };
enum class Mode { train, eval };

inline constexpr double kEluAlpha = 1.0;
inline constexpr double kLeakySlope = 0.01;
inline constexpr double kBatchNormMomentum = 0.9;
inline constexpr double kBatchNormEpsilon = 1e-5;

std::string to_string(Activation a);

struct LayerSpec {
  int units = 0;
  Activation activation = Activation::linear;
  double dropout = 0.0;
  bool batch_norm = false;

  bool operator==(const LayerSpec&) const = default;
};

/// Dense layer followed by optional batch norm, the activation, then
/// optional inverted dropout.
struct DenseLayer {
  LayerSpec spec;
  MatrixXd weight;  // units x fan_in
  VectorXd bias;
  VectorXd gamma;  // batch-norm scale/shift and running statistics;
  VectorXd beta;   // empty when spec.batch_norm is false
  VectorXd running_mean;
  VectorXd running_var;
};

class Mlp {
public:
  Mlp() = default;
  /// Kaiming-uniform (fan-in) weights for relu/lrelu layers, Xavier-uniform
  /// otherwise; zero biases; unit batch-norm scale.
  Mlp(int input_dim, const std::vector<LayerSpec>& specs, std::uint64_t seed);

  int input_dim() const { return input_dim_; }
  int output_dim() const;
  std::size_t num_layers() const { return layers_.size(); }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  std::vector<LayerSpec> specs() const;

  /// Layers [first, last) as an independent network.
  Mlp slice(std::size_t first, std::size_t last) const;
  /// `bottom` followed by `top`.
  static Mlp stack(const Mlp& bottom, const Mlp& top);

  Index parameter_count() const;

  /// Throws if the layer dimensions do not chain or a parameter is non-finite.
  void validate() const;

private:
  friend Mlp make_mlp(int input_dim, std::vector<DenseLayer> layers);
  int input_dim_ = 0;
  std::vector<DenseLayer> layers_;
};

Mlp make_mlp(int input_dim, std::vector<DenseLayer> layers);

/// Trainable parameters in a fixed order: per layer weight (column-major),
/// bias, gamma, beta. Running statistics are not included.
VectorXd flatten_parameters(const Mlp& model);
void assign_parameters(Mlp& model, const VectorXd& flat);

struct LayerCache {
  MatrixXd input;
  MatrixXd normalized;  // batch-norm x-hat (train) or standardized input (eval)
  MatrixXd pre_activation;
  MatrixXd output;
  MatrixXd mask;  // inverted-dropout mask, empty when unused
  VectorXd batch_mean;
  VectorXd batch_var;
  VectorXd inv_std;
};

struct ForwardPass {
  Mode mode = Mode::eval;
  std::vector<LayerCache> layers;
  MatrixXd output;
};

/// Train mode samples dropout masks from `rng` (required when any layer has
/// dropout) and normalizes with batch statistics; eval mode uses running
/// statistics and no dropout.
ForwardPass forward(const Mlp& model, const MatrixXd& inputs, Mode mode, Rng* rng = nullptr);

/// Eval-mode output.
MatrixXd predict(const Mlp& model, const MatrixXd& inputs);

/// Folds the batch statistics of a train-mode pass into the running ones.
void update_running_stats(Mlp& model, const ForwardPass& pass);

struct LayerGradients {
  MatrixXd weight;
  VectorXd bias;
  VectorXd gamma;
  VectorXd beta;
};

struct Gradients {
  std::vector<LayerGradients> layers;
  MatrixXd input;  // d loss / d inputs

  VectorXd flatten() const;
  bool all_finite() const;
};

Gradients backward(const Mlp& model, const ForwardPass& pass, const MatrixXd& output_grad);

// --- losses -----------------------------------------------------------------

enum class LossKind { mse, cross_entropy, wgan_critic, wgan_generator };

struct Loss {
  double value = 0;
  MatrixXd gradient;  // d value / d output
};

/// Mean squared error over all entries.
Loss mse_loss(const MatrixXd& prediction, const MatrixXd& target);

/// -sum(y^T log10 p) over the batch, with p clamped at 1e-12.
Loss cross_entropy_loss(const MatrixXd& probabilities, const MatrixXd& onehot);

/// Critic objective on a 1 x B score row where `domain` holds +1 for
/// source and -1 for target columns: mean(source) - mean(target).
Loss wgan_critic_loss(const MatrixXd& scores, const MatrixXd& domain);

/// Generator objective: mean critic score of the (target) batch.
Loss wgan_generator_loss(const MatrixXd& scores);

Loss compute_loss(LossKind kind, const MatrixXd& output, const MatrixXd& target);

// --- optimizers ---------------------------------------------------------------

enum class OptimizerKind : std::uint8_t { adam, rmsprop };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double rms_decay = 0.9;
  double epsilon = 1e-8;
};

class Optimizer {
public:
  Optimizer() = default;
  Optimizer(const OptimizerConfig& config, const Mlp& model);

  /// One update. Throws on non-finite gradients, leaving the model untouched.
  void step(Mlp& model, const Gradients& gradients);

  const OptimizerConfig& config() const { return config_; }
  OptimizerConfig& config() { return config_; }
  std::uint64_t steps() const { return steps_; }
  const VectorXd& first_moment() const { return first_; }
  const VectorXd& second_moment() const { return second_; }

  static Optimizer restore(const OptimizerConfig& config, std::uint64_t steps, VectorXd first, VectorXd second);

private:
  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
  VectorXd first_;   // adam m
  VectorXd second_;  // adam v / rmsprop running square
};

// --- training -------------------------------------------------------------

/// Column-per-sample inputs and targets.
struct Dataset {
  MatrixXd inputs;
  MatrixXd targets;

  Index size() const { return inputs.cols(); }
  Dataset subset(const std::vector<Index>& columns) const;
};

enum class MonitorKind { loss, accuracy };

struct TrainConfig {
  int batch_size = 256;
  int patience = 100;
  int max_epochs = 10000;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::mse;
  MonitorKind monitor = MonitorKind::loss;

  void validate() const;
};

struct TrainResult {
  Mlp model;       // parameters of the best monitored epoch
  int best_epoch = 0;
  double best_monitor = 0;
  int epochs_run = 0;
  /// Entry 0 is the untrained model; entry e follows e passes.
  std::vector<double> monitor_history;
  std::vector<double> train_loss_history;
};

double evaluate_loss(const Mlp& model, const Dataset& data, LossKind loss);
/// Fraction of columns whose output argmax equals the target argmax.
double evaluate_accuracy(const Mlp& model, const Dataset& data);

/// Mini-batch training with early stopping. An epoch is one pass over the
/// training set in an order shuffled from the seed.
TrainResult train_early_stopping(Mlp model, const OptimizerConfig& optimizer, const Dataset& train,
                                 const Dataset& monitor, const TrainConfig& config);

// --- verification -----------------------------------------------------------

struct GradientCheckResult {
  double max_relative_error = 0;
  Index checked = 0;
  Index worst_index = -1;  // flat parameter index, or parameter_count + input index
};

using LossFunction = std::function<Loss(const MatrixXd& output)>;

/// Central finite differences (step `h`) against backward() for every
/// parameter and every input entry. Relative error is
/// |a - n| / max(|a|, |n|, 1e-6). `tamper` may alter the analytic gradients
/// before comparison.
GradientCheckResult gradient_check(const Mlp& model, const MatrixXd& inputs, const LossFunction& loss,
                                   Mode mode = Mode::eval, double h = 1e-4,
                                   const std::function<void(Gradients&)>& tamper = {});

}  // namespace ser::nn
