#include "ser/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ser::nn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::elu: return "elu";
    case Activation::lrelu: return "lrelu";
    case Activation::relu: return "relu";
    case Activation::linear: return "linear";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

// --- model ------------------------------------------------------------------

Mlp::Mlp(int input_dim, const std::vector<LayerSpec>& specs, std::uint64_t seed) : input_dim_(input_dim) {
  if (input_dim < 1) throw Error("network input dimension must be positive");
  if (specs.empty()) throw Error("network needs at least one layer");
  Rng rng(seed);
  int fan_in = input_dim;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    if (s.units < 1) throw Error("layer units must be positive");
    if (!(s.dropout >= 0.0 && s.dropout < 1.0)) throw Error("dropout rate must lie in [0, 1)");
    if (s.activation == Activation::softmax && i + 1 != specs.size())
      throw Error("softmax is only allowed on the final layer");
    DenseLayer layer;
    layer.spec = s;
    double bound;
    if (s.activation == Activation::relu) {
      bound = std::sqrt(6.0 / fan_in);
    } else if (s.activation == Activation::lrelu) {
      bound = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope)) * std::sqrt(3.0 / fan_in);
    } else {
      bound = std::sqrt(6.0 / (fan_in + s.units));
    }
    std::uniform_real_distribution<double> dist(-bound, bound);
    layer.weight.resize(s.units, fan_in);
    for (Index c = 0; c < layer.weight.cols(); ++c)
      for (Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = dist(rng);
    layer.bias = VectorXd::Zero(s.units);
    if (s.batch_norm) {
      layer.gamma = VectorXd::Ones(s.units);
      layer.beta = VectorXd::Zero(s.units);
      layer.running_mean = VectorXd::Zero(s.units);
      layer.running_var = VectorXd::Ones(s.units);
    }
    layers_.push_back(std::move(layer));
    fan_in = s.units;
  }
}

Mlp make_mlp(int input_dim, std::vector<DenseLayer> layers) {
  Mlp m;
  m.input_dim_ = input_dim;
  m.layers_ = std::move(layers);
  m.validate();
  return m;
}

int Mlp::output_dim() const { return layers_.empty() ? input_dim_ : layers_.back().spec.units; }

std::vector<LayerSpec> Mlp::specs() const {
  std::vector<LayerSpec> out;
  for (const auto& l : layers_) out.push_back(l.spec);
  return out;
}

Mlp Mlp::slice(std::size_t first, std::size_t last) const {
  if (first >= last || last > layers_.size()) throw Error("invalid layer slice");
  const int in = first == 0 ? input_dim_ : layers_[first - 1].spec.units;
  return make_mlp(in, std::vector<DenseLayer>(layers_.begin() + static_cast<long>(first),
                                              layers_.begin() + static_cast<long>(last)));
}

Mlp Mlp::stack(const Mlp& bottom, const Mlp& top) {
  if (bottom.output_dim() != top.input_dim()) throw Error("cannot stack networks with mismatched dimensions");
  std::vector<DenseLayer> layers = bottom.layers_;
  layers.insert(layers.end(), top.layers_.begin(), top.layers_.end());
  return make_mlp(bottom.input_dim_, std::move(layers));
}

Index Mlp::parameter_count() const {
  Index n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size() + l.gamma.size() + l.beta.size();
  return n;
}

void Mlp::validate() const {
  int fan_in = input_dim_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.weight.rows() != l.spec.units || l.weight.cols() != fan_in || l.bias.size() != l.spec.units)
      throw Error("layer " + std::to_string(i) + " dimensions do not chain");
    if (l.spec.batch_norm && (l.gamma.size() != l.spec.units || l.beta.size() != l.spec.units ||
                              l.running_mean.size() != l.spec.units || l.running_var.size() != l.spec.units))
      throw Error("layer " + std::to_string(i) + " batch-norm buffers have the wrong size");
    if (l.spec.activation == Activation::softmax && i + 1 != layers_.size())
      throw Error("softmax is only allowed on the final layer");
    if (!l.weight.allFinite() || !l.bias.allFinite() || !l.gamma.allFinite() || !l.beta.allFinite())
      throw Error("layer " + std::to_string(i) + " has non-finite parameters");
    fan_in = l.spec.units;
  }
}

namespace {

// Visits every trainable parameter block as a flat span.
template <typename Model, typename F>
void for_each_block(Model& model, F&& f) {
  for (auto& l : model.layers()) {
    f(l.weight.data(), l.weight.size());
    f(l.bias.data(), l.bias.size());
    if (l.spec.batch_norm) {
      f(l.gamma.data(), l.gamma.size());
      f(l.beta.data(), l.beta.size());
    }
  }
}

}  // namespace

VectorXd flatten_parameters(const Mlp& model) {
  VectorXd flat(model.parameter_count());
  Index offset = 0;
  for_each_block(model, [&](const double* p, Index n) {
    flat.segment(offset, n) = Eigen::Map<const VectorXd>(p, n);
    offset += n;
  });
  return flat;
}

void assign_parameters(Mlp& model, const VectorXd& flat) {
  if (flat.size() != model.parameter_count()) throw Error("parameter vector has the wrong length");
  Index offset = 0;
  for_each_block(model, [&](double* p, Index n) {
    Eigen::Map<VectorXd>(p, n) = flat.segment(offset, n);
    offset += n;
  });
}

// --- forward / backward ------------------------------------------------------

namespace {

void softmax_columns(MatrixXd& m) {
  for (Index c = 0; c < m.cols(); ++c) {
    const double top = m.col(c).maxCoeff();
    m.col(c) = (m.col(c).array() - top).exp();
    m.col(c) /= m.col(c).sum();
  }
}

MatrixXd activate(Activation a, const MatrixXd& y) {
  switch (a) {
    case Activation::elu:
      return y.unaryExpr([](double v) { return v > 0 ? v : kEluAlpha * std::expm1(v); });
    case Activation::lrelu:
      return y.unaryExpr([](double v) { return v > 0 ? v : kLeakySlope * v; });
    case Activation::relu:
      return y.cwiseMax(0.0);
    case Activation::linear:
      return y;
    case Activation::softmax: {
      MatrixXd p = y;
      softmax_columns(p);
      return p;
    }
  }
  return y;
}

MatrixXd activation_backward(Activation a, const MatrixXd& y, const MatrixXd& g) {
  switch (a) {
    case Activation::elu:
      return g.binaryExpr(y, [](double gv, double v) { return v > 0 ? gv : gv * kEluAlpha * std::exp(v); });
    case Activation::lrelu:
      return g.binaryExpr(y, [](double gv, double v) { return v > 0 ? gv : gv * kLeakySlope; });
    case Activation::relu:
      return g.binaryExpr(y, [](double gv, double v) { return v > 0 ? gv : 0.0; });
    case Activation::linear:
      return g;
    case Activation::softmax: {
      MatrixXd p = y;
      softmax_columns(p);
      const Eigen::RowVectorXd dots = (p.array() * g.array()).colwise().sum();
      return (p.array() * (g.rowwise() - dots).array()).matrix();
    }
  }
  return g;
}

}  // namespace

ForwardPass forward(const Mlp& model, const MatrixXd& inputs, Mode mode, Rng* rng) {
  if (inputs.rows() != model.input_dim())
    throw Error("input has " + std::to_string(inputs.rows()) + " features, network expects " +
                std::to_string(model.input_dim()));
  ForwardPass pass;
  pass.mode = mode;
  pass.layers.reserve(model.num_layers());
  const MatrixXd* x = &inputs;
  for (const auto& l : model.layers()) {
    LayerCache c;
    c.input = *x;
    MatrixXd z = l.weight * c.input;
    z.colwise() += l.bias;
    if (l.spec.batch_norm) {
      if (mode == Mode::train) {
        c.batch_mean = z.rowwise().mean();
        z.colwise() -= c.batch_mean;
        c.batch_var = z.array().square().rowwise().mean();
      } else {
        z.colwise() -= l.running_mean;
        c.batch_var = l.running_var;
      }
      c.inv_std = (c.batch_var.array() + kBatchNormEpsilon).rsqrt();
      c.normalized = c.inv_std.asDiagonal() * z;
      c.pre_activation = l.gamma.asDiagonal() * c.normalized;
      c.pre_activation.colwise() += l.beta;
    } else {
      c.pre_activation = std::move(z);
    }
    c.output = activate(l.spec.activation, c.pre_activation);
    if (mode == Mode::train && l.spec.dropout > 0) {
      if (!rng) throw Error("train-mode forward with dropout needs a random generator");
      const double keep = 1.0 - l.spec.dropout;
      std::uniform_real_distribution<double> u(0.0, 1.0);
      c.mask.resize(c.output.rows(), c.output.cols());
      for (Index j = 0; j < c.mask.cols(); ++j)
        for (Index i = 0; i < c.mask.rows(); ++i) c.mask(i, j) = u(*rng) < keep ? 1.0 / keep : 0.0;
      c.output.array() *= c.mask.array();
    }
    pass.layers.push_back(std::move(c));
    x = &pass.layers.back().output;
  }
  pass.output = *x;
  return pass;
}

MatrixXd predict(const Mlp& model, const MatrixXd& inputs) { return forward(model, inputs, Mode::eval).output; }

void update_running_stats(Mlp& model, const ForwardPass& pass) {
  if (pass.mode != Mode::train) return;
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    auto& l = model.layers()[i];
    if (!l.spec.batch_norm) continue;
    const auto& c = pass.layers[i];
    l.running_mean = kBatchNormMomentum * l.running_mean + (1 - kBatchNormMomentum) * c.batch_mean;
    l.running_var = kBatchNormMomentum * l.running_var + (1 - kBatchNormMomentum) * c.batch_var;
  }
}

Gradients backward(const Mlp& model, const ForwardPass& pass, const MatrixXd& output_grad) {
  if (pass.layers.size() != model.num_layers()) throw Error("forward pass does not belong to this network");
  if (output_grad.rows() != pass.output.rows() || output_grad.cols() != pass.output.cols())
    throw Error("output gradient shape does not match network output");
  Gradients grads;
  grads.layers.resize(model.num_layers());
  MatrixXd g = output_grad;
  for (std::size_t k = model.num_layers(); k-- > 0;) {
    const auto& l = model.layers()[k];
    const auto& c = pass.layers[k];
    auto& lg = grads.layers[k];
    if (c.mask.size() > 0) g.array() *= c.mask.array();
    MatrixXd dz = activation_backward(l.spec.activation, c.pre_activation, g);
    if (l.spec.batch_norm) {
      lg.gamma = (dz.array() * c.normalized.array()).rowwise().sum();
      lg.beta = dz.rowwise().sum();
      const MatrixXd dxhat = l.gamma.asDiagonal() * dz;
      if (pass.mode == Mode::train) {
        const double b = static_cast<double>(dz.cols());
        const VectorXd sum_dxhat = dxhat.rowwise().sum();
        const VectorXd sum_dxhat_xhat = (dxhat.array() * c.normalized.array()).rowwise().sum();
        MatrixXd t = dxhat * b;
        t.colwise() -= sum_dxhat;
        t -= (sum_dxhat_xhat.asDiagonal() * c.normalized);
        dz = (c.inv_std / b).asDiagonal() * t;
      } else {
        dz = c.inv_std.asDiagonal() * dxhat;
      }
    }
    lg.weight.noalias() = dz * c.input.transpose();
    lg.bias = dz.rowwise().sum();
    g.noalias() = l.weight.transpose() * dz;
  }
  grads.input = std::move(g);
  return grads;
}

VectorXd Gradients::flatten() const {
  Index n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size() + l.gamma.size() + l.beta.size();
  VectorXd flat(n);
  Index offset = 0;
  auto put = [&](const auto& m) {
    flat.segment(offset, m.size()) = Eigen::Map<const VectorXd>(m.data(), m.size());
    offset += m.size();
  };
  for (const auto& l : layers) {
    put(l.weight);
    put(l.bias);
    if (l.gamma.size() > 0) {
      put(l.gamma);
      put(l.beta);
    }
  }
  return flat;
}

bool Gradients::all_finite() const {
  for (const auto& l : layers)
    if (!l.weight.allFinite() || !l.bias.allFinite() || !l.gamma.allFinite() || !l.beta.allFinite()) return false;
  return input.allFinite();
}

// --- losses -------------------------------------------------------------------

Loss mse_loss(const MatrixXd& prediction, const MatrixXd& target) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols())
    throw Error("mse: prediction and target shapes differ");
  const double n = static_cast<double>(prediction.size());
  const MatrixXd diff = prediction - target;
  return {diff.squaredNorm() / n, diff * (2.0 / n)};
}

Loss cross_entropy_loss(const MatrixXd& probabilities, const MatrixXd& onehot) {
  if (probabilities.rows() != onehot.rows() || probabilities.cols() != onehot.cols())
    throw Error("cross entropy: prediction and target shapes differ");
  constexpr double kClamp = 1e-12;
  const double ln10 = std::log(10.0);
  Loss out;
  out.gradient = MatrixXd::Zero(probabilities.rows(), probabilities.cols());
  for (Index j = 0; j < probabilities.cols(); ++j) {
    for (Index i = 0; i < probabilities.rows(); ++i) {
      const double y = onehot(i, j);
      if (y == 0) continue;
      const double p = probabilities(i, j);
      if (p > kClamp) {
        out.value -= y * std::log10(p);
        out.gradient(i, j) = -y / (p * ln10);
      } else {
        out.value -= y * std::log10(kClamp);
      }
    }
  }
  return out;
}

Loss wgan_critic_loss(const MatrixXd& scores, const MatrixXd& domain) {
  if (scores.rows() != 1 || domain.rows() != 1 || scores.cols() != domain.cols())
    throw Error("critic loss expects matching 1 x B score and domain rows");
  const double n_source = static_cast<double>((domain.array() > 0).count());
  const double n_target = static_cast<double>((domain.array() < 0).count());
  if (n_source == 0 || n_target == 0) throw Error("critic loss needs source and target columns");
  Loss out;
  out.gradient = MatrixXd::Zero(1, scores.cols());
  for (Index j = 0; j < scores.cols(); ++j) {
    const double w = domain(0, j) > 0 ? 1.0 / n_source : -1.0 / n_target;
    out.value += w * scores(0, j);
    out.gradient(0, j) = w;
  }
  return out;
}

Loss wgan_generator_loss(const MatrixXd& scores) {
  if (scores.rows() != 1 || scores.cols() == 0) throw Error("generator loss expects a 1 x B score row");
  const double n = static_cast<double>(scores.cols());
  return {scores.sum() / n, MatrixXd::Constant(1, scores.cols(), 1.0 / n)};
}

Loss compute_loss(LossKind kind, const MatrixXd& output, const MatrixXd& target) {
  switch (kind) {
    case LossKind::mse: return mse_loss(output, target);
    case LossKind::cross_entropy: return cross_entropy_loss(output, target);
    case LossKind::wgan_critic: return wgan_critic_loss(output, target);
    case LossKind::wgan_generator: return wgan_generator_loss(output);
  }
  throw Error("unknown loss");
}

// --- optimizers -----------------------------------------------------------------

Optimizer::Optimizer(const OptimizerConfig& config, const Mlp& model)
    : config_(config),
      first_(VectorXd::Zero(model.parameter_count())),
      second_(VectorXd::Zero(model.parameter_count())) {
  if (!(config.learning_rate >= 0)) throw Error("learning rate must be non-negative");
}

Optimizer Optimizer::restore(const OptimizerConfig& config, std::uint64_t steps, VectorXd first, VectorXd second) {
  Optimizer o;
  o.config_ = config;
  o.steps_ = steps;
  o.first_ = std::move(first);
  o.second_ = std::move(second);
  return o;
}

void Optimizer::step(Mlp& model, const Gradients& gradients) {
  if (first_.size() != model.parameter_count()) throw Error("optimizer state does not match the network");
  if (!gradients.all_finite())
    throw Error("non-finite gradient at optimizer step " + std::to_string(steps_ + 1));
  if (gradients.layers.size() != model.num_layers()) throw Error("gradients do not match the network");
  ++steps_;
  const double lr = config_.learning_rate;
  const bool adam = config_.kind == OptimizerKind::adam;
  const double c1 = 1 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1 - std::pow(config_.beta2, static_cast<double>(steps_));
  Index offset = 0;
  auto apply = [&](double* param, const double* grad, Index n) {
    const auto g = Eigen::Map<const VectorXd>(grad, n).array();
    auto m = first_.segment(offset, n).array();
    auto v = second_.segment(offset, n).array();
    auto p = Eigen::Map<VectorXd>(param, n).array();
    if (adam) {
      m = config_.beta1 * m + (1 - config_.beta1) * g;
      v = config_.beta2 * v + (1 - config_.beta2) * g.square();
      if (lr != 0) p -= lr * ((m / c1) / ((v / c2).sqrt() + config_.epsilon));
    } else {
      v = config_.rms_decay * v + (1 - config_.rms_decay) * g.square();
      if (lr != 0) p -= lr * (g / (v.sqrt() + config_.epsilon));
    }
    offset += n;
  };
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    DenseLayer& l = model.layers()[i];
    const LayerGradients& g = gradients.layers[i];
    apply(l.weight.data(), g.weight.data(), l.weight.size());
    apply(l.bias.data(), g.bias.data(), l.bias.size());
    if (l.spec.batch_norm) {
      apply(l.gamma.data(), g.gamma.data(), l.gamma.size());
      apply(l.beta.data(), g.beta.data(), l.beta.size());
    }
  }
}

// --- training -------------------------------------------------------------------

Dataset Dataset::subset(const std::vector<Index>& columns) const {
  Dataset out;
  out.inputs.resize(inputs.rows(), static_cast<Index>(columns.size()));
  out.targets.resize(targets.rows(), static_cast<Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) {
    out.inputs.col(static_cast<Index>(j)) = inputs.col(columns[j]);
    out.targets.col(static_cast<Index>(j)) = targets.col(columns[j]);
  }
  return out;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error("batch size must be at least 1");
  if (patience < 1) throw Error("patience must be at least 1");
  if (max_epochs < 0) throw Error("max epochs must be non-negative");
  if (loss == LossKind::wgan_critic || loss == LossKind::wgan_generator)
    throw Error("adversarial losses are trained by the adaptation loop, not train_early_stopping");
}

double evaluate_loss(const Mlp& model, const Dataset& data, LossKind loss) {
  return compute_loss(loss, predict(model, data.inputs), data.targets).value;
}

double evaluate_accuracy(const Mlp& model, const Dataset& data) {
  if (data.size() == 0) throw Error("accuracy of an empty dataset");
  const MatrixXd out = predict(model, data.inputs);
  Index correct = 0;
  for (Index j = 0; j < out.cols(); ++j) {
    Index p, t;
    out.col(j).maxCoeff(&p);
    data.targets.col(j).maxCoeff(&t);
    correct += (p == t) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(out.cols());
}

TrainResult train_early_stopping(Mlp model, const OptimizerConfig& optimizer_config, const Dataset& train,
                                 const Dataset& monitor, const TrainConfig& config) {
  config.validate();
  if (train.size() == 0 || monitor.size() == 0) throw Error("training and monitor sets must be non-empty");
  bool has_batch_norm = false;
  for (const auto& l : model.layers()) has_batch_norm |= l.spec.batch_norm;

  Rng rng(config.seed);
  Optimizer opt(optimizer_config, model);
  auto measure = [&](const Mlp& m) {
    return config.monitor == MonitorKind::loss ? evaluate_loss(m, monitor, config.loss) : evaluate_accuracy(m, monitor);
  };
  auto better = [&](double candidate, double best) {
    return config.monitor == MonitorKind::loss ? candidate < best : candidate > best;
  };

  TrainResult result;
  result.best_monitor = measure(model);
  result.monitor_history.push_back(result.best_monitor);
  result.train_loss_history.push_back(evaluate_loss(model, train, config.loss));
  result.model = model;

  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), 0);
  int stale = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      // Batch statistics of a single sample are degenerate.
      if (has_batch_norm && stop - start < 2) continue;
      const Dataset batch = train.subset({order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(stop)});
      const ForwardPass pass = forward(model, batch.inputs, Mode::train, &rng);
      const Loss loss = compute_loss(config.loss, pass.output, batch.targets);
      if (!std::isfinite(loss.value)) throw Error("non-finite training loss at epoch " + std::to_string(epoch));
      const Gradients grads = backward(model, pass, loss.gradient);
      opt.step(model, grads);
      update_running_stats(model, pass);
      epoch_loss += loss.value * static_cast<double>(stop - start);
    }
    result.train_loss_history.push_back(epoch_loss / static_cast<double>(order.size()));
    const double m = measure(model);
    result.monitor_history.push_back(m);
    result.epochs_run = epoch;
    if (better(m, result.best_monitor)) {
      result.best_monitor = m;
      result.best_epoch = epoch;
      result.model = model;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  return result;
}

// --- gradient check -----------------------------------------------------------

GradientCheckResult gradient_check(const Mlp& model, const MatrixXd& inputs, const LossFunction& loss, Mode mode,
                                   double h, const std::function<void(Gradients&)>& tamper) {
  if (mode == Mode::train)
    for (const auto& l : model.layers())
      if (l.spec.dropout > 0) throw Error("gradient check in train mode requires dropout to be disabled");

  const ForwardPass pass = forward(model, inputs, mode);
  Gradients grads = backward(model, pass, loss(pass.output).gradient);
  if (tamper) tamper(grads);
  const VectorXd analytic_params = grads.flatten();

  GradientCheckResult result;
  auto compare = [&](double a, double n, Index index) {
    const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
    ++result.checked;
    if (rel > result.max_relative_error || result.worst_index < 0) {
      result.max_relative_error = rel;
      result.worst_index = index;
    }
  };

  const VectorXd base = flatten_parameters(model);
  Mlp probe = model;
  for (Index i = 0; i < base.size(); ++i) {
    VectorXd p = base;
    p[i] = base[i] + h;
    assign_parameters(probe, p);
    const double up = loss(forward(probe, inputs, mode).output).value;
    p[i] = base[i] - h;
    assign_parameters(probe, p);
    const double down = loss(forward(probe, inputs, mode).output).value;
    compare(analytic_params[i], (up - down) / (2 * h), i);
  }
  MatrixXd x = inputs;
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = loss(forward(model, x, mode).output).value;
    x.data()[i] = keep - h;
    const double down = loss(forward(model, x, mode).output).value;
    x.data()[i] = keep;
    compare(grads.input.data()[i], (up - down) / (2 * h), base.size() + i);
  }
  return result;
}

}  // namespace ser::nn
