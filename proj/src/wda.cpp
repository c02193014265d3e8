#include "ser/wda.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include "ser/eval.hpp"

namespace ser::wda {

namespace {

MatrixXd onehot(std::span<const int> labels, int classes) {
  MatrixXd y = MatrixXd::Zero(classes, static_cast<Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw Error("label " + std::to_string(labels[i]) + " out of range");
    y(labels[i], static_cast<Index>(i)) = 1.0;
  }
  return y;
}

std::vector<int> argmax_columns(const MatrixXd& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.cols()));
  for (Index j = 0; j < scores.cols(); ++j) {
    Index best = 0;
    scores.col(j).maxCoeff(&best);
    out[static_cast<std::size_t>(j)] = static_cast<int>(best);
  }
  return out;
}

MatrixXd columns(const MatrixXd& m, std::span<const Index> idx) {
  MatrixXd out(m.rows(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Index>(j)) = m.col(idx[j]);
  return out;
}

void accumulate(nn::Gradients& into, const nn::Gradients& add) {
  for (std::size_t l = 0; l < into.layers.size(); ++l) {
    into.layers[l].weight += add.layers[l].weight;
    into.layers[l].bias += add.layers[l].bias;
    if (into.layers[l].gamma.size()) {
      into.layers[l].gamma += add.layers[l].gamma;
      into.layers[l].beta += add.layers[l].beta;
    }
  }
}

/// Endless stream of shuffled index batches over [0, n).
class BatchStream {
public:
  BatchStream(Index n, Rng& rng) : order_(static_cast<std::size_t>(n)), rng_(rng) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }
  std::vector<Index> next(Index size) {
    std::vector<Index> out;
    while (static_cast<Index>(out.size()) < size) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

private:
  std::vector<Index> order_;
  std::size_t pos_ = 0;
  Rng& rng_;
};

void check_binary(std::span<const int> labels, Index rows, const std::string& what) {
  if (static_cast<Index>(labels.size()) != rows)
    throw Error(what + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  for (int y : labels)
    if (y != 0 && y != 1) throw Error(what + ": labels must be 0 or 1, got " + std::to_string(y));
}

}  // namespace

std::pair<std::vector<Index>, std::vector<Index>> stratified_split(std::span<const int> labels, double fraction,
                                                                   std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw Error("split fraction must lie in (0, 1)");
  std::map<int, std::vector<Index>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<Index>(i));
  Rng rng(seed);
  std::vector<Index> first, second;
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    const auto n_second = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    second.insert(second.end(), members.begin(), members.begin() + static_cast<long>(n_second));
    first.insert(first.end(), members.begin() + static_cast<long>(n_second), members.end());
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {first, second};
}

SourceModel train_source(const MatrixXd& features, std::span<const int> labels, Task task, std::uint64_t seed,
                         const SourceConfig& config) {
  check_binary(labels, features.rows(), "source training");
  if (!features.allFinite()) throw Error("source features contain non-finite values");
  auto [train_rows, test_rows] = stratified_split(labels, config.test_fraction, derive_seed(seed, "source-split"));
  std::set<int> train_classes;
  for (Index i : train_rows) train_classes.insert(labels[static_cast<std::size_t>(i)]);
  if (train_classes.size() < 2)
    throw Error("class " + std::to_string(train_classes.count(0) ? 1 : 0) + " is absent from the source training split");
  if (test_rows.empty()) throw Error("source held-out split is empty");

  std::vector<nn::LayerSpec> specs;
  for (std::size_t i = 0; i < config.extractor_units.size(); ++i) {
    const bool hidden = i + 1 < config.extractor_units.size();
    specs.push_back({config.extractor_units[i], hidden ? nn::Activation::lrelu : nn::Activation::linear,
                     hidden ? config.extractor_dropout : 0.0, true});
  }
  for (int units : config.classifier_units)
    specs.push_back({units, nn::Activation::lrelu, config.classifier_dropout, false});
  specs.push_back({2, nn::Activation::softmax, 0.0, false});

  const nn::Dataset all{features.transpose(), onehot(labels, 2)};
  nn::TrainConfig tc;
  tc.batch_size = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), train_rows.size()));
  tc.patience = config.patience;
  tc.max_epochs = config.max_epochs;
  tc.seed = derive_seed(seed, "source-train");
  tc.loss = nn::LossKind::cross_entropy;
  tc.monitor = nn::MonitorKind::accuracy;
  nn::OptimizerConfig oc;
  oc.learning_rate = config.learning_rate;

  nn::Mlp model(static_cast<int>(features.cols()), specs, derive_seed(seed, "source-init"));
  const nn::TrainResult trained = nn::train_early_stopping(std::move(model), oc, all.subset(train_rows),
                                                           all.subset(test_rows), tc);
  SourceModel out;
  const std::size_t n_f = config.extractor_units.size();
  out.extractor = trained.model.slice(0, n_f);
  out.classifier = trained.model.slice(n_f, trained.model.num_layers());
  out.task = task;
  out.best_epoch = trained.best_epoch;
  out.heldout_accuracy = trained.best_monitor;
  out.train_rows = std::move(train_rows);
  out.test_rows = std::move(test_rows);
  return out;
}

void clip_parameters(nn::Mlp& model, double clip) {
  for (auto& l : model.layers()) {
    l.weight = l.weight.cwiseMax(-clip).cwiseMin(clip);
    l.bias = l.bias.cwiseMax(-clip).cwiseMin(clip);
    if (l.spec.batch_norm) {
      l.gamma = l.gamma.cwiseMax(-clip).cwiseMin(clip);
      l.beta = l.beta.cwiseMax(-clip).cwiseMin(clip);
    }
  }
}

nn::Mlp make_critic(int input_dim, std::uint64_t seed, double clip) {
  nn::Mlp critic(input_dim,
                 {{512, nn::Activation::relu, 0.0, false},
                  {512, nn::Activation::relu, 0.0, false},
                  {256, nn::Activation::relu, 0.0, false},
                  {1, nn::Activation::linear, 0.0, false}},
                 seed);
  clip_parameters(critic, clip);
  return critic;
}

std::string to_string(Variant v) { return v == Variant::unsupervised ? "us" : "ss"; }

Variant parse_variant(const std::string& s) {
  if (s == "us" || s == "US" || s == "unsupervised") return Variant::unsupervised;
  if (s == "ss" || s == "S-S" || s == "semi_supervised" || s == "semi-supervised") return Variant::semi_supervised;
  throw Error("unknown adaptation variant '" + s + "'");
}

double default_adaptation_lr(const std::vector<std::string>& sources, Task task) {
  if (sources.size() > 1) return task == Task::valence ? 7e-5 : 6e-5;
  if (sources.size() == 1) {
    std::string name = sources[0];
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
    if ((name == "fesc" && task == Task::valence) || (name == "ravdess" && task == Task::arousal)) return 7e-5;
  }
  return 5e-5;
}

void AdaptationConfig::validate() const {
  if (!(learning_rate >= 0) || !(critic_learning_rate > 0)) throw Error("adaptation learning rates must be positive");
  if (critic_steps < 1) throw Error("critic_steps must be >= 1");
  if (!(clip > 0)) throw Error("clip must be positive");
  if (batch_size < 1 || max_epochs < 1) throw Error("batch_size and max_epochs must be >= 1");
  if (warmup_critic_steps < 0) throw Error("warmup_critic_steps must be >= 0");
  if (smoothing_window < 1 || !(saturation_threshold > 0)) throw Error("invalid saturation settings");
}

const AdaptedModel& AdaptationResult::selected(Variant v) const {
  if (v == Variant::semi_supervised) {
    if (!semi_supervised) throw Error("semi-supervised selection needs a labeled target monitor set");
    return *semi_supervised;
  }
  return unsupervised;
}

double critic_objective(const nn::Mlp& f_source, const nn::Mlp& f_target, const nn::Mlp& critic,
                        const MatrixXd& source_features, const MatrixXd& target_features) {
  const MatrixXd s = nn::predict(critic, nn::predict(f_source, source_features.transpose()));
  const MatrixXd t = nn::predict(critic, nn::predict(f_target, target_features.transpose()));
  return s.mean() - t.mean();
}

GeneratorStep generator_gradients(const nn::Mlp& f_target, const nn::Mlp& classifier, const nn::Mlp& critic,
                                  const MatrixXd& source_batch, std::span<const int> source_labels,
                                  const MatrixXd& target_batch) {
  GeneratorStep step;
  const nn::ForwardPass pt = nn::forward(f_target, target_batch, nn::Mode::eval);
  const nn::ForwardPass pd = nn::forward(critic, pt.output, nn::Mode::eval);
  const nn::Loss adv = nn::wgan_generator_loss(pd.output);
  const nn::Gradients gd = nn::backward(critic, pd, adv.gradient);
  step.extractor = nn::backward(f_target, pt, gd.input);
  step.adversarial = adv.value;
  step.target_input_gradient = step.extractor.input;

  const nn::ForwardPass ps = nn::forward(f_target, source_batch, nn::Mode::eval);
  const nn::ForwardPass pc = nn::forward(classifier, ps.output, nn::Mode::eval);
  nn::Loss ce = nn::cross_entropy_loss(pc.output, onehot(source_labels, 2));
  const double scale = 1.0 / static_cast<double>(source_batch.cols());
  step.label_loss = ce.value * scale;
  step.classifier = nn::backward(classifier, pc, ce.gradient * scale);
  accumulate(step.extractor, nn::backward(f_target, ps, step.classifier.input));
  // The label term is a function of source inputs only.
  step.label_term_target_gradient = MatrixXd::Zero(target_batch.rows(), target_batch.cols());
  step.target_input_gradient += step.label_term_target_gradient;
  return step;
}

StopDecision stop_unsupervised(std::span<const double> target_terms, int window, double threshold) {
  const auto n = static_cast<int>(target_terms.size());
  if (window < 1) throw Error("smoothing window must be >= 1");
  if (n < window + 1)
    throw Error("saturation check needs at least " + std::to_string(window + 1) + " epochs, got " + std::to_string(n));
  std::vector<double> smoothed(static_cast<std::size_t>(n), 0.0);
  std::vector<double> buf(static_cast<std::size_t>(window));
  for (int e = window - 1; e < n; ++e) {
    std::copy(target_terms.begin() + e - window + 1, target_terms.begin() + e + 1, buf.begin());
    std::sort(buf.begin(), buf.end());
    smoothed[static_cast<std::size_t>(e)] =
        window % 2 ? buf[static_cast<std::size_t>(window / 2)]
                   : 0.5 * (buf[static_cast<std::size_t>(window / 2 - 1)] + buf[static_cast<std::size_t>(window / 2)]);
  }
  int run = 0;
  for (int e = window; e < n; ++e) {
    const double prev = smoothed[static_cast<std::size_t>(e - 1)];
    const double r = std::abs(smoothed[static_cast<std::size_t>(e)] - prev) / std::max(std::abs(prev), 1e-12);
    run = r < threshold ? run + 1 : 0;
    if (run == window) return {e - window + 1, true};
  }
  return {n - 1, false};
}

int stop_semisupervised(std::span<const double> monitor_uars) {
  if (monitor_uars.empty()) throw Error("semi-supervised selection needs a non-empty monitor history");
  return static_cast<int>(std::max_element(monitor_uars.begin(), monitor_uars.end()) - monitor_uars.begin());
}

std::vector<int> predict_target(const nn::Mlp& extractor, const nn::Mlp& classifier, const MatrixXd& features) {
  if (features.cols() != extractor.input_dim())
    throw Error("target features have dimension " + std::to_string(features.cols()) + ", the model expects " +
                std::to_string(extractor.input_dim()));
  return argmax_columns(nn::predict(classifier, nn::predict(extractor, features.transpose())));
}

std::vector<int> predict_target(const AdaptedModel& model, const MatrixXd& features) {
  return predict_target(model.extractor, model.classifier, features);
}

AdaptationResult adapt(const SourceModel& source, const MatrixXd& source_features, std::span<const int> source_labels,
                       const MatrixXd& target_features, const AdaptationConfig& config, const MonitorSet* monitor,
                       const CriticObserver& observer) {
  config.validate();
  check_binary(source_labels, source_features.rows(), "adaptation source");
  const int dim = source.extractor.input_dim();
  if (source_features.cols() != dim || target_features.cols() != dim)
    throw Error("adaptation features do not match the source model input dimension " + std::to_string(dim));
  if (target_features.rows() == 0 || source_features.rows() == 0) throw Error("adaptation needs source and target data");
  if (monitor) {
    if (monitor->features.rows() == 0) throw Error("labeled target monitor set is empty");
    check_binary(monitor->labels, monitor->features.rows(), "target monitor");
  }

  const MatrixXd xs = source_features.transpose();
  const MatrixXd xt = target_features.transpose();
  const MatrixXd hs_all = nn::predict(source.extractor, xs);  // F_S is frozen
  const Index batch = std::min<Index>({config.batch_size, xs.cols(), xt.cols()});
  const Index steps_per_epoch = (xt.cols() + batch - 1) / batch;

  Rng rng(derive_seed(config.seed, "adapt"));
  BatchStream source_stream(xs.cols(), rng), target_stream(xt.cols(), rng);
  BatchStream critic_source(xs.cols(), rng), critic_target(xt.cols(), rng);

  nn::Mlp f_target = source.extractor;
  nn::Mlp classifier = source.classifier;
  nn::Mlp critic = make_critic(hs_all.rows(), derive_seed(config.seed, "critic-init"), config.clip);
  nn::OptimizerConfig rms;
  rms.kind = nn::OptimizerKind::rmsprop;
  rms.learning_rate = config.critic_learning_rate;
  nn::Optimizer critic_opt(rms, critic);
  nn::OptimizerConfig adam;
  adam.learning_rate = config.learning_rate;
  nn::Optimizer extractor_opt(adam, f_target), classifier_opt(adam, classifier);

  MatrixXd domain(1, 2 * batch);
  domain.leftCols(batch).setOnes();
  domain.rightCols(batch).setConstant(-1.0);

  auto critic_update = [&] {
    const auto si = critic_source.next(batch);
    const auto ti = critic_target.next(batch);
    MatrixXd h(hs_all.rows(), 2 * batch);
    h.leftCols(batch) = columns(hs_all, si);
    h.rightCols(batch) = nn::predict(f_target, columns(xt, ti));
    const nn::ForwardPass pass = nn::forward(critic, h, nn::Mode::train);
    const nn::Loss loss = nn::wgan_critic_loss(pass.output, domain);
    critic_opt.step(critic, nn::backward(critic, pass, loss.gradient));
    clip_parameters(critic, config.clip);
    if (observer) observer(critic);
  };

  AdaptationResult result;
  std::vector<double> target_terms, monitor_uars;
  auto record = [&](int epoch) {
    EpochRecord r;
    r.epoch = epoch;
    const MatrixXd ht = nn::predict(f_target, xt);
    r.target_term = nn::predict(critic, ht).mean();
    r.critic_gap = r.target_term - nn::predict(critic, hs_all).mean();
    if (!std::isfinite(r.target_term) || !std::isfinite(r.critic_gap))
      throw Error("adaptation diverged: non-finite critic scores at epoch " + std::to_string(epoch));
    if (monitor) {
      const auto pred = predict_target(f_target, classifier, monitor->features);
      r.monitor_uar = eval::uar(pred, monitor->labels);
      monitor_uars.push_back(*r.monitor_uar);
    }
    target_terms.push_back(r.target_term);
    result.history.push_back(r);
  };

  for (int i = 0; i < config.warmup_critic_steps; ++i) critic_update();
  record(0);
  result.initial = {f_target, classifier, 0};
  if (monitor) result.semi_supervised = result.initial;

  const auto window = static_cast<std::size_t>(config.smoothing_window);
  std::deque<AdaptedModel> recent{result.initial};
  bool saturated = false;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (Index s = 0; s < steps_per_epoch; ++s) {
      for (int c = 0; c < config.critic_steps; ++c) critic_update();
      const auto si = source_stream.next(batch);
      const auto ti = target_stream.next(batch);
      std::vector<int> ys;
      for (Index i : si) ys.push_back(source_labels[static_cast<std::size_t>(i)]);
      const GeneratorStep g = generator_gradients(f_target, classifier, critic, columns(xs, si), ys, columns(xt, ti));
      if (!std::isfinite(g.adversarial) || !std::isfinite(g.label_loss))
        throw Error("adaptation diverged: non-finite generator loss at epoch " + std::to_string(epoch) +
                    " (adversarial " + std::to_string(g.adversarial) + ", label " + std::to_string(g.label_loss) + ")");
      extractor_opt.step(f_target, g.extractor);
      classifier_opt.step(classifier, g.classifier);
    }
    record(epoch);
    AdaptedModel snapshot{f_target, classifier, epoch};
    if (monitor && monitor_uars.back() > monitor_uars[static_cast<std::size_t>(result.semi_supervised->epoch)])
      result.semi_supervised = snapshot;
    recent.push_back(snapshot);
    if (recent.size() > window + 1) recent.pop_front();

    if (!saturated && target_terms.size() >= 2 * window) {
      const StopDecision d = stop_unsupervised(target_terms, config.smoothing_window, config.saturation_threshold);
      if (d.saturated) {
        saturated = true;
        result.unsupervised_stop = d;
        for (const auto& m : recent)
          if (m.epoch == d.epoch) result.unsupervised = m;
        if (config.stop_at_saturation) break;
      }
    }
  }
  result.last = {f_target, classifier, result.history.back().epoch};
  if (!saturated) {
    std::clog << "[wda] warning: critic term did not saturate within " << result.last.epoch
              << " epochs, using the last epoch\n";
    result.unsupervised = result.last;
    result.unsupervised_stop = {result.last.epoch, false};
  }
  result.critic = critic;
  return result;
}

}  // namespace ser::wda
