// Acceptance suite: one PASS/FAIL line per criterion. Tolerances, budgets and
// benchmark settings are fixed here.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "ser/corpus.hpp"
#include "ser/eval.hpp"
#include "ser/features.hpp"
#include "ser/mal.hpp"
#include "ser/nn.hpp"
#include "ser/svm.hpp"
#include "ser/wda.hpp"

using namespace ser;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

MatrixXd gaussian(Index rows, Index cols, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- 1. feature identity ------------------------------------------------------

constexpr int kFeatureClips = 50;
constexpr double kScaleTolerance = 1e-6;
constexpr double kFeatureBudget = 10.0;

AudioClip random_clip(Rng& rng) {
  std::uniform_real_distribution<double> dur(0.6, 5.0), f0(80.0, 400.0), amp(0.05, 0.5), u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  AudioClip clip;
  clip.sample_rate = 16000;
  const auto n = static_cast<Index>(dur(rng) * clip.sample_rate);
  clip.samples.resize(n);
  const double f = f0(rng), a = amp(rng), vibrato = 3.0 + 5.0 * u(rng), noise_level = 0.02 + 0.1 * u(rng);
  double phase = 0;
  for (Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / clip.sample_rate;
    phase += 2 * M_PI * f * (1.0 + 0.05 * std::sin(2 * M_PI * vibrato * t)) / clip.sample_rate;
    clip.samples[i] = a * (std::sin(phase) + 0.4 * std::sin(2 * phase) + 0.2 * std::sin(3 * phase)) *
                          (0.6 + 0.4 * std::sin(2 * M_PI * 1.5 * t)) +
                      noise_level * noise(rng);
  }
  return clip;
}

Outcome feature_identity() {
  Rng rng(20240501);
  int wrong_dim = 0, nondeterministic = 0;
  double worst_mean = 0, worst_moment = 0;
  const double ln4 = std::log(4.0);
  for (int c = 0; c < kFeatureClips; ++c) {
    const AudioClip clip = random_clip(rng);
    const FeatureVector a = extract_logmel_features(clip);
    const FeatureVector again = extract_logmel_features(clip);
    AudioClip louder = clip;
    louder.samples *= 2.0;
    const FeatureVector b = extract_logmel_features(louder);
    wrong_dim += a.dim() != 600 || b.dim() != 600;
    nondeterministic += (a.values.array() != again.values.array()).any();
    if (a.dim() != 600 || b.dim() != 600) continue;
    for (int band = 0; band < kMelBands; ++band) {
      const Index s = band * kStaticFunctionals;
      // mean, min and max shift by ln 4; variance, skewness, kurtosis and range do not move.
      for (Index k : {0, 4, 5}) worst_mean = std::max(worst_mean, std::abs(b.values[s + k] - a.values[s + k] - ln4));
      for (Index k : {1, 2, 3, 6}) worst_moment = std::max(worst_moment, std::abs(b.values[s + k] - a.values[s + k]));
    }
    // Delta functionals are shift invariant.
    const Index delta_start = kMelBands * kStaticFunctionals;
    worst_moment =
        std::max(worst_moment, (b.values.tail(600 - delta_start) - a.values.tail(600 - delta_start)).cwiseAbs().maxCoeff());
  }
  Outcome o;
  o.pass = wrong_dim == 0 && nondeterministic == 0 && worst_mean <= kScaleTolerance && worst_moment <= kScaleTolerance;
  o.detail = fmt("%.0f clips, wrong dim %.0f, nondeterministic %.0f", kFeatureClips, wrong_dim, nondeterministic) +
             fmt(", max |mean shift - ln 4| %.2e, max moment change %.2e (tol %.0e)", worst_mean, worst_moment,
                 kScaleTolerance);
  return o;
}

// --- 2. gradient checks -------------------------------------------------------

constexpr double kGradTolerance = 1e-4;
constexpr double kGradStep = 1e-4;
constexpr double kGradFloor = 1e-6;
constexpr double kGradBudget = 60.0;

MatrixXd onehot(const std::vector<int>& labels) {
  MatrixXd y = MatrixXd::Zero(2, static_cast<Index>(labels.size()));
  for (std::size_t j = 0; j < labels.size(); ++j) y(labels[j], static_cast<Index>(j)) = 1;
  return y;
}

double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kGradFloor}); }

/// Central differences of `objective` against `analytic` for every parameter
/// of `model`. Train mode reuses one dropout mask by reseeding.
double fd_parameters(const nn::Mlp& model, const std::function<double(const nn::Mlp&)>& objective,
                     const VectorXd& analytic) {
  const VectorXd base = nn::flatten_parameters(model);
  nn::Mlp probe = model;
  double worst = 0;
  for (Index i = 0; i < base.size(); ++i) {
    VectorXd p = base;
    p[i] = base[i] + kGradStep;
    nn::assign_parameters(probe, p);
    const double up = objective(probe);
    p[i] = base[i] - kGradStep;
    nn::assign_parameters(probe, p);
    const double down = objective(probe);
    worst = std::max(worst, rel_error(analytic[i], (up - down) / (2 * kGradStep)));
  }
  return worst;
}

double fd_inputs(const MatrixXd& x, const std::function<double(const MatrixXd&)>& objective, const MatrixXd& analytic) {
  MatrixXd probe = x;
  double worst = 0;
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = probe.data()[i];
    probe.data()[i] = keep + kGradStep;
    const double up = objective(probe);
    probe.data()[i] = keep - kGradStep;
    const double down = objective(probe);
    probe.data()[i] = keep;
    worst = std::max(worst, rel_error(analytic.data()[i], (up - down) / (2 * kGradStep)));
  }
  return worst;
}

using LossFn = std::function<nn::Loss(const MatrixXd&)>;
constexpr double kKinkMargin = 1e-2;
constexpr std::uint64_t kMaskSeed = 99;

nn::ForwardPass masked_forward(const nn::Mlp& m, const MatrixXd& in, nn::Mode mode) {
  Rng rng(kMaskSeed);
  return nn::forward(m, in, mode, &rng);
}

/// Smallest |pre-activation| feeding a ReLU or LReLU.
double kink_distance(const nn::Mlp& model, const MatrixXd& x, nn::Mode mode) {
  const nn::ForwardPass pass = masked_forward(model, x, mode);
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto act = model.layers()[l].spec.activation;
    if (act == nn::Activation::relu || act == nn::Activation::lrelu)
      d = std::min(d, pass.layers[l].pre_activation.cwiseAbs().minCoeff());
  }
  return d;
}

/// Standard-normal inputs redrawn until every ReLU/LReLU pre-activation is at
/// least kKinkMargin from zero, so central differences never straddle a kink.
MatrixXd smooth_inputs(const nn::Mlp& model, Index rows, Index cols, nn::Mode mode, Rng& rng) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    MatrixXd x = gaussian(rows, cols, rng);
    if (kink_distance(model, x, mode) >= kKinkMargin) return x;
  }
  throw Error("no kink-free input found");
}

double check_network(const nn::Mlp& model, const MatrixXd& x, const LossFn& loss, nn::Mode mode) {
  auto run = [&](const nn::Mlp& m, const MatrixXd& in) { return masked_forward(m, in, mode); };
  const nn::ForwardPass pass = run(model, x);
  const nn::Gradients g = nn::backward(model, pass, loss(pass.output).gradient);
  const double p = fd_parameters(model, [&](const nn::Mlp& m) { return loss(run(m, x).output).value; }, g.flatten());
  const double i = fd_inputs(x, [&](const MatrixXd& in) { return loss(run(model, in).output).value; }, g.input);
  return std::max(p, i);
}

Outcome gradient_checks() {
  using nn::Activation;
  using nn::Mode;
  Rng rng(7);
  const Index batch = 6;
  const MatrixXd x = gaussian(12, batch, rng);
  std::vector<int> labels{0, 1, 1, 0, 1, 0};
  const MatrixXd y = onehot(labels);
  std::vector<std::pair<std::string, double>> results;

  // Autoencoder: ELU with dropout, linear reconstruction, MSE.
  {
    const nn::Mlp ae(12,
                     {{16, Activation::elu, 0.1, false},
                      {16, Activation::elu, 0.1, false},
                      {4, Activation::elu, 0.0, false},
                      {16, Activation::elu, 0.0, false},
                      {16, Activation::elu, 0.0, false},
                      {12, Activation::linear, 0.0, false}},
                     1);
    const LossFn mse = [&](const MatrixXd& out) { return nn::mse_loss(out, x); };
    results.emplace_back("autoencoder (train)", check_network(ae, x, mse, Mode::train));
    results.emplace_back("autoencoder (eval)", check_network(ae, x, mse, Mode::eval));
  }
  // Feature extractor with batch norm and LReLU + dropout, classifier with
  // LReLU + dropout and softmax, cross-entropy.
  const std::vector<nn::LayerSpec> extractor{{24, Activation::lrelu, 0.4, true},
                                             {24, Activation::lrelu, 0.4, true},
                                             {16, Activation::linear, 0.0, true}};
  const std::vector<nn::LayerSpec> classifier{
      {16, Activation::lrelu, 0.3, false}, {16, Activation::lrelu, 0.3, false}, {2, Activation::softmax, 0.0, false}};
  nn::Mlp f(12, extractor, 2);
  const nn::Mlp cl(16, classifier, 3);
  {
    // Non-trivial running statistics for the eval-mode pass.
    for (auto& l : f.layers()) {
      l.running_mean = VectorXd::Random(l.spec.units) * 0.3;
      l.running_var = (VectorXd::Random(l.spec.units).array() * 0.4 + 1.0).matrix();
      l.gamma = (VectorXd::Random(l.spec.units).array() * 0.3 + 1.0).matrix();
      l.beta = VectorXd::Random(l.spec.units) * 0.2;
    }
    const nn::Mlp full = nn::Mlp::stack(f, cl);
    const LossFn ce = [&](const MatrixXd& out) { return nn::cross_entropy_loss(out, y); };
    for (const Mode mode : {Mode::train, Mode::eval})
      results.emplace_back(std::string("extractor + classifier, cross-entropy (") +
                               (mode == Mode::train ? "train" : "eval") + ")",
                           check_network(full, smooth_inputs(full, 12, batch, mode, rng), ce, mode));
  }
  // Critic: ReLU layers, linear score, WGAN critic loss on a source/target batch.
  const nn::Mlp critic(16,
                       {{32, Activation::relu, 0.0, false},
                        {32, Activation::relu, 0.0, false},
                        {16, Activation::relu, 0.0, false},
                        {1, Activation::linear, 0.0, false}},
                       4);
  {
    const MatrixXd h = smooth_inputs(critic, 16, 8, Mode::eval, rng);
    MatrixXd domain(1, 8);
    domain << 1, 1, 1, 1, -1, -1, -1, -1;
    const LossFn wgan = [&](const MatrixXd& out) { return nn::wgan_critic_loss(out, domain); };
    results.emplace_back("critic, WGAN critic loss", check_network(critic, h, wgan, Mode::eval));
    const LossFn gen = [](const MatrixXd& out) { return nn::wgan_generator_loss(out); };
    const nn::Mlp chain = nn::Mlp::stack(f, critic);
    results.emplace_back("extractor + critic, generator loss",
                         check_network(chain, smooth_inputs(chain, 12, batch, Mode::eval, rng), gen, Mode::eval));
  }
  // Full generator objective mean C_D(F_T(z)) + L_M(x, y) through the extractor.
  {
    const MatrixXd src = smooth_inputs(nn::Mlp::stack(f, cl), 12, batch, Mode::eval, rng);
    const MatrixXd tgt = smooth_inputs(nn::Mlp::stack(f, critic), 12, batch, Mode::eval, rng);
    auto objective = [&](const nn::Mlp& ft) {
      const auto s = wda::generator_gradients(ft, cl, critic, src, labels, tgt);
      return s.adversarial + s.label_loss;
    };
    const auto step = wda::generator_gradients(f, cl, critic, src, labels, tgt);
    results.emplace_back("generator objective, extractor parameters", fd_parameters(f, objective, step.extractor.flatten()));
  }

  Outcome o;
  o.pass = true;
  double worst = 0;
  std::string worst_name;
  for (const auto& [name, err] : results) {
    if (!(err < kGradTolerance)) o.pass = false;
    if (!(err <= worst)) {
      worst = err;
      worst_name = name;
    }
  }
  o.detail = fmt("%.0f networks, max relative error %.2e (tol %.0e), worst: ", static_cast<double>(results.size()), worst,
                 kGradTolerance) +
             worst_name;
  return o;
}

// --- 3. clustering oracles -------------------------------------------------

constexpr int kClusterInstances = 200;
constexpr double kCostSlack = 1e-9;
constexpr double kClusterBudget = 60.0;

double oracle_cost(const mal::DistanceMatrix& d, const std::vector<Index>& medoids) {
  double total = 0;
  for (Index i = 0; i < d.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Index m : medoids) best = std::min(best, d(i, m));
    total += best;
  }
  return total;
}

std::vector<Index> greedy_oracle(const mal::DistanceMatrix& d, Index first, Index k) {
  std::vector<Index> chosen{first};
  while (static_cast<Index>(chosen.size()) < k) {
    Index best = -1;
    double best_gap = -1;
    for (Index i = 0; i < d.size(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double gap = std::numeric_limits<double>::infinity();
      for (Index c : chosen) gap = std::min(gap, d(i, c));
      if (gap > best_gap) {
        best_gap = gap;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

double exhaustive_optimum(const mal::DistanceMatrix& d, Index k) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<bool> pick(static_cast<std::size_t>(d.size()), false);
  std::fill(pick.begin(), pick.begin() + k, true);
  do {
    std::vector<Index> medoids;
    for (Index i = 0; i < d.size(); ++i)
      if (pick[static_cast<std::size_t>(i)]) medoids.push_back(i);
    best = std::min(best, oracle_cost(d, medoids));
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return best;
}

Outcome clustering_oracles() {
  Rng rng(31);
  std::uniform_int_distribution<int> size(4, 10), dims(3, 8);
  int ff_mismatch = 0, not_local = 0, separated_miss = 0, separated = 0;
  for (int inst = 0; inst < kClusterInstances; ++inst) {
    const Index n = size(rng);
    const Index k = std::uniform_int_distribution<Index>(1, std::min<Index>(3, n - 1))(rng);
    const Index dim = dims(rng);
    MatrixXd x = gaussian(n, dim, rng);
    const bool two_pair = inst % 2 == 1;
    if (two_pair) {
      // Two tight, well-separated groups of rows around opposite profiles.
      const VectorXd proto = VectorXd::LinSpaced(dim, -1.0, 1.0);
      for (Index i = 0; i < n; ++i) x.row(i) = (i % 2 ? proto : VectorXd(-proto)).transpose() + 0.05 * x.row(i);
    }
    const mal::DistanceMatrix d = mal::pearson_distance_matrix(x);
    const Index kk = two_pair ? 2 : k;
    const std::uint64_t seed = derive_seed(inst, "ff");
    const std::vector<Index> seeds = mal::farthest_first(d, kk, seed);
    ff_mismatch += seeds != greedy_oracle(d, seeds.front(), kk);

    const mal::Clustering c = mal::k_medoids(d, seeds);
    const double cost = oracle_cost(d, c.medoids);
    bool local = std::abs(cost - c.cost) <= 1e-6;
    for (std::size_t m = 0; m < c.medoids.size() && local; ++m)
      for (Index o = 0; o < n; ++o) {
        if (std::find(c.medoids.begin(), c.medoids.end(), o) != c.medoids.end()) continue;
        std::vector<Index> swapped = c.medoids;
        swapped[m] = o;
        if (oracle_cost(d, swapped) < cost - kCostSlack) local = false;
      }
    not_local += !local;
    if (two_pair) {
      ++separated;
      separated_miss += cost > exhaustive_optimum(d, kk) + kCostSlack;
    }
  }
  Outcome o;
  o.pass = ff_mismatch == 0 && not_local == 0 && separated_miss == 0;
  o.detail = fmt("%.0f instances: farthest-first mismatches %.0f, not swap-optimal %.0f, ", kClusterInstances,
                 ff_mismatch, not_local) +
             fmt("separated instances off the exhaustive optimum %.0f of %.0f", separated_miss, separated);
  return o;
}

// --- 4. metric oracles --------------------------------------------------------

constexpr double kKappaTolerance = 1e-9;

Outcome metric_oracles() {
  std::vector<std::string> failures;
  std::vector<int> pred, truth;
  const int counts[2][2] = {{8, 2}, {3, 7}};
  for (int t = 0; t < 2; ++t)
    for (int p = 0; p < 2; ++p)
      for (int i = 0; i < counts[t][p]; ++i) {
        truth.push_back(t);
        pred.push_back(p);
      }
  if (eval::uar(pred, truth) != 75.0) failures.push_back("uar [[8,2],[3,7]]");
  const eval::ConfusionMatrix cm = eval::confusion(pred, truth, {"neutral", "positive"});
  for (int t = 0; t < 2; ++t)
    for (int p = 0; p < 2; ++p)
      if (cm.counts(t, p) != counts[t][p]) failures.push_back("confusion counts");
  if (eval::uar(std::vector<int>(20, 1), truth) != 50.0) failures.push_back("constant predictor");

  const std::vector<char> a1{'p', 'p', 'n', 'n'}, b1{'p', 'n', 'p', 'n'};
  const std::vector<char> a2{'p', 'p', 'p', 'n'}, b2{'p', 'p', 'n', 'n'};
  if (std::abs(cohens_kappa<char>(a1, b1) - 0.0) > kKappaTolerance) failures.push_back("kappa 0");
  if (std::abs(cohens_kappa<char>(a2, b2) - 0.5) > kKappaTolerance) failures.push_back("kappa 0.5");
  if (std::abs(cohens_kappa<char>(a2, a2) - 1.0) > kKappaTolerance) failures.push_back("kappa 1");

  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(1, 40)(rng);
    const double p = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    std::bernoulli_distribution coin(p);
    std::vector<int> t(static_cast<std::size_t>(n));
    for (int& v : t) v = coin(rng);
    if (eval::uar(t, t) != 100.0) failures.push_back("uar(truth, truth)");
    std::vector<int> guess(t.size());
    for (int& v : guess) v = coin(rng);
    const auto c = eval::confusion(guess, t, {"a", "b"});
    double recall = 0;
    int present = 0;
    for (int cls = 0; cls < 2; ++cls)
      if (c.counts.row(cls).sum() > 0) {
        recall += static_cast<double>(c.counts(cls, cls)) / c.counts.row(cls).sum();
        ++present;
      }
    if (std::abs(eval::uar(guess, t) - 100.0 * recall / present) > 1e-9) failures.push_back("uar vs confusion");
  }
  Outcome o;
  o.pass = failures.empty();
  o.detail = failures.empty() ? "uar 75 / 50 / 100, confusion counts, kappa 0 / 0.5 / 1 (tol 1e-9)"
                              : "failed: " + failures.front() + fmt(" (+%.0f more)", failures.size() - 1.0);
  return o;
}

// --- 5. MAL benchmark -------------------------------------------------------

constexpr Index kMalSamples = 1000;
constexpr Index kMalTest = 1000;
constexpr int kMalSeeds = 10;
constexpr Index kLiftDim = 600;
constexpr double kQuadrantOffset = 1.0;
constexpr double kLiftNoise = 1.0;
constexpr double kMalMargin = 3.0;
constexpr double kMalBudget = 300.0;

struct Lift {
  MatrixXd map;  // kLiftDim x 2
  VectorXd offset;
};

struct Quadrants {
  MatrixXd features;  // N x kLiftDim
  std::vector<VALabel> labels;
};

Quadrants quadrant_corpus(Index n, const Lift& lift, Rng& rng) {
  Quadrants q;
  q.features.resize(n, kLiftDim);
  std::normal_distribution<double> z(0.0, 1.0);
  for (Index i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 4);
    const double vx = (cls & 1 ? 1 : -1) * kQuadrantOffset + z(rng);
    const double ay = (cls & 2 ? 1 : -1) * kQuadrantOffset + z(rng);
    VALabel label;
    label.valence = cls & 1 ? Valence::positive : Valence::neutral;
    label.arousal = cls & 2 ? Arousal::high : Arousal::low;
    q.labels.push_back(label);
    VectorXd row = lift.map * Eigen::Vector2d(vx, ay) + lift.offset;
    for (Index d = 0; d < kLiftDim; ++d) row[d] += kLiftNoise * z(rng);
    q.features.row(i) = row.transpose();
  }
  return q;
}

const svm::Grid& benchmark_grid() {
  static const svm::Grid grid{{1.0, 10.0}, {0.5 / kLiftDim, 1.0 / kLiftDim, 2.0 / kLiftDim}};
  return grid;
}

/// Narrower than the production autoencoder so ten seeds fit the time budget.
mal::EmbedderConfig benchmark_embedder() {
  mal::EmbedderConfig c;
  c.encoder_units = {128, 128, mal::kEmbeddingDim};
  c.decoder_units = {128, 128};
  c.batch_size = 128;
  c.learning_rate = 1e-3;
  c.patience = 15;
  c.max_epochs = 150;
  return c;
}

double svm_uar(const MatrixXd& train_x, const std::vector<int>& train_y, const MatrixXd& test_x,
               const std::vector<int>& test_y, std::uint64_t seed) {
  const int minority = static_cast<int>(std::min(std::count(train_y.begin(), train_y.end(), 0),
                                                 std::count(train_y.begin(), train_y.end(), 1)));
  if (minority == 0) return 50.0;
  const auto r = svm::grid_search_cv(train_x, train_y, benchmark_grid(), std::clamp(minority, 2, 3), seed);
  return eval::uar(r.model.predict(test_x), test_y);
}

MatrixXd rows_of(const MatrixXd& m, const std::vector<Index>& rows) {
  MatrixXd out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

Outcome mal_benchmark() {
  Rng lift_rng(600);
  const Lift lift{gaussian(kLiftDim, 2, lift_rng), gaussian(kLiftDim, 1, lift_rng)};
  const Index k = kMalSamples / 3;
  double sum_cluster = 0, sum_medoid = 0, sum_random = 0;
  for (int seed = 0; seed < kMalSeeds; ++seed) {
    Rng rng(derive_seed(static_cast<std::uint64_t>(seed), "mal-benchmark"));
    const Quadrants pool = quadrant_corpus(kMalSamples, lift, rng);
    const Quadrants test = quadrant_corpus(kMalTest, lift, rng);
    FeatureTable table;
    table.matrix = pool.features;
    for (Index i = 0; i < kMalSamples; ++i) table.utterance_ids.push_back("u" + std::to_string(i));
    const ZScoreResult z = zscore_table(table);
    const MatrixXd test_x = apply_zscore(FeatureTable{table.utterance_ids, test.features}, z.stats).matrix;

    std::vector<Utterance> rows(static_cast<std::size_t>(kMalSamples));
    for (Index i = 0; i < kMalSamples; ++i) rows[static_cast<std::size_t>(i)].id = table.utterance_ids[i];
    const mal::EmbedderResult ae = mal::train_embedder(z.table, static_cast<std::uint64_t>(seed), benchmark_embedder());
    const mal::DistanceMatrix d = mal::pearson_distance_matrix(mal::encode(ae.encoder, z.table).matrix);
    const mal::Clustering c = mal::k_medoids(d, mal::farthest_first(d, k, static_cast<std::uint64_t>(seed)));
    std::map<std::string, std::optional<VALabel>> medoid_labels;
    for (Index m : c.medoids) medoid_labels[table.utterance_ids[m]] = pool.labels[static_cast<std::size_t>(m)];

    std::vector<Index> random_rows(static_cast<std::size_t>(kMalSamples));
    std::iota(random_rows.begin(), random_rows.end(), 0);
    std::shuffle(random_rows.begin(), random_rows.end(), rng);
    random_rows.resize(static_cast<std::size_t>(k));

    for (const Task task : {Task::valence, Task::arousal}) {
      std::vector<int> test_y;
      for (const auto& l : test.labels) test_y.push_back(l.for_task(task));
      const std::uint64_t svm_seed = derive_seed(static_cast<std::uint64_t>(seed), "svm");
      for (const auto mode : {mal::LabelMode::cluster_labels, mal::LabelMode::medoid_labels}) {
        const auto samples = mal::materialize_labels(c, rows, medoid_labels, mode);
        std::vector<Index> idx;
        std::vector<int> y;
        for (const auto& s : samples) {
          idx.push_back(s.row);
          y.push_back(s.label.for_task(task));
        }
        const double u = svm_uar(rows_of(z.table.matrix, idx), y, test_x, test_y, svm_seed);
        (mode == mal::LabelMode::cluster_labels ? sum_cluster : sum_medoid) += u;
      }
      std::vector<int> y;
      for (Index r : random_rows) y.push_back(pool.labels[static_cast<std::size_t>(r)].for_task(task));
      sum_random += svm_uar(rows_of(z.table.matrix, random_rows), y, test_x, test_y, svm_seed);
    }
  }
  const double runs = 2.0 * kMalSeeds;
  const double cluster = sum_cluster / runs, medoid = sum_medoid / runs, random = sum_random / runs;
  Outcome o;
  o.pass = cluster >= random + kMalMargin && medoid >= random + kMalMargin;
  o.detail = fmt("mean UAR over %.0f seeds x 2 tasks: cluster %.2f, medoid %.2f, random %.2f", kMalSeeds, cluster,
                 medoid, random) +
             fmt(" (need random + %.0f)", kMalMargin);
  return o;
}

// --- 6 + 7. WDA benchmark and WGAN mechanics ------------------------------

constexpr Index kWdaDim = 256;
constexpr int kWdaSeeds = 5;
constexpr Index kWdaSource = 600;
constexpr Index kWdaTarget = 512;
constexpr Index kWdaMonitor = 100;
constexpr Index kWdaTest = 1000;
constexpr double kClassSeparation = 3.0;  // class means at +-3 along the class axis
constexpr double kRotationDeg = 75.0;
constexpr double kShiftAlongAxis = 1.5;
constexpr double kSourceOnlyCeiling = 65.0;
constexpr double kSemiGain = 10.0;
constexpr double kUnsupGain = 5.0;
constexpr double kControlBand = 5.0;
constexpr double kWdaBudget = 600.0;
constexpr int kGapRunsNeeded = 4;

struct Domain {
  VectorXd axis;   // class axis
  VectorXd other;  // rotation partner, orthogonal to axis
};

/// Two unit-covariance Gaussians at +-kClassSeparation along the class axis,
/// then rotated by `degrees` in the (axis, other) plane and shifted along the
/// class axis.
std::pair<MatrixXd, std::vector<int>> wda_samples(Index n, const Domain& dom, double degrees, double shift, Rng& rng) {
  MatrixXd x = gaussian(n, kWdaDim, rng);
  std::vector<int> y(static_cast<std::size_t>(n));
  const double th = degrees * M_PI / 180.0;
  for (Index i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 2);
    y[static_cast<std::size_t>(i)] = cls;
    VectorXd row = x.row(i).transpose() + (cls ? 1.0 : -1.0) * kClassSeparation * dom.axis;
    const double a = row.dot(dom.axis), b = row.dot(dom.other);
    row += (std::cos(th) * a - std::sin(th) * b - a) * dom.axis + (std::sin(th) * a + std::cos(th) * b - b) * dom.other;
    row += shift * dom.axis;
    x.row(i) = row.transpose();
  }
  return {x, y};
}

wda::SourceConfig benchmark_source_config() {
  wda::SourceConfig c;
  c.batch_size = 64;
  c.patience = 20;
  c.max_epochs = 200;
  c.learning_rate = 1e-4;
  return c;
}


wda::AdaptationConfig benchmark_adaptation(std::uint64_t seed) {
  wda::AdaptationConfig c;
  c.learning_rate = 5e-5;
  c.critic_learning_rate = 5e-4;
  c.critic_steps = 5;
  c.clip = 0.01;
  c.batch_size = 16;
  c.max_epochs = 40;
  c.warmup_critic_steps = 500;
  c.seed = seed;
  return c;
}

double target_uar(const nn::Mlp& extractor, const nn::Mlp& classifier, const MatrixXd& x, const std::vector<int>& y) {
  return eval::uar(wda::predict_target(extractor, classifier, x), y);
}

struct WdaOutcomes {
  Outcome benchmark;
  Outcome mechanics;
};

WdaOutcomes wda_benchmark() {
  Rng dom_rng(256);
  Domain dom;
  {
    const MatrixXd basis = gaussian(kWdaDim, 2, dom_rng);
    Eigen::HouseholderQR<MatrixXd> qr(basis);
    const MatrixXd q = qr.householderQ() * MatrixXd::Identity(kWdaDim, 2);
    dom.axis = q.col(0);
    dom.other = q.col(1);
  }
  double sum_source = 0, sum_semi = 0, sum_unsup = 0;
  double sum_ctrl_source = 0, worst_ctrl_delta = 0;
  Index clip_violations = 0, critic_updates = 0;
  int gap_decreased = 0;
  bool frozen = true;
  for (int seed = 0; seed < kWdaSeeds; ++seed) {
    const auto s = static_cast<std::uint64_t>(seed);
    Rng rng(derive_seed(s, "wda-benchmark"));
    const auto [src_x, src_y] = wda_samples(kWdaSource, dom, 0, 0, rng);
    const auto [tgt_x, tgt_unused] = wda_samples(kWdaTarget, dom, kRotationDeg, kShiftAlongAxis, rng);
    const auto [mon_x, mon_y] = wda_samples(kWdaMonitor, dom, kRotationDeg, kShiftAlongAxis, rng);
    const auto [test_x, test_y] = wda_samples(kWdaTest, dom, kRotationDeg, kShiftAlongAxis, rng);
    const auto [ctrl_x, ctrl_unused] = wda_samples(kWdaTarget, dom, 0, 0, rng);
    const auto [ctrl_mon_x, ctrl_mon_y] = wda_samples(kWdaMonitor, dom, 0, 0, rng);
    const auto [ctrl_test_x, ctrl_test_y] = wda_samples(kWdaTest, dom, 0, 0, rng);

    const wda::SourceModel source =
        wda::train_source(src_x, src_y, Task::valence, derive_seed(s, "source"), benchmark_source_config());
    const double source_only = target_uar(source.extractor, source.classifier, test_x, test_y);

    const wda::AdaptationConfig cfg = benchmark_adaptation(derive_seed(s, "adapt"));
    const double clip = cfg.clip;
    auto observer = [&](const nn::Mlp& critic) {
      ++critic_updates;
      double largest = 0;
      for (const auto& l : critic.layers())
        largest = std::max({largest, l.weight.cwiseAbs().maxCoeff(), l.bias.cwiseAbs().maxCoeff()});
      if (largest > clip) ++clip_violations;
    };
    const wda::MonitorSet monitor{mon_x, mon_y};
    const wda::AdaptationResult shifted = wda::adapt(source, src_x, src_y, tgt_x, cfg, &monitor, observer);
    const double unsup = eval::uar(wda::predict_target(shifted.selected(wda::Variant::unsupervised), test_x), test_y);
    const double semi = eval::uar(wda::predict_target(shifted.selected(wda::Variant::semi_supervised), test_x), test_y);
    const int selected = shifted.unsupervised_stop.epoch;
    gap_decreased += shifted.history[static_cast<std::size_t>(selected)].critic_gap < shifted.history.front().critic_gap;

    const double ctrl_source = target_uar(source.extractor, source.classifier, ctrl_test_x, ctrl_test_y);
    const wda::MonitorSet ctrl_monitor{ctrl_mon_x, ctrl_mon_y};
    const wda::AdaptationResult control = wda::adapt(source, src_x, src_y, ctrl_x, cfg, &ctrl_monitor, observer);
    for (const auto v : {wda::Variant::unsupervised, wda::Variant::semi_supervised})
      worst_ctrl_delta = std::max(
          worst_ctrl_delta, std::abs(eval::uar(wda::predict_target(control.selected(v), ctrl_test_x), ctrl_test_y) -
                                     ctrl_source));

    std::clog << "[acceptance] wda seed " << seed << ": source-only " << source_only << ", unsupervised " << unsup
              << " (epoch " << selected << "), semi-supervised " << semi << ", control source-only " << ctrl_source
              << "\n";
    sum_source += source_only;
    sum_unsup += unsup;
    sum_semi += semi;
    sum_ctrl_source += ctrl_source;

    if (seed == 0) {
      wda::AdaptationConfig still = cfg;
      still.learning_rate = 0;
      still.max_epochs = 1;
      still.warmup_critic_steps = 5;
      const wda::AdaptationResult r = wda::adapt(source, src_x, src_y, tgt_x, still, nullptr, observer);
      const auto& a = r.last.extractor.layers();
      const auto& b = source.extractor.layers();
      for (std::size_t l = 0; l < a.size(); ++l)
        frozen = frozen && (a[l].weight.array() == b[l].weight.array()).all() &&
                 (a[l].bias.array() == b[l].bias.array()).all() && (a[l].gamma.array() == b[l].gamma.array()).all() &&
                 (a[l].beta.array() == b[l].beta.array()).all() &&
                 (a[l].running_mean.array() == b[l].running_mean.array()).all() &&
                 (a[l].running_var.array() == b[l].running_var.array()).all();
    }
  }
  const double n = kWdaSeeds;
  const double source = sum_source / n, semi = sum_semi / n, unsup = sum_unsup / n;
  WdaOutcomes out;
  out.benchmark.pass = source <= kSourceOnlyCeiling && semi >= source + kSemiGain && unsup >= source + kUnsupGain &&
                       worst_ctrl_delta <= kControlBand;
  out.benchmark.detail =
      fmt("mean target UAR over %.0f seeds: source-only %.2f (ceiling %.0f), semi-supervised %.2f", n, source,
          kSourceOnlyCeiling, semi) +
      fmt(" (need +%.0f), unsupervised %.2f (need +%.0f); control source-only %.2f", kSemiGain, unsup, kUnsupGain,
          sum_ctrl_source / n) +
      fmt(", worst control change %.2f (band %.0f)", worst_ctrl_delta, kControlBand);
  out.mechanics.pass = clip_violations == 0 && critic_updates > 0 && gap_decreased >= kGapRunsNeeded && frozen;
  out.mechanics.detail =
      fmt("%.0f critic updates, %.0f outside [-c, c]; gap fell to the selected epoch in %.0f of %.0f runs", critic_updates,
          clip_violations, gap_decreased, n) +
      (frozen ? "; zero generator rate leaves F_T bitwise unchanged" : "; F_T changed with a zero generator rate");
  return out;
}

// --- 8. SVM properties ----------------------------------------------------

constexpr int kSvmSeeds = 10;
constexpr int kSvmWeightingNeeded = 9;
constexpr double kBoxSlack = 1e-12;

Outcome svm_properties() {
  int separable_misses = 0, box_violations = 0, improved = 0;
  for (int seed = 0; seed < kSvmSeeds; ++seed) {
    Rng rng(derive_seed(static_cast<std::uint64_t>(seed), "svm-acceptance"));
    // Separable: two blobs 8 sd apart.
    MatrixXd x = gaussian(60, 3, rng);
    std::vector<int> y(60);
    for (Index i = 0; i < 60; ++i) {
      y[static_cast<std::size_t>(i)] = i < 30 ? 0 : 1;
      x(i, 0) += i < 30 ? -4.0 : 4.0;
    }
    for (const double c : {0.1, 1.0, 100.0}) {
      const svm::SvmModel m = svm::train(x, y, {c, 0.2, {}});
      const auto pred = m.predict(x);
      if (c >= 1.0) separable_misses += pred != y;
      const auto w = svm::balanced_weights(y);
      double sum = 0;
      for (Index sv = 0; sv < m.dual_coef.size(); ++sv) {
        const double alpha = std::abs(m.dual_coef[sv]);
        sum += m.dual_coef[sv];
        const bool pos = m.dual_coef[sv] > 0;
        const double bound = c * w.at(pos ? m.positive_label : m.negative_label);
        box_violations += alpha > bound + kBoxSlack || std::abs(m.upper_bound[sv] - bound) > kBoxSlack;
      }
      box_violations += std::abs(sum) > 1e-9;
    }
    // 9:1 imbalance with overlapping classes.
    MatrixXd ix = gaussian(400, 2, rng), tx = gaussian(400, 2, rng);
    std::vector<int> iy(400), ty(400);
    for (Index i = 0; i < 400; ++i) {
      iy[static_cast<std::size_t>(i)] = ty[static_cast<std::size_t>(i)] = i < 360 ? 0 : 1;
      ix(i, 0) += i < 360 ? -0.6 : 0.6;
      tx(i, 0) += i < 360 ? -0.6 : 0.6;
    }
    auto minority_recall = [&](const svm::SvmModel& m) {
      const auto p = m.predict(tx);
      return static_cast<double>(std::count(p.begin() + 360, p.end(), 1)) / 40.0;
    };
    const double weighted = minority_recall(svm::train(ix, iy, {1.0, 0.5, {}}));
    const double plain = minority_recall(svm::train(ix, iy, {1.0, 0.5, {{0, 1.0}, {1, 1.0}}}));
    improved += weighted > plain;
  }
  Outcome o;
  o.pass = separable_misses == 0 && box_violations == 0 && improved >= kSvmWeightingNeeded;
  o.detail = fmt("separable fits with errors %.0f, box violations %.0f, weighting raised minority recall in %.0f of %.0f seeds",
                 separable_misses, box_violations, improved, kSvmSeeds);
  return o;
}

// --- 9. end-to-end determinism -------------------------------------------

constexpr double kPipelineBudget = 300.0;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct PipelineRun {
  bool ok = true;
  double seconds = 0;
  std::map<std::string, std::string> reports;
  std::string failed_step;
};

PipelineRun run_pipeline(const fs::path& ser, const fs::path& dir) {
  PipelineRun run;
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path log = dir / "pipeline.log";
  const std::string config = "--config " + (dir / "corpus" / "config.json").string();
  const std::vector<std::string> steps{
      "synth-corpus --out " + (dir / "corpus").string(),
      config + " features",
      config + " embed",
      config + " cluster",
      config + " queue",
      config + " import-labels --queued-only --input " + (dir / "corpus" / "oracle_annotations.csv").string(),
      config + " run-al",
  };
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& step : steps) {
    const std::string cmd = "\"" + ser.string() + "\" " + step + " >>\"" + log.string() + "\" 2>&1";
    if (std::system(cmd.c_str()) != 0) {
      run.ok = false;
      run.failed_step = step;
      break;
    }
  }
  run.seconds = seconds_since(t0);
  const fs::path reports = dir / "corpus" / "run" / "reports";
  if (run.ok && fs::exists(reports))
    for (const auto& e : fs::directory_iterator(reports)) run.reports[e.path().filename().string()] = slurp(e.path());
  return run;
}

Outcome pipeline_determinism(const fs::path& ser, const fs::path& work, double& slowest) {
  const PipelineRun a = run_pipeline(ser, work / "pipeline_a");
  const PipelineRun b = run_pipeline(ser, work / "pipeline_b");
  slowest = std::max(a.seconds, b.seconds);
  Outcome o;
  if (!a.ok || !b.ok) {
    o.detail = "pipeline step failed: " + (a.ok ? b.failed_step : a.failed_step) + " (see pipeline.log)";
    return o;
  }
  o.pass = !a.reports.empty() && a.reports == b.reports;
  o.detail = fmt("%.0f report files, ", static_cast<double>(a.reports.size())) +
             (a.reports == b.reports ? "byte-identical" : "different") +
             fmt("; run times %.1f s and %.1f s", a.seconds, b.seconds);
  return o;
}

void print(int id, const std::string& name, const Outcome& o, double seconds, double budget) {
  const bool in_time = budget <= 0 || seconds <= budget;
  const bool pass = o.pass && in_time;
  std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << id << " " << name << ": " << o.detail;
  if (budget > 0) std::cout << fmt(" [%.1f s of %.0f s", seconds, budget) << (in_time ? "]" : ", over budget]");
  std::cout << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("acceptance criteria");
  std::string ser_binary;
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--ser", ser_binary, "path to the ser command line tool")->required();
  app.add_option("--work", work, "scratch directory");
  app.add_option("--only", only, "criteria to run");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  bool all = true;
  auto timed = [&](int id, const std::string& name, double budget, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = seconds_since(t0);
    print(id, name, o, s, budget);
    all = all && o.pass && (budget <= 0 || s <= budget);
  };

  timed(1, "feature identity", kFeatureBudget, feature_identity);
  timed(2, "gradient checks", kGradBudget, gradient_checks);
  timed(3, "clustering oracles", kClusterBudget, clustering_oracles);
  timed(4, "metric oracles", 0, metric_oracles);
  timed(5, "MAL benchmark", kMalBudget, mal_benchmark);
  if (wanted(6) || wanted(7)) {
    const auto t0 = std::chrono::steady_clock::now();
    WdaOutcomes w;
    try {
      w = wda_benchmark();
    } catch (const std::exception& e) {
      w.benchmark = w.mechanics = {false, std::string("exception: ") + e.what()};
    }
    const double s = seconds_since(t0);
    if (wanted(6)) {
      print(6, "WDA benchmark", w.benchmark, s, kWdaBudget);
      all = all && w.benchmark.pass && s <= kWdaBudget;
    }
    if (wanted(7)) {
      print(7, "WGAN mechanics", w.mechanics, s, 0);
      all = all && w.mechanics.pass;
    }
  }
  timed(8, "SVM properties", 0, svm_properties);
  if (wanted(9)) {
    double slowest = 0;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = pipeline_determinism(ser_binary, work, slowest);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const bool in_time = slowest <= kPipelineBudget;
    o.pass = o.pass && in_time;
    print(9, "end-to-end determinism", o, seconds_since(t0), 0);
    std::cout << fmt("      slowest single run %.1f s of %.0f s", slowest, kPipelineBudget) << std::endl;
    all = all && o.pass;
  }
  std::cout << (all ? "all selected criteria passed" : "some criteria failed") << std::endl;
  return all ? 0 : 1;
}
