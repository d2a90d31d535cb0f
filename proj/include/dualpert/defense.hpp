#pragma once

// Training procedures (clean, adversarial, Gaussian augmentation) and
// smoothed prediction with abstention.

#include <boost/math/distributions/binomial.hpp>

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dualpert/attack.hpp"
#include "dualpert/data.hpp"
#include "dualpert/model.hpp"
#include "dualpert/salience.hpp"

namespace dualpert {

// ---------------------------------------------------------------------------
// Masks for a whole dataset
// ---------------------------------------------------------------------------

enum class MaskSource { automatic, ground_truth, fixation };

inline MaskSource parse_mask_source(const std::string& s) {
  if (s == "auto") return MaskSource::automatic;
  if (s == "gt" || s == "ground-truth") return MaskSource::ground_truth;
  if (s == "fixation") return MaskSource::fixation;
  throw ArgumentError("unknown mask source '" + s + "' (expected auto, gt or fixation)");
}

inline const char* to_string(MaskSource m) {
  switch (m) {
    case MaskSource::automatic: return "auto";
    case MaskSource::ground_truth: return "gt";
    case MaskSource::fixation: return "fixation";
  }
  return "?";
}

/// One MaskPair per image. `automatic` uses ground truth when the dataset
/// carries it and fixation masks otherwise.
inline std::vector<MaskPair> dataset_masks(const Dataset& data, MaskSource source, const SalienceModel& salience = {}) {
  const bool use_gt = source == MaskSource::ground_truth || (source == MaskSource::automatic && data.masks);
  if (use_gt && !data.masks) throw ArgumentError("ground-truth masks requested but the dataset has none");
  std::vector<MaskPair> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.push_back(use_gt ? data.mask_pair(i) : fixation_masks(data.image(i), salience));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class AttackKind { none, pgd, dual };

inline AttackKind parse_attack_kind(const std::string& s) {
  if (s == "none" || s == "clean") return AttackKind::none;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "dual") return AttackKind::dual;
  throw ArgumentError("unknown training attack '" + s + "' (expected none, pgd or dual)");
}

inline AttackConfig default_training_attack() {
  AttackConfig a;
  a.norm = Norm::l2;
  a.eps_fg = 0.5f;
  a.eps_bg = 2.5f;
  a.lambda = 0.0f;
  a.steps = 10;
  return a;
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  float learning_rate = 1e-3f;
  float decay = 0.1f;
  std::vector<std::size_t> decay_epochs;  // epochs (0-based) at which the rate is multiplied by `decay`
  AttackKind attack = AttackKind::none;
  AttackConfig attack_cfg = default_training_attack();
  MaskSource masks = MaskSource::automatic;
  std::uint64_t seed = 0;
  std::optional<ClassifierParams> init;  // start from these parameters instead of a fresh init_model

  void validate() const {
    if (epochs == 0) throw ArgumentError("train config: epochs must be positive");
    if (batch == 0) throw ArgumentError("train config: batch size must be positive");
    if (!(learning_rate > 0.0f) || !std::isfinite(learning_rate)) {
      throw ArgumentError("train config: learning rate must be positive");
    }
    if (!(decay > 0.0f) || !std::isfinite(decay)) throw ArgumentError("train config: decay must be positive");
    for (std::size_t i = 1; i < decay_epochs.size(); ++i) {
      if (decay_epochs[i] <= decay_epochs[i - 1]) {
        throw ArgumentError("train config: decay epochs must be strictly increasing");
      }
    }
    attack_cfg.validate();
  }

  float rate_at(std::size_t epoch) const {
    float lr = learning_rate;
    for (std::size_t e : decay_epochs) {
      if (epoch >= e) lr *= decay;
    }
    return lr;
  }
};

struct TrainLogRow {
  std::size_t epoch = 0;
  double loss = 0.0;       // mean training loss over the epoch's (possibly perturbed) batches
  double clean_acc = 0.0;  // accuracy on the clean training set after the epoch
};

inline Architecture architecture_for(const Dataset& data) {
  Architecture a = Architecture::reference(data.classes);
  a.in_channels = data.channels();
  a.height = data.height();
  a.width = data.width();
  return a;
}

/// Maps a minibatch to the inputs the optimizer actually sees.
using BatchTransform = std::function<Tensor(const ClassifierParams& current, const Tensor& x,
                                            std::span<const int> labels, std::span<const std::size_t> indices,
                                            std::uint64_t batch_counter)>;

template <Classifier M>
double accuracy(const M& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const std::vector<int> pred = predict_class(model, data.images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

/// Minibatch Adam on mean cross-entropy. Shuffles with a seed-derived stream;
/// parameters are initialized from the same seed.
inline ClassifierParams train_loop(const Dataset& data, const TrainConfig& cfg, const BatchTransform& transform,
                                   std::vector<TrainLogRow>* log = nullptr) {
  cfg.validate();
  if (data.size() == 0) throw ArgumentError("training needs a nonempty dataset");
  const Architecture arch = architecture_for(data);
  if (cfg.init && !(cfg.init->arch == arch)) throw ShapeError("training: initial model does not match the dataset");
  ClassifierParams params = cfg.init ? *cfg.init : init_model(arch, cfg.seed);
  OptimizerState opt = OptimizerState::for_parameters(params.tensors, cfg.learning_rate);
  Rng shuffle_rng = make_rng(cfg.seed, 0x5A0F);
  std::vector<std::size_t> order(data.size());
  std::uint64_t counter = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.learning_rate = cfg.rate_at(epoch);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0.0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - first);
      const std::span<const std::size_t> idx(order.data() + first, count);
      std::vector<int> labels;
      labels.reserve(count);
      for (std::size_t i : idx) labels.push_back(data.labels[i]);
      Tensor x = data.images.gather(idx);
      if (transform) x = transform(params, x, labels, idx, counter);
      ++counter;

      Tape tape;
      const std::vector<Var> p = params.bind(tape, true);
      Var logits = params.forward(tape, tape.constant_ref(x), p);
      Var loss = scale(reduce_sum(softmax_cross_entropy(logits, labels)), 1.0f / static_cast<float>(count));
      total += tape.value(loss)[0] * static_cast<double>(count);
      GradientSet g = backward(tape, loss);
      adam_step(params, gradients_for(g, p, tape), opt);
    }
    if (log) {
      log->push_back({epoch, total / static_cast<double>(data.size()), accuracy(params, data)});
    }
  }
  return params;
}

inline ClassifierParams clean_train(const Dataset& data, const TrainConfig& cfg,
                                    std::vector<TrainLogRow>* log = nullptr) {
  return train_loop(data, cfg, nullptr, log);
}

/// Adversarial training: every minibatch is replaced by attack outputs against
/// the current parameters. The attack uses its own random stream, so a
/// zero-budget attack reproduces clean training exactly.
inline ClassifierParams adv_train(const Dataset& data, const TrainConfig& cfg,
                                  std::vector<TrainLogRow>* log = nullptr) {
  cfg.validate();
  if (cfg.attack == AttackKind::none) throw ArgumentError("adv_train needs a pgd or dual inner attack");
  std::vector<MaskPair> masks;
  if (cfg.attack == AttackKind::dual) {
    masks = dataset_masks(data, cfg.masks, cfg.attack_cfg.salience);
    for (const MaskPair& m : masks) {
      if (m.height() != data.height() || m.width() != data.width()) {
        throw ShapeError("adv_train: mask extents do not match the images");
      }
    }
  }
  BatchTransform attack = [&](const ClassifierParams& current, const Tensor& x, std::span<const int> labels,
                              std::span<const std::size_t> idx, std::uint64_t counter) {
    AttackConfig a = cfg.attack_cfg;
    a.seed = cfg.attack_cfg.seed ^ (cfg.seed * 0x9E3779B97F4A7C15ull) ^ (counter * 0xD1B54A32D192ED03ull);
    if (cfg.attack == AttackKind::pgd) return pgd_attack(current, x, labels, a);
    std::vector<MaskPair> batch_masks;
    batch_masks.reserve(idx.size());
    for (std::size_t i : idx) batch_masks.push_back(masks[i]);
    return dual_attack(current, x, labels, batch_masks, a);
  };
  return train_loop(data, cfg, attack, log);
}

/// Gaussian-augmented training: N(0, sigma^2) noise per pixel, clamped to [0, 1].
inline ClassifierParams rs_train(const Dataset& data, const TrainConfig& cfg, float sigma,
                                 std::vector<TrainLogRow>* log = nullptr) {
  if (!(sigma >= 0.0f) || !std::isfinite(sigma)) throw ArgumentError("rs_train: sigma must be nonnegative");
  if (sigma == 0.0f) return train_loop(data, cfg, nullptr, log);
  Rng noise_rng = make_rng(cfg.seed, 0x2057);
  BatchTransform noisy = [&](const ClassifierParams&, const Tensor& x, std::span<const int>,
                             std::span<const std::size_t>, std::uint64_t) {
    Tensor out = x;
    for (float& v : out.values()) v = std::clamp(v + static_cast<float>(normal(noise_rng, 0.0, sigma)), 0.0f, 1.0f);
    return out;
  };
  return train_loop(data, cfg, noisy, log);
}

// ---------------------------------------------------------------------------
// Smoothed prediction
// ---------------------------------------------------------------------------

inline constexpr int kAbstain = -1;

struct SmoothedClassifier {
  ClassifierParams base;
  float sigma = 0.25f;
  std::size_t n = 1;
  double abstain_alpha = 0.001;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma >= 0.0f) || !std::isfinite(sigma)) throw ArgumentError("smoothed classifier: sigma must be >= 0");
    if (n == 0) throw ArgumentError("smoothed classifier: need at least one noise copy");
    if (!(abstain_alpha > 0.0 && abstain_alpha < 1.0)) throw ArgumentError("smoothed classifier: alpha in (0, 1)");
  }
};

/// Two-sided exact binomial test of H0: p = 1/2 given `top` successes out of
/// `top + runner_up`; returns the p-value.
inline double two_sided_binomial_p(std::size_t top, std::size_t runner_up) {
  const std::size_t trials = top + runner_up;
  if (trials == 0) return 1.0;
  const std::size_t hi = std::max(top, runner_up);
  boost::math::binomial_distribution<double> b(static_cast<double>(trials), 0.5);
  const double upper = hi == 0 ? 1.0 : boost::math::cdf(boost::math::complement(b, static_cast<double>(hi - 1)));
  return std::min(1.0, 2.0 * upper);
}

/// Decision from vote counts: the majority class, or kAbstain when the
/// top-two counts are not significantly different. A single vote never abstains.
inline int smoothed_decision(std::span<const std::size_t> votes, std::size_t n, double alpha) {
  std::size_t top = 0;
  for (std::size_t c = 1; c < votes.size(); ++c) {
    if (votes[c] > votes[top]) top = c;
  }
  if (n == 1) return static_cast<int>(top);
  std::size_t runner = 0;
  for (std::size_t c = 0; c < votes.size(); ++c) {
    if (c != top) runner = std::max(runner, votes[c]);
  }
  return two_sided_binomial_p(votes[top], runner) <= alpha ? static_cast<int>(top) : kAbstain;
}

/// Predictions for an NCHW batch; each image is classified through `n`
/// noise-corrupted copies clamped to [0, 1].
inline std::vector<int> rs_predict(const SmoothedClassifier& s, const Tensor& x) {
  s.validate();
  if (x.rank() != 4) throw ShapeError("rs_predict: batch must be NCHW, got " + shape_string(x.shape()));
  Rng rng = make_rng(s.seed, 0x5300);
  const std::size_t stride = x.size() / std::max<std::size_t>(x.dim(0), 1);
  std::vector<int> out;
  out.reserve(x.dim(0));
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    Tensor copies({s.n, x.dim(1), x.dim(2), x.dim(3)});
    for (std::size_t j = 0; j < s.n; ++j) {
      for (std::size_t e = 0; e < stride; ++e) {
        float v = x[i * stride + e];
        if (s.sigma > 0.0f) v = std::clamp(v + static_cast<float>(normal(rng, 0.0, s.sigma)), 0.0f, 1.0f);
        copies[j * stride + e] = v;
      }
    }
    std::vector<std::size_t> votes(s.base.arch.classes, 0);
    for (int c : predict_class(s.base, copies)) ++votes[static_cast<std::size_t>(c)];
    out.push_back(smoothed_decision(votes, s.n, s.abstain_alpha));
  }
  return out;
}

/// Fraction of correct smoothed predictions; abstentions count as wrong.
inline double smoothed_accuracy(const SmoothedClassifier& s, const Tensor& x, std::span<const int> labels) {
  const std::vector<int> pred = rs_predict(s, x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace dualpert
