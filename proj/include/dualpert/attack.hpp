#pragma once

// Foreground/background ("dual") perturbation attacks.
//
// A batch attack keeps one perturbation per image and, at every step,
//   1. differentiates J = L(h(x + d), y) + lambda * S(x + d) once,
//   2. splits the gradient with the fixed masks F(x), B(x),
//   3. takes a normalized steepest-ascent step in each region,
//   4. projects each region onto its own ball and merges,
//   5. clips x + d into [0, 1] and re-projects.
// PGD is the special case F = 1, B = 0, lambda = 0.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dualpert/autodiff.hpp"
#include "dualpert/mask.hpp"
#include "dualpert/model.hpp"
#include "dualpert/salience.hpp"

namespace dualpert {

enum class Norm { l2, linf };

inline Norm parse_norm(const std::string& s) {
  if (s == "2" || s == "l2" || s == "L2") return Norm::l2;
  if (s == "inf" || s == "linf" || s == "Linf") return Norm::linf;
  throw ArgumentError("unknown norm '" + s + "' (expected l2 or linf)");
}

inline const char* to_string(Norm n) { return n == Norm::l2 ? "l2" : "linf"; }

struct AttackConfig {
  Norm norm = Norm::l2;
  float eps_fg = 0.5f;
  float eps_bg = 2.5f;
  float lambda = 0.0f;
  std::size_t steps = 20;
  float alpha_fg = 0.0f;  // <= 0 selects 2 * eps_fg / steps
  float alpha_bg = 0.0f;  // <= 0 selects 2 * eps_bg / steps
  bool random_start = true;
  std::uint64_t seed = 0;
  SalienceModel salience;

  float step_fg() const { return alpha_fg > 0.0f ? alpha_fg : 2.0f * eps_fg / static_cast<float>(steps); }
  float step_bg() const { return alpha_bg > 0.0f ? alpha_bg : 2.0f * eps_bg / static_cast<float>(steps); }

  void validate() const {
    for (float v : {eps_fg, eps_bg, lambda, alpha_fg, alpha_bg}) {
      if (!std::isfinite(v)) throw ArgumentError("attack config: non-finite value");
    }
    if (eps_fg < 0.0f || eps_bg < 0.0f) throw ArgumentError("attack config: budgets must be nonnegative");
    if (lambda < 0.0f) throw ArgumentError("attack config: lambda must be nonnegative");
    if (steps == 0) throw ArgumentError("attack config: need at least one step");
  }
};

struct Perturbation {
  Tensor delta;  // same shape as the attacked batch
};

// ---------------------------------------------------------------------------
// Projection and steepest-ascent direction
// ---------------------------------------------------------------------------

/// Projects `v` in place onto the eps-ball. The l2 branch shrinks the scale
/// until the stored floats satisfy the bound, which makes the map idempotent.
inline void project_inplace(std::span<float> v, float eps, Norm p) {
  if (!(eps >= 0.0f)) throw ArgumentError("project: negative budget");
  if (p == Norm::linf) {
    for (float& x : v) x = std::clamp(x, -eps, eps);
    return;
  }
  const double norm = l2_norm(v);
  if (norm <= static_cast<double>(eps)) return;
  if (eps == 0.0f) {
    std::fill(v.begin(), v.end(), 0.0f);
    return;
  }
  const std::vector<float> orig(v.begin(), v.end());
  double s = static_cast<double>(eps) / norm;
  for (int guard = 0; guard < 64; ++guard) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(orig[i] * s);
    if (l2_norm(v) <= static_cast<double>(eps)) return;
    s = std::nextafter(s, 0.0) * (1.0 - 1e-7);
  }
}

inline Tensor project(const Tensor& v, float eps, Norm p) {
  Tensor out = v;
  project_inplace(out.values(), eps, p);
  return out;
}

inline void steepest_dir_inplace(std::span<float> g, Norm p) {
  if (p == Norm::linf) {
    for (float& x : g) x = x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f);
    return;
  }
  const double norm = l2_norm(g);
  if (norm < 1e-12) {
    std::fill(g.begin(), g.end(), 0.0f);
    return;
  }
  for (float& x : g) x = static_cast<float>(x / norm);
}

/// Unit ascent direction: sign(g) for l-inf, g / ||g||_2 for l2 (zero when ||g|| < 1e-12).
inline Tensor steepest_dir(const Tensor& g, Norm p) {
  Tensor out = g;
  steepest_dir_inplace(out.values(), p);
  return out;
}

namespace detail {

inline std::size_t row_stride(const Tensor& t) { return t.dim(0) ? t.size() / t.dim(0) : 0; }

inline std::span<float> row(Tensor& t, std::size_t i) {
  const std::size_t s = row_stride(t);
  return t.values().subspan(i * s, s);
}

inline Tensor masked(const Tensor& v, const Tensor& mask) {
  Tensor out = v;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return out;
}

inline void clip_to_box(const Tensor& x, Tensor& delta) {
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f) - x[i];
}

inline Tensor add_tensors(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

/// Foreground-only masks [N, H, W] for the salience term.
inline Tensor foreground_stack(std::span<const MaskPair> masks) {
  const std::size_t h = masks[0].height(), w = masks[0].width();
  Tensor out({masks.size(), h, w});
  for (std::size_t n = 0; n < masks.size(); ++n)
    std::copy(masks[n].foreground.storage().begin(), masks[n].foreground.storage().end(), out.data() + n * h * w);
  return out;
}

}  // namespace detail

/// Masks and their channel-broadcast forms for one attacked batch.
struct RegionMasks {
  Tensor fg;        // [N, C, H, W]
  Tensor bg;        // [N, C, H, W]
  Tensor fg_plane;  // [N, H, W]

  RegionMasks(std::span<const MaskPair> masks, const Tensor& batch) {
    if (batch.rank() != 4) throw ShapeError("attack: batch must be NCHW, got " + shape_string(batch.shape()));
    if (masks.size() != batch.dim(0)) {
      throw ShapeError("attack: " + std::to_string(masks.size()) + " masks for a batch of " +
                       std::to_string(batch.dim(0)));
    }
    for (const MaskPair& m : masks) {
      if (m.height() != batch.dim(2) || m.width() != batch.dim(3)) {
        throw ShapeError("attack: mask height/width " + shape_string(m.foreground.shape()) +
                         " do not match the image");
      }
    }
    auto [f, b] = stack_masks(masks, batch.dim(1));
    fg = std::move(f);
    bg = std::move(b);
    fg_plane = detail::foreground_stack(masks);
  }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

// One region's random start, uniform in the eps-ball restricted to the mask.
// Draw count is independent of the mask and eps, so starts are shared across
// budgets and partitions with the same seed.
inline void sample_region(std::span<float> out, std::span<const float> mask, float eps, Norm p, Rng& rng) {
  if (p == Norm::linf) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<float>(eps * uniform(rng, -1.0, 1.0)) * mask[i];
    }
    return;
  }
  std::vector<double> z(out.size());
  for (double& v : z) v = normal(rng);
  const double u = uniform01(rng);
  double sq = 0.0;
  std::size_t dim = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (mask[i] != 0.0f) {
      sq += z[i] * z[i];
      ++dim;
    }
  }
  if (dim == 0 || sq == 0.0) {
    std::fill(out.begin(), out.end(), 0.0f);
    return;
  }
  const double radius = eps * std::pow(u, 1.0 / static_cast<double>(dim));
  const double s = radius / std::sqrt(sq);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(z[i] * s) * mask[i];
  project_inplace(out, eps, p);
}

}  // namespace detail

inline Perturbation init_dual(const Tensor& x, const RegionMasks& masks, const AttackConfig& cfg) {
  Perturbation d{Tensor(x.shape(), 0.0f)};
  if (!cfg.random_start) return d;
  Rng rng = make_rng(cfg.seed, 0xA77A);
  const std::size_t n = x.dim(0), stride = detail::row_stride(x);
  std::vector<float> part_f(stride), part_b(stride);
  for (std::size_t i = 0; i < n; ++i) {
    const std::span<const float> f = masks.fg.values().subspan(i * stride, stride);
    const std::span<const float> b = masks.bg.values().subspan(i * stride, stride);
    detail::sample_region(part_f, f, cfg.eps_fg, cfg.norm, rng);
    detail::sample_region(part_b, b, cfg.eps_bg, cfg.norm, rng);
    for (std::size_t j = 0; j < stride; ++j) d.delta[i * stride + j] = part_f[j] + part_b[j];
  }
  detail::clip_to_box(x, d.delta);
  return d;
}

inline Perturbation init_dual(const Tensor& x, std::span<const MaskPair> masks, const AttackConfig& cfg) {
  return init_dual(x, RegionMasks(masks, x), cfg);
}

// ---------------------------------------------------------------------------
// Objective and its gradient
// ---------------------------------------------------------------------------

struct ObjectiveValue {
  Tensor gradient;  // dJ/dx at the evaluated point
  double loss = 0.0;
  double salience = 0.0;  // sum of foreground scores over the batch
};

/// J = sum_n L(h(x_n), y_n) + lambda * sum_n S(x_n), differentiated w.r.t. x.
template <Classifier M>
ObjectiveValue objective_gradient(const M& model, const Tensor& x_eval, std::span<const int> labels,
                                  const Tensor& fg_plane, float lambda, const SalienceModel& salience) {
  Tape tape;
  Var x = tape.variable_ref(x_eval);
  Var loss = reduce_sum(softmax_cross_entropy(model.forward(tape, x), labels));
  Var objective = loss;
  double sal = 0.0;
  if (lambda != 0.0f) {
    Var fs = reduce_sum(foreground_score(tape, x, tape.constant_ref(fg_plane), salience));
    sal = tape.value(fs)[0];
    objective = add(loss, scale(fs, lambda));
  }
  ObjectiveValue out;
  out.loss = tape.value(loss)[0];
  out.salience = sal;
  GradientSet g = backward(tape, objective);
  out.gradient = g.take(x);
  return out;
}

/// Mean objective J over a batch (reported by evaluation and monotonicity checks).
template <Classifier M>
double attack_objective(const M& model, const Tensor& x_eval, std::span<const int> labels,
                        std::span<const MaskPair> masks, float lambda, const SalienceModel& salience = {}) {
  Tape tape;
  Var x = tape.constant_ref(x_eval);
  double j = tape.value(reduce_sum(softmax_cross_entropy(model.forward(tape, x), labels)))[0];
  if (lambda != 0.0f) {
    const Tensor fg = detail::foreground_stack(masks);
    j += lambda * tape.value(reduce_sum(foreground_score(tape, x, tape.constant_ref(fg), salience)))[0];
  }
  return j / static_cast<double>(x_eval.dim(0));
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

/// Split / per-region normalized step / project / merge / box-clip / re-project.
inline Perturbation dual_update(const Tensor& x, const Perturbation& current, const Tensor& gradient,
                                const RegionMasks& masks, const AttackConfig& cfg) {
  const std::size_t n = x.dim(0);
  Tensor g_f = detail::masked(gradient, masks.fg);
  Tensor g_b = detail::masked(gradient, masks.bg);
  Tensor d_f = detail::masked(current.delta, masks.fg);
  Tensor d_b = detail::masked(current.delta, masks.bg);
  const float a_f = cfg.step_fg(), a_b = cfg.step_bg();
  for (std::size_t i = 0; i < n; ++i) {
    auto gf = detail::row(g_f, i), gb = detail::row(g_b, i);
    auto df = detail::row(d_f, i), db = detail::row(d_b, i);
    steepest_dir_inplace(gf, cfg.norm);
    steepest_dir_inplace(gb, cfg.norm);
    for (std::size_t j = 0; j < df.size(); ++j) {
      df[j] += a_f * gf[j];
      db[j] += a_b * gb[j];
    }
    project_inplace(df, cfg.eps_fg, cfg.norm);
    project_inplace(db, cfg.eps_bg, cfg.norm);
  }
  Perturbation next{detail::add_tensors(d_f, d_b)};
  detail::clip_to_box(x, next.delta);
  d_f = detail::masked(next.delta, masks.fg);
  d_b = detail::masked(next.delta, masks.bg);
  for (std::size_t i = 0; i < n; ++i) {
    project_inplace(detail::row(d_f, i), cfg.eps_fg, cfg.norm);
    project_inplace(detail::row(d_b, i), cfg.eps_bg, cfg.norm);
  }
  next.delta = detail::add_tensors(d_f, d_b);
  return next;
}

template <Classifier M>
Perturbation dual_step(const M& model, const Tensor& x, std::span<const int> labels, const Perturbation& current,
                       const RegionMasks& masks, const AttackConfig& cfg) {
  const Tensor x_eval = detail::add_tensors(x, current.delta);
  const ObjectiveValue obj = objective_gradient(model, x_eval, labels, masks.fg_plane, cfg.lambda, cfg.salience);
  return dual_update(x, current, obj.gradient, masks, cfg);
}

inline Tensor apply_perturbation(const Tensor& x, const Perturbation& d) {
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + d.delta[i], 0.0f, 1.0f);
  return out;
}

namespace detail {

inline void check_labels(const Tensor& x, std::span<const int> labels) {
  if (x.rank() != 4) throw ShapeError("attack: batch must be NCHW, got " + shape_string(x.shape()));
  if (labels.size() != x.dim(0)) throw ShapeError("attack: label count does not match batch dimension");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Attacks
// ---------------------------------------------------------------------------

/// K dual steps from init_dual; returns the final iterate x + d in [0, 1].
template <Classifier M>
Tensor dual_attack(const M& model, const Tensor& x, std::span<const int> labels, std::span<const MaskPair> masks,
                   const AttackConfig& cfg) {
  cfg.validate();
  detail::check_labels(x, labels);
  const RegionMasks rm(masks, x);
  Perturbation d = init_dual(x, rm, cfg);
  for (std::size_t k = 0; k < cfg.steps; ++k) d = dual_step(model, x, labels, d, rm, cfg);
  return apply_perturbation(x, d);
}

/// Whole-image PGD with budget cfg.eps_fg.
template <Classifier M>
Tensor pgd_attack(const M& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  detail::check_labels(x, labels);
  const std::vector<MaskPair> masks(x.dim(0), MaskPair::all_foreground(x.dim(2), x.dim(3)));
  AttackConfig c = cfg;
  c.lambda = 0.0f;
  return dual_attack(model, x, labels, masks, c);
}

// ---------------------------------------------------------------------------
// Randomized-smoothing variant: gradients averaged over Gaussian noise draws.
// ---------------------------------------------------------------------------

inline Tensor sample_noise(const Shape& shape, float sigma, Rng& rng) {
  Tensor eta(shape);
  for (float& v : eta.values()) v = static_cast<float>(normal(rng, 0.0, sigma));
  return eta;
}

/// Monte-Carlo estimate of grad E_eta[J(x_eval + eta)] with `samples` draws from `rng`.
template <Classifier M>
Tensor rs_objective_gradient(const M& model, const Tensor& x_eval, std::span<const int> labels, const Tensor& fg_plane,
                             const AttackConfig& cfg, float sigma, std::size_t samples, Rng& rng) {
  if (sigma == 0.0f) {
    return objective_gradient(model, x_eval, labels, fg_plane, cfg.lambda, cfg.salience).gradient;
  }
  std::vector<double> acc(x_eval.size(), 0.0);
  for (std::size_t j = 0; j < samples; ++j) {
    const Tensor eta = sample_noise(x_eval.shape(), sigma, rng);
    const Tensor g =
        objective_gradient(model, detail::add_tensors(x_eval, eta), labels, fg_plane, cfg.lambda, cfg.salience)
            .gradient;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }
  Tensor out(x_eval.shape());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(samples));
  return out;
}

inline Rng rs_noise_rng(const AttackConfig& cfg) { return make_rng(cfg.seed, 0x0015E); }

/// Dual attack on a smoothed classifier. Noise only enters the gradient
/// estimate; the returned example is x + d without noise.
template <Classifier M>
Tensor rs_dual_attack(const M& model, const Tensor& x, std::span<const int> labels, std::span<const MaskPair> masks,
                      const AttackConfig& cfg, float sigma, std::size_t samples) {
  cfg.validate();
  detail::check_labels(x, labels);
  if (!(sigma >= 0.0f) || !std::isfinite(sigma)) throw ArgumentError("rs attack: sigma must be nonnegative");
  if (samples == 0) throw ArgumentError("rs attack: need at least one noise sample");
  const RegionMasks rm(masks, x);
  Perturbation d = init_dual(x, rm, cfg);
  Rng rng = rs_noise_rng(cfg);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const Tensor g =
        rs_objective_gradient(model, detail::add_tensors(x, d.delta), labels, rm.fg_plane, cfg, sigma, samples, rng);
    d = dual_update(x, d, g, rm, cfg);
  }
  return apply_perturbation(x, d);
}

// ---------------------------------------------------------------------------
// Greedy single-coordinate saliency attack (l0-bounded)
// ---------------------------------------------------------------------------

struct JsmaResult {
  Tensor adversarial;  // [1, C, H, W]
  std::size_t modified_pixels = 0;
  bool success = false;
};

/// Repeatedly moves the unsaturated pixel-channel with the largest |dL/dx| by
/// theta toward higher loss, touching at most `budget` pixel positions.
template <Classifier M>
JsmaResult jsma_attack(const M& model, const Tensor& x, int label, std::size_t budget, float theta) {
  if (budget == 0) throw ArgumentError("jsma: budget must be at least 1");
  if (!(theta > 0.0f && theta <= 1.0f)) throw ArgumentError("jsma: theta must be in (0, 1]");
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("jsma: expects a single [1, C, H, W] image");
  const std::size_t c = x.dim(1), plane = x.dim(2) * x.dim(3);
  JsmaResult res{x, 0, false};
  std::vector<char> touched(plane, 0);
  const std::size_t max_iters = budget * c * static_cast<std::size_t>(std::ceil(1.0f / theta)) + 1;
  const int labels[1] = {label};
  for (std::size_t it = 0; it < max_iters; ++it) {
    Tape tape;
    Var xv = tape.variable_ref(res.adversarial);
    Var logits = model.forward(tape, xv);
    if (argmax_rows(tape.value(logits))[0] != label) {
      res.success = true;
      break;
    }
    Var loss = reduce_sum(softmax_cross_entropy(logits, labels));
    GradientSet gs = backward(tape, loss);
    const Tensor& g = gs.at(xv);
    std::size_t best = std::numeric_limits<std::size_t>::max();
    float best_mag = 0.0f;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t pos = i % plane;
      if (!touched[pos] && res.modified_pixels >= budget) continue;
      const float gi = g[i], xi = res.adversarial[i];
      const bool movable = (gi > 0.0f && xi < 1.0f) || (gi < 0.0f && xi > 0.0f);
      if (movable && std::fabs(gi) > best_mag) {
        best_mag = std::fabs(gi);
        best = i;
      }
    }
    if (best == std::numeric_limits<std::size_t>::max()) break;
    const float dir = g[best] > 0.0f ? 1.0f : -1.0f;
    res.adversarial[best] = std::clamp(res.adversarial[best] + dir * theta, 0.0f, 1.0f);
    if (!touched[best % plane]) {
      touched[best % plane] = 1;
      ++res.modified_pixels;
    }
  }
  if (!res.success) res.success = predict_class(model, res.adversarial)[0] != label;
  return res;
}

/// jsma_attack over every image of a batch.
template <Classifier M>
Tensor jsma_attack_batch(const M& model, const Tensor& x, std::span<const int> labels, std::size_t budget,
                         float theta, std::vector<std::size_t>* modified = nullptr) {
  detail::check_labels(x, labels);
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    JsmaResult r = jsma_attack(model, x.slice(i, 1), labels[i], budget, theta);
    if (modified) modified->push_back(r.modified_pixels);
    parts.push_back(std::move(r.adversarial));
  }
  return concat_rows(parts);
}

}  // namespace dualpert
