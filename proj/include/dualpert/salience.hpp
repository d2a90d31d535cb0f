#pragma once

// Differentiable salience proxy and foreground/background partitions.
//
// The default proxy is a difference-of-Gaussians contrast energy
//   e_i = sum_c (blur(x, 1) - blur(x, 4))^2,   s_i = (e_i + k) / sum_j (e_j + k)
// with k = 1e-8. A small learned fixation net is available as an alternative;
// its squared output goes through the same normalization.

#include <cmath>
#include <filesystem>
#include <memory>
#include <string>

#include "dualpert/autodiff.hpp"
#include "dualpert/data.hpp"
#include "dualpert/format.hpp"
#include "dualpert/log.hpp"
#include "dualpert/mask.hpp"
#include "dualpert/model.hpp"

namespace dualpert {

inline constexpr double kCenterSigma = 1.0;
inline constexpr double kSurroundSigma = 4.0;
inline constexpr float kDensityFloor = 1e-8f;

inline int blur_radius(double sigma) { return static_cast<int>(std::ceil(3.0 * sigma)); }

enum class SalienceMethod { dog, learned };

inline SalienceMethod parse_salience_method(const std::string& s) {
  if (s == "dog") return SalienceMethod::dog;
  if (s == "learned") return SalienceMethod::learned;
  throw ArgumentError("unknown salience method '" + s + "' (expected dog or learned)");
}

inline const char* to_string(SalienceMethod m) { return m == SalienceMethod::dog ? "dog" : "learned"; }

// ---------------------------------------------------------------------------
// Learned fixation net: conv(3->8, 3x3) - relu - conv(8->1, 3x3), squared.
// ---------------------------------------------------------------------------

struct FixationNet {
  std::vector<Tensor> tensors;  // w1 [8,3,3,3], b1 [8], w2 [1,8,3,3], b2 [1]

  static constexpr std::size_t kHidden = 8;

  static FixationNet init(std::uint64_t seed) {
    Rng rng = make_rng(seed, 0xF1C5);
    FixationNet net;
    const float b1 = static_cast<float>(std::sqrt(6.0 / 27.0));
    const float b2 = static_cast<float>(std::sqrt(6.0 / (kHidden * 9.0)));
    net.tensors.push_back(random_uniform({kHidden, 3, 3, 3}, rng, -b1, b1));
    net.tensors.emplace_back(Shape{kHidden}, 0.0f);
    net.tensors.push_back(random_uniform({1, kHidden, 3, 3}, rng, -b2, b2));
    net.tensors.emplace_back(Shape{1}, 0.0f);
    return net;
  }

  /// Nonnegative energy map [N, H, W].
  Var energy(Tape& tape, Var x, std::span<const Var> p) const {
    const Tensor& xv = tape.value(x);
    if (xv.rank() != 4 || xv.dim(1) != 3) throw ShapeError("fixation net expects N×3×H×W input");
    Var h = relu(add_bias(conv2d(x, p[0], {1, 1}), p[1]));
    h = add_bias(conv2d(h, p[2], {1, 1}), p[3]);
    return reshape(square(h), {xv.dim(0), xv.dim(2), xv.dim(3)});
  }
};

inline void save_fixation_net(const std::filesystem::path& path, const FixationNet& net) {
  std::vector<std::uint8_t> bytes;
  for (const Tensor& t : net.tensors) encode_tensor(t, bytes);
  write_file_bytes(path, bytes);
}

inline FixationNet load_fixation_net(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const FixationNet ref = FixationNet::init(0);
  FixationNet net;
  std::size_t offset = 0;
  for (const Tensor& r : ref.tensors) {
    Tensor t = decode_tensor(bytes, offset);
    if (t.shape() != r.shape()) throw FormatError(FormatError::Kind::inconsistent, "fixation net: bad tensor shape");
    net.tensors.push_back(std::move(t));
  }
  if (offset != bytes.size()) throw FormatError(FormatError::Kind::length_mismatch, "fixation net: trailing bytes");
  return net;
}

/// Which salience model to run; `net` is required for the learned method.
struct SalienceModel {
  SalienceMethod method = SalienceMethod::dog;
  std::shared_ptr<const FixationNet> net;
};

// ---------------------------------------------------------------------------
// Densities
// ---------------------------------------------------------------------------

inline Var dog_energy(Var x) {
  Var center = gaussian_blur(x, kCenterSigma, blur_radius(kCenterSigma));
  Var surround = gaussian_blur(x, kSurroundSigma, blur_radius(kSurroundSigma));
  return channel_sum(square(sub(center, surround)));
}

/// Taped density [N, H, W] for an NCHW batch; each image's map sums to 1.
inline Var salience_density(Tape& tape, Var x, const SalienceModel& model = {}) {
  if (tape.value(x).rank() != 4) throw ShapeError("salience: expected NCHW input");
  switch (model.method) {
    case SalienceMethod::dog:
      return normalize_density(dog_energy(x), kDensityFloor);
    case SalienceMethod::learned: {
      if (!model.net) throw ArgumentError("salience: learned method selected without a fixation net");
      const auto p = [&] {
        std::vector<Var> v;
        for (const Tensor& t : model.net->tensors) v.push_back(tape.constant_ref(t));
        return v;
      }();
      return normalize_density(model.net->energy(tape, x, p), kDensityFloor);
    }
  }
  throw ArgumentError("salience: unknown method");
}

struct SalienceMap {
  Tensor density;  // [H, W]

  float min() const { return *std::min_element(density.storage().begin(), density.storage().end()); }
  float max() const { return *std::max_element(density.storage().begin(), density.storage().end()); }
};

namespace detail {

inline Tensor as_batch(const Tensor& x) {
  if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() == 4 && x.dim(0) == 1) return x;
  throw ShapeError("expected a single CHW image, got " + shape_string(x.shape()));
}

inline void require_pixel_range(const Tensor& x) {
  for (float v : x.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("salience: pixel value outside [0, 1]");
  }
}

}  // namespace detail

inline SalienceMap salience_map(const Tensor& image, const SalienceModel& model = {}) {
  Tensor x = detail::as_batch(image);
  detail::require_pixel_range(x);
  Tape tape;
  Var s = salience_density(tape, tape.constant_ref(x), model);
  return SalienceMap{tape.value(s).reshaped({x.dim(2), x.dim(3)})};
}

/// Taped per-image foreground score [N]: sum of density over F. `fg` is [N, H, W].
inline Var foreground_score(Tape& tape, Var x, Var fg, const SalienceModel& model = {}) {
  return row_sum(mul(salience_density(tape, x, model), fg));
}

inline float foreground_score(const Tensor& image, const MaskPair& mask, const SalienceModel& model = {}) {
  Tensor x = detail::as_batch(image);
  if (mask.height() != x.dim(2) || mask.width() != x.dim(3)) {
    throw ShapeError("foreground_score: mask " + shape_string(mask.foreground.shape()) + " vs image height/width " +
                     std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
  }
  detail::require_pixel_range(x);
  Tape tape;
  Var fs = foreground_score(tape, tape.constant_ref(x),
                            tape.constant(mask.foreground.reshaped({1, mask.height(), mask.width()})), model);
  return tape.value(fs)[0];
}

/// Foreground score of an already-computed density (used by tests and reporting).
inline float foreground_score(const SalienceMap& s, const MaskPair& mask) {
  if (s.density.shape() != mask.foreground.shape()) throw ShapeError("foreground_score: map and mask extents differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < s.density.size(); ++i) acc += s.density[i] * mask.foreground[i];
  return static_cast<float>(acc);
}

/// Threshold t = (s_min + s_max) / 2; pixels with s_i > t form the foreground.
/// A map with no pixel above t falls back to all-foreground with a warning.
inline MaskPair threshold_masks(const SalienceMap& s) {
  const double t = 0.5 * (static_cast<double>(s.min()) + static_cast<double>(s.max()));
  Tensor fg(s.density.shape());
  std::size_t count = 0;
  for (std::size_t i = 0; i < fg.size(); ++i) {
    const bool in = static_cast<double>(s.density[i]) > t;
    fg[i] = in ? 1.0f : 0.0f;
    count += in;
  }
  if (count == 0) {
    log_warning("fixation threshold selected no pixels (flat salience map); using an all-foreground mask");
    return MaskPair::all_foreground(s.density.dim(0), s.density.dim(1));
  }
  return MaskPair::from_foreground(fg);
}

inline MaskPair fixation_masks(const Tensor& image, const SalienceModel& model = {}) {
  return threshold_masks(salience_map(image, model));
}

/// Binary mask from a single-tensor DPT file ([H, W] or [1, H, W]); values > 0.5 are foreground.
inline MaskPair masks_from_segmentation(const std::filesystem::path& path, std::size_t height, std::size_t width) {
  Tensor t = load_tensor(path);
  if (t.rank() == 3 && t.dim(0) == 1) t = t.reshaped({t.dim(1), t.dim(2)});
  if (t.rank() != 2 || t.dim(0) != height || t.dim(1) != width) {
    throw ShapeError("segmentation mask " + path.string() + " has extents " + shape_string(t.shape()) +
                     ", expected [" + std::to_string(height) + "," + std::to_string(width) + "]");
  }
  return MaskPair::from_foreground(t, 0.5f);
}

inline double mask_iou(const MaskPair& a, const MaskPair& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.foreground.size(); ++i) {
    const bool x = a.foreground[i] == 1.0f, y = b.foreground[i] == 1.0f;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Fixation-net training against ground-truth masks
// ---------------------------------------------------------------------------

struct FixationTrainConfig {
  std::size_t epochs = 5;
  std::size_t batch = 32;
  float learning_rate = 3e-3f;
  std::uint64_t seed = 0;
};

/// Per-image squared error between predicted density and the normalized
/// ground-truth mask, scaled by H·W; mean over the batch.
inline Var fixation_loss(Tape& tape, const FixationNet& net, std::span<const Var> p, const Tensor& images,
                         const Tensor& target_density) {
  Var s = normalize_density(net.energy(tape, tape.constant_ref(images), p), kDensityFloor);
  Var diff = sub(s, tape.constant_ref(target_density));
  const float hw = static_cast<float>(images.dim(2) * images.dim(3));
  return scale(reduce_sum(square(diff)), hw / static_cast<float>(images.dim(0)));
}

inline Tensor target_density(const Tensor& masks) {
  Tensor t = masks;
  const std::size_t n = t.dim(0), plane = t.size() / n;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = sum64(t.values().subspan(i * plane, plane));
    for (std::size_t j = 0; j < plane; ++j) {
      t[i * plane + j] = z > 0 ? static_cast<float>(t[i * plane + j] / z) : 1.0f / static_cast<float>(plane);
    }
  }
  return t;
}

inline FixationNet train_fixation_net(const Dataset& data, const FixationTrainConfig& cfg,
                                      std::vector<float>* epoch_losses = nullptr) {
  if (!data.masks) throw ArgumentError("fixation net training needs ground-truth masks");
  if (data.size() == 0) throw ArgumentError("fixation net training needs a nonempty dataset");
  FixationNet net = FixationNet::init(cfg.seed);
  OptimizerState opt = OptimizerState::for_parameters(net.tensors, cfg.learning_rate);
  Rng rng = make_rng(cfg.seed, 0xF1C6);
  const Tensor targets = target_density(*data.masks);
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - first);
      std::span<const std::size_t> idx(order.data() + first, count);
      const Tensor x = data.images.gather(idx);
      const Tensor t = targets.gather(idx);
      Tape tape;
      std::vector<Var> p;
      for (const Tensor& w : net.tensors) p.push_back(tape.variable_ref(w));
      Var loss = fixation_loss(tape, net, p, x, t);
      total += tape.value(loss)[0] * static_cast<double>(count);
      GradientSet g = backward(tape, loss);
      const auto grads = gradients_for(g, p, tape);
      adam_step(std::span<Tensor>(net.tensors), grads, opt);
    }
    if (epoch_losses) epoch_losses->push_back(static_cast<float>(total / static_cast<double>(data.size())));
  }
  return net;
}

}  // namespace dualpert
