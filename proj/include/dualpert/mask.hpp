#pragma once

#include "dualpert/tensor.hpp"

namespace dualpert {

/// Complementary binary partition of an H×W grid: foreground F and
/// background B with F·B = 0 and F + B = 1 exactly.
struct MaskPair {
  Tensor foreground;  // [H, W], 1 = foreground
  Tensor background;  // [H, W], 1 = background

  static MaskPair from_foreground(const Tensor& fg, float threshold = 0.5f) {
    if (fg.rank() != 2) throw ShapeError("mask must be [H, W], got " + shape_string(fg.shape()));
    MaskPair m{Tensor(fg.shape()), Tensor(fg.shape())};
    for (std::size_t i = 0; i < fg.size(); ++i) {
      const bool in = fg[i] > threshold;
      m.foreground[i] = in ? 1.0f : 0.0f;
      m.background[i] = in ? 0.0f : 1.0f;
    }
    return m;
  }

  static MaskPair all_foreground(std::size_t h, std::size_t w) {
    return MaskPair{Tensor::ones({h, w}), Tensor::zeros({h, w})};
  }

  std::size_t height() const { return foreground.dim(0); }
  std::size_t width() const { return foreground.dim(1); }

  std::size_t foreground_count() const {
    std::size_t n = 0;
    for (float v : foreground.values()) n += v == 1.0f;
    return n;
  }

  bool is_partition() const {
    if (foreground.shape() != background.shape() || foreground.rank() != 2) return false;
    for (std::size_t i = 0; i < foreground.size(); ++i) {
      const float f = foreground[i], b = background[i];
      if (!((f == 0.0f || f == 1.0f) && (b == 0.0f || b == 1.0f) && f * b == 0.0f && f + b == 1.0f)) return false;
    }
    return true;
  }

  /// Mask broadcast over `channels`: [C, H, W].
  Tensor expand(const Tensor& mask, std::size_t channels) const {
    Tensor out({channels, mask.dim(0), mask.dim(1)});
    for (std::size_t c = 0; c < channels; ++c)
      std::copy(mask.storage().begin(), mask.storage().end(), out.storage().begin() + c * mask.size());
    return out;
  }
};

/// Stacks per-image masks into broadcast [N, C, H, W] tensors for F and B.
inline std::pair<Tensor, Tensor> stack_masks(std::span<const MaskPair> masks, std::size_t channels) {
  if (masks.empty()) throw ShapeError("stack_masks: no masks");
  const std::size_t h = masks[0].height(), w = masks[0].width(), plane = h * w;
  Tensor f({masks.size(), channels, h, w}), b({masks.size(), channels, h, w});
  for (std::size_t n = 0; n < masks.size(); ++n) {
    if (masks[n].height() != h || masks[n].width() != w) throw ShapeError("stack_masks: mask height/width differ");
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy_n(masks[n].foreground.data(), plane, f.data() + (n * channels + c) * plane);
      std::copy_n(masks[n].background.data(), plane, b.data() + (n * channels + c) * plane);
    }
  }
  return {std::move(f), std::move(b)};
}

}  // namespace dualpert
