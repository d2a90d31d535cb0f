#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dualpert/format.hpp"
#include "dualpert/mask.hpp"
#include "dualpert/tensor.hpp"

namespace dualpert {

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct Dataset {
  Tensor images;               // [N, C, H, W], values in [0, 1]
  std::vector<int> labels;     // N entries in [0, classes)
  std::optional<Tensor> masks; // [N, H, W], 1 = foreground
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  void validate() const {
    if (images.rank() != 4) throw ShapeError("dataset images must be NCHW, got " + shape_string(images.shape()));
    if (images.dim(0) != labels.size()) {
      throw FormatError(FormatError::Kind::inconsistent,
                        "dataset: " + std::to_string(images.dim(0)) + " images but " + std::to_string(labels.size()) +
                            " labels");
    }
    for (float v : images.values()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("dataset: pixel outside [0, 1]");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ArgumentError("dataset: label out of range");
    }
    if (masks) {
      const Shape expect{images.dim(0), images.dim(2), images.dim(3)};
      if (masks->shape() != expect) {
        throw FormatError(FormatError::Kind::inconsistent, "dataset: mask extents " + shape_string(masks->shape()) +
                                                               " do not match images " + shape_string(expect));
      }
    }
  }

  Tensor image(std::size_t i) const { return images.slice(i, 1); }

  MaskPair mask_pair(std::size_t i) const {
    if (!masks) throw ArgumentError("dataset has no ground-truth masks");
    return MaskPair::from_foreground(masks->slice(i, 1).reshaped({height(), width()}));
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.images = images.gather(idx);
    for (std::size_t i : idx) d.labels.push_back(labels.at(i));
    if (masks) d.masks = masks->gather(idx);
    d.classes = classes;
    return d;
  }
};

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

enum class ShapeKind { disk, square, triangle, cross, ring, bar, diamond, frame, x_cross, half_disk };

inline constexpr std::array<const char*, 10> kShapeNames = {
    "disk", "square", "triangle", "cross", "ring", "bar", "diamond", "frame", "x_cross", "half_disk"};

struct ShapeInstance {
  ShapeKind kind = ShapeKind::disk;
  double cx = 0.0, cy = 0.0;  // centre in pixel coordinates
  double size = 0.0;          // half-extent
  bool vertical = false;      // bars only
  double stroke = 1.0;        // half-width of arms, bars and outlines
  std::array<float, 3> color{};
};

/// Half-extent of a shape relative to its size parameter. Crosses get longer
/// arms so their intersection does not dominate a contrast-energy map.
inline double shape_extent_factor(ShapeKind kind) { return kind == ShapeKind::cross ? 1.4 : 1.0; }

/// Coverage test at a point; the rasterizer samples pixel centres (x+0.5, y+0.5).
inline bool shape_contains(const ShapeInstance& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  const double adx = std::fabs(dx), ady = std::fabs(dy);
  const double r = std::hypot(dx, dy);
  const double arm = s.stroke;
  switch (s.kind) {
    case ShapeKind::disk:
      return r <= s.size;
    case ShapeKind::square:
      return adx <= 0.8 * s.size && ady <= 0.8 * s.size;
    case ShapeKind::triangle: {
      const double top = s.cy - s.size;
      return py >= top && py <= s.cy + s.size && adx <= 0.5 * (py - top);
    }
    case ShapeKind::cross:
    {
      const double len = shape_extent_factor(s.kind) * s.size;
      return (adx <= arm && ady <= len) || (ady <= arm && adx <= len);
    }
    case ShapeKind::ring:
      return r <= s.size && r >= s.size - 2.0 * arm;
    case ShapeKind::bar:
      return s.vertical ? (adx <= arm && ady <= s.size) : (ady <= arm && adx <= s.size);
    case ShapeKind::diamond:
      return adx + ady <= s.size;
    case ShapeKind::frame: {
      const double m = std::max(adx, ady), outer = 0.85 * s.size;
      return m <= outer && m > outer - 2.0 * arm;
    }
    case ShapeKind::x_cross:
      return adx <= 0.8 * s.size && ady <= 0.8 * s.size &&
             (std::fabs(dx - dy) <= arm * std::numbers::sqrt2 || std::fabs(dx + dy) <= arm * std::numbers::sqrt2);
    case ShapeKind::half_disk:
      return r <= s.size && dy >= 0.0;
  }
  return false;
}

struct SynthConfig {
  std::size_t classes = 6;
  std::size_t samples = 3000;
  std::size_t height = 32;
  std::size_t width = 32;
  float texture_amplitude = 0.15f;  // background sinusoid amplitude
  float separation = 0.25f;         // min |foreground channel - 0.5|
  double min_size = 5.0;
  double max_size = 7.0;
  double stroke = 1.0;  // half-width of thin parts
  std::size_t min_pixels = 12;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2 || classes > kShapeNames.size()) throw ArgumentError("synth: classes must be in [2, 10]");
    if (samples < 2 * classes) throw ArgumentError("synth: need at least 2 samples per class");
    if (height < 8 || width < 8) throw ArgumentError("synth: image too small");
    if (!(separation >= 0.0f && separation < 0.45f)) throw ArgumentError("synth: separation must be in [0, 0.45)");
    if (!(texture_amplitude >= 0.0f && texture_amplitude <= 0.5f)) {
      throw ArgumentError("synth: texture amplitude must be in [0, 0.5]");
    }
    if (!(min_size > 0.0 && min_size <= max_size)) throw ArgumentError("synth: invalid size range");
  }
};

struct RenderedSample {
  Tensor image;  // [C, H, W]
  Tensor mask;   // [H, W]
  ShapeInstance shape;
};

/// Renders one sample of class `label`. Resamples placements whose coverage
/// is below `min_pixels`; gives up after a bounded number of tries.
inline RenderedSample render_sample(const SynthConfig& cfg, int label, Rng& rng) {
  const std::size_t h = cfg.height, w = cfg.width, plane = h * w;
  RenderedSample out{Tensor({3, h, w}), Tensor({h, w}), {}};

  // low-frequency background: 2-4 plane waves with wavelengths of 32-64 px per channel
  for (std::size_t c = 0; c < 3; ++c) {
    const int waves = 2 + static_cast<int>(uniform01(rng) * 3.0);
    std::vector<std::array<double, 4>> params;
    for (int j = 0; j < waves; ++j) {
      const double lambda = uniform(rng, 32.0, 64.0);
      const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      params.push_back({std::cos(angle) / lambda, std::sin(angle) / lambda, uniform(rng, 0.0, 2.0 * std::numbers::pi),
                        uniform(rng, 0.5, 1.0)});
    }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double v = 0.0;
        for (const auto& p : params) v += p[3] * std::sin(2.0 * std::numbers::pi * (p[0] * x + p[1] * y) + p[2]);
        out.image[c * plane + y * w + x] =
            std::clamp(static_cast<float>(0.5 + cfg.texture_amplitude * v / waves), 0.0f, 1.0f);
      }
  }

  ShapeInstance s;
  s.kind = static_cast<ShapeKind>(label);
  s.stroke = cfg.stroke;
  const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
  for (auto& ch : s.color) {
    ch = static_cast<float>(0.5 + sign * (cfg.separation + uniform01(rng) * (0.45 - cfg.separation)));
  }
  constexpr int kMaxTries = 100;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxTries) {
      throw Error(std::string("synth: could not place a ") + kShapeNames[label] + " after " +
                  std::to_string(kMaxTries) + " tries");
    }
    s.size = uniform(rng, cfg.min_size, cfg.max_size);
    s.vertical = uniform01(rng) < 0.5;
    const double margin = shape_extent_factor(s.kind) * s.size + 1.0;
    if (2.0 * margin >= static_cast<double>(std::min(h, w))) continue;
    // centres sit on pixel corners so strokes cover a whole number of pixels
    s.cx = std::round(uniform(rng, margin, static_cast<double>(w) - margin));
    s.cy = std::round(uniform(rng, margin, static_cast<double>(h) - margin));
    std::size_t covered = 0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) covered += shape_contains(s, x + 0.5, y + 0.5);
    if (covered >= cfg.min_pixels) break;
  }
  out.shape = s;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!shape_contains(s, x + 0.5, y + 0.5)) continue;
      out.mask[y * w + x] = 1.0f;
      for (std::size_t c = 0; c < 3; ++c) out.image[c * plane + y * w + x] = s.color[c];
    }
  return out;
}

/// Balanced synthetic dataset: sample i has label i mod k.
inline Dataset gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng = make_rng(cfg.seed, 0x5EED);
  const std::size_t n = cfg.samples, h = cfg.height, w = cfg.width;
  Dataset d;
  d.classes = cfg.classes;
  d.images = Tensor({n, 3, h, w});
  d.masks = Tensor({n, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % cfg.classes);
    RenderedSample s = render_sample(cfg, label, rng);
    std::copy(s.image.storage().begin(), s.image.storage().end(), d.images.data() + i * 3 * h * w);
    std::copy(s.mask.storage().begin(), s.mask.storage().end(), d.masks->data() + i * h * w);
    d.labels.push_back(label);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

inline std::pair<Dataset, Dataset> split(const Dataset& d, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ArgumentError("split: fraction must be in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(d.classes);
  for (std::size_t i = 0; i < d.size(); ++i) by_class.at(d.labels[i]).push_back(i);
  Rng rng = make_rng(seed, 0x5917);
  std::vector<std::size_t> train, test;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2) throw ArgumentError("split: class " + std::to_string(c) + " has fewer than 2 samples");
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    train.insert(train.end(), idx.begin(), idx.begin() + static_cast<long>(n_train));
    test.insert(test.end(), idx.begin() + static_cast<long>(n_train), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {d.subset(train), d.subset(test)};
}

// ---------------------------------------------------------------------------
// key=value text files ('#' comments, LF line endings)
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(FormatError::Kind::inconsistent, "line " + std::to_string(lineno) + ": expected key=value");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directories: images.dpt, labels.dpt, optional masks.dpt, meta.txt
// ---------------------------------------------------------------------------

inline void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  d.validate();
  std::filesystem::create_directories(dir);
  save_tensor(dir / "images.dpt", d.images);
  Tensor labels({d.size()});
  for (std::size_t i = 0; i < d.size(); ++i) labels[i] = static_cast<float>(d.labels[i]);
  save_tensor(dir / "labels.dpt", labels);
  if (d.masks) {
    save_tensor(dir / "masks.dpt", *d.masks);
  } else {
    std::filesystem::remove(dir / "masks.dpt");
  }
  std::ofstream meta(dir / "meta.txt", std::ios::binary | std::ios::trunc);
  meta << "# dataset metadata\n";
  meta << "k=" << d.classes << "\n";
  meta << "n=" << d.size() << "\n";
  if (!meta) throw FormatError(FormatError::Kind::io, "cannot write " + (dir / "meta.txt").string());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  using K = FormatError::Kind;
  for (const char* f : {"meta.txt", "images.dpt", "labels.dpt"}) {
    if (!std::filesystem::exists(dir / f)) {
      throw FormatError(K::io, "dataset: missing required file " + (dir / f).string());
    }
  }
  const auto bytes = read_file_bytes(dir / "meta.txt");
  const auto meta = parse_key_values(std::string(bytes.begin(), bytes.end()));
  auto number = [&](const char* key) -> std::size_t {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError(K::inconsistent, std::string("dataset meta: missing key ") + key);
    try {
      return static_cast<std::size_t>(std::stoull(it->second));
    } catch (const std::exception&) {
      throw FormatError(K::inconsistent, std::string("dataset meta: bad value for ") + key);
    }
  };
  Dataset d;
  d.classes = number("k");
  d.images = load_tensor(dir / "images.dpt");
  const Tensor labels = load_tensor(dir / "labels.dpt");
  if (d.images.rank() != 4) throw FormatError(K::inconsistent, "dataset: images.dpt must be NCHW");
  if (labels.rank() != 1 || labels.dim(0) != d.images.dim(0)) {
    throw FormatError(K::inconsistent, "dataset: images.dpt holds " + std::to_string(d.images.dim(0)) +
                                           " images but labels.dpt holds " + std::to_string(labels.size()));
  }
  if (number("n") != d.images.dim(0)) throw FormatError(K::inconsistent, "dataset: meta n disagrees with images.dpt");
  for (float v : labels.values()) {
    if (v != std::floor(v) || v < 0.0f) throw FormatError(K::inconsistent, "dataset: non-integral label");
    d.labels.push_back(static_cast<int>(v));
  }
  if (std::filesystem::exists(dir / "masks.dpt")) d.masks = load_tensor(dir / "masks.dpt");
  try {
    d.validate();
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(K::inconsistent, std::string("dataset: ") + e.what());
  }
  return d;
}

}  // namespace dualpert
