#pragma once

// Evaluation drivers: accuracy under attack, parameter sweeps, transfer
// matrices, gradient maps, and their CSV / PGM / PPM output.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dualpert/attack.hpp"
#include "dualpert/defense.hpp"

namespace dualpert {

/// A model under evaluation; smoothed targets predict through rs_predict.
struct EvalTarget {
  std::string name;
  ClassifierParams params;
  bool smoothed = false;
  float sigma = 0.25f;
  std::size_t n = 1;
  std::uint64_t seed = 0;

  SmoothedClassifier smoothing() const { return {params, sigma, n, 0.001, seed}; }
};

enum class AttackName { none, pgd, dual, rs, jsma };

inline AttackName parse_attack_name(const std::string& s) {
  if (s == "none") return AttackName::none;
  if (s == "pgd") return AttackName::pgd;
  if (s == "dual") return AttackName::dual;
  if (s == "rs" || s == "rs-dual") return AttackName::rs;
  if (s == "jsma") return AttackName::jsma;
  throw ArgumentError("unknown attack '" + s + "' (expected none, pgd, dual, rs or jsma)");
}

inline const char* to_string(AttackName a) {
  switch (a) {
    case AttackName::none: return "none";
    case AttackName::pgd: return "pgd";
    case AttackName::dual: return "dual";
    case AttackName::rs: return "rs";
    case AttackName::jsma: return "jsma";
  }
  return "?";
}

inline AttackConfig default_eval_attack() {
  AttackConfig a = default_training_attack();
  a.steps = 20;
  a.lambda = 1.0f;
  return a;
}

struct AttackSpec {
  AttackName kind = AttackName::none;
  AttackConfig cfg = default_eval_attack();
  float rs_sigma = 0.25f;        // used when the target is not smoothed
  std::size_t rs_samples = 8;    // noise draws per gradient estimate
  std::size_t jsma_budget = 51;  // pixel positions (5% of 32x32)
  float jsma_theta = 1.0f;
  MaskSource masks = MaskSource::automatic;

  bool uses_masks() const { return kind == AttackName::dual || kind == AttackName::rs; }
};

struct MetricsRow {
  std::string id;
  std::string model;
  std::string attack;
  std::string axis;
  std::optional<double> value;
  double clean_acc = 0.0;
  std::optional<double> adv_acc;
  std::optional<double> mean_fs;
  double seconds = 0.0;
};

inline constexpr std::size_t kAttackChunk = 100;

// ---------------------------------------------------------------------------
// Accuracy
// ---------------------------------------------------------------------------

inline std::vector<int> target_predictions(const EvalTarget& t, const Tensor& images) {
  if (t.smoothed) return rs_predict(t.smoothing(), images);
  return predict_class(t.params, images);
}

inline double accuracy_of(std::span<const int> pred, std::span<const int> labels) {
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Adversarial examples for the whole dataset, crafted against `source` in
/// fixed chunks so random starts are shared by every model attacked with the
/// same configuration.
inline Tensor generate_adversarial(const EvalTarget& source, const Dataset& data, const AttackSpec& spec,
                                   std::span<const MaskPair> masks) {
  if (spec.kind == AttackName::none) return data.images;
  if (spec.uses_masks() && masks.size() != data.size()) {
    throw ArgumentError("dual attacks need one mask per image (have " + std::to_string(masks.size()) + " for " +
                        std::to_string(data.size()) + " images)");
  }
  std::vector<Tensor> parts;
  for (std::size_t first = 0; first < data.size(); first += kAttackChunk) {
    const std::size_t count = std::min(kAttackChunk, data.size() - first);
    const Tensor x = data.images.slice(first, count);
    const std::span<const int> y(data.labels.data() + first, count);
    AttackConfig cfg = spec.cfg;
    cfg.seed = spec.cfg.seed + first;
    switch (spec.kind) {
      case AttackName::pgd:
        parts.push_back(pgd_attack(source.params, x, y, cfg));
        break;
      case AttackName::dual:
        parts.push_back(dual_attack(source.params, x, y, masks.subspan(first, count), cfg));
        break;
      case AttackName::rs:
        parts.push_back(rs_dual_attack(source.params, x, y, masks.subspan(first, count), cfg,
                                       source.smoothed ? source.sigma : spec.rs_sigma, spec.rs_samples));
        break;
      case AttackName::jsma:
        parts.push_back(jsma_attack_batch(source.params, x, y, spec.jsma_budget, spec.jsma_theta));
        break;
      case AttackName::none:
        break;
    }
  }
  return concat_rows(parts);
}

inline double mean_foreground_score(const Tensor& images, std::span<const MaskPair> masks,
                                    const SalienceModel& salience) {
  if (images.dim(0) == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < images.dim(0); ++i) total += foreground_score(images.slice(i, 1), masks[i], salience);
  return total / static_cast<double>(images.dim(0));
}

/// Clean accuracy, plus adversarial accuracy (and mean foreground score for
/// dual attacks) when an attack is given. `masks` may be empty when the
/// attack does not use them.
inline MetricsRow eval_accuracy(const EvalTarget& target, const Dataset& data, const AttackSpec& spec,
                                std::span<const MaskPair> masks) {
  data.validate();
  MetricsRow row;
  row.model = target.name;
  row.attack = to_string(spec.kind);
  row.clean_acc = accuracy_of(target_predictions(target, data.images), data.labels);
  if (spec.kind == AttackName::none) return row;
  const Tensor adv = generate_adversarial(target, data, spec, masks);
  row.adv_acc = accuracy_of(target_predictions(target, adv), data.labels);
  if (spec.uses_masks()) row.mean_fs = mean_foreground_score(adv, masks, spec.cfg.salience);
  return row;
}

inline MetricsRow eval_accuracy(const EvalTarget& target, const Dataset& data, const AttackSpec& spec) {
  std::vector<MaskPair> masks;
  if (spec.uses_masks()) masks = dataset_masks(data, spec.masks, spec.cfg.salience);
  return eval_accuracy(target, data, spec, masks);
}

// ---------------------------------------------------------------------------
// Sweeps and transfer
// ---------------------------------------------------------------------------

enum class SweepAxis { eps_f, eps_b, eps, lambda, sigma, n };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "eps_f" || s == "eps-f") return SweepAxis::eps_f;
  if (s == "eps_b" || s == "eps-b") return SweepAxis::eps_b;
  if (s == "eps") return SweepAxis::eps;
  if (s == "lambda") return SweepAxis::lambda;
  if (s == "sigma") return SweepAxis::sigma;
  if (s == "n") return SweepAxis::n;
  throw ArgumentError("unknown sweep axis '" + s + "' (expected eps_f, eps_b, eps, lambda, sigma or n)");
}

inline const char* to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::eps_f: return "eps_f";
    case SweepAxis::eps_b: return "eps_b";
    case SweepAxis::eps: return "eps";
    case SweepAxis::lambda: return "lambda";
    case SweepAxis::sigma: return "sigma";
    case SweepAxis::n: return "n";
  }
  return "?";
}

struct SweepOptions {
  std::optional<float> eps_ratio;  // when set, eps_b = ratio * eps_f for eps_f / eps axes
  bool timing = false;             // fill the seconds column (otherwise 0 for reproducible output)
  std::string id_prefix = "sweep";
};

/// One row per (model, value), models in the inner loop.
inline std::vector<MetricsRow> sweep(std::span<const EvalTarget> models, const Dataset& data, SweepAxis axis,
                                     std::span<const double> values, const AttackSpec& base,
                                     const SweepOptions& opt = {}) {
  if (values.empty()) throw ArgumentError("sweep: no values given");
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0) throw ArgumentError("sweep: values must be finite and nonnegative");
    if (axis == SweepAxis::n && (v < 1.0 || v != std::floor(v))) {
      throw ArgumentError("sweep: n values must be positive integers");
    }
  }
  std::vector<MaskPair> masks;
  if (base.uses_masks()) masks = dataset_masks(data, base.masks, base.cfg.salience);
  std::vector<MetricsRow> rows;
  std::size_t counter = 0;
  for (double v : values) {
    AttackSpec spec = base;
    const float fv = static_cast<float>(v);
    switch (axis) {
      case SweepAxis::eps_f:
      case SweepAxis::eps:
        spec.cfg.eps_fg = fv;
        if (opt.eps_ratio) spec.cfg.eps_bg = *opt.eps_ratio * fv;
        break;
      case SweepAxis::eps_b:
        spec.cfg.eps_bg = fv;
        break;
      case SweepAxis::lambda:
        spec.cfg.lambda = fv;
        break;
      case SweepAxis::sigma:
        spec.rs_sigma = fv;
        break;
      case SweepAxis::n:
        break;
    }
    for (const EvalTarget& model : models) {
      EvalTarget t = model;
      if (axis == SweepAxis::sigma) {
        t.smoothed = true;
        t.sigma = fv;
      } else if (axis == SweepAxis::n) {
        t.smoothed = true;
        t.n = static_cast<std::size_t>(v);
      }
      const auto start = std::chrono::steady_clock::now();
      MetricsRow row = eval_accuracy(t, data, spec, masks);
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
      char id[64];
      std::snprintf(id, sizeof id, "%s-%04zu", opt.id_prefix.c_str(), counter++);
      row.id = id;
      row.axis = to_string(axis);
      row.value = v;
      row.seconds = opt.timing ? dt.count() : 0.0;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

/// entry[s][t] = accuracy of model t on examples crafted against model s.
inline std::vector<std::vector<double>> transfer_matrix(std::span<const EvalTarget> models, const Dataset& data,
                                                        const AttackSpec& spec) {
  if (models.size() < 2) throw ArgumentError("transfer matrix needs at least two models");
  if (spec.kind == AttackName::none) throw ArgumentError("transfer matrix needs an attack");
  std::vector<MaskPair> masks;
  if (spec.uses_masks()) masks = dataset_masks(data, spec.masks, spec.cfg.salience);
  std::vector<std::vector<double>> m(models.size(), std::vector<double>(models.size(), 0.0));
  for (std::size_t s = 0; s < models.size(); ++s) {
    const Tensor adv = generate_adversarial(models[s], data, spec, masks);
    for (std::size_t t = 0; t < models.size(); ++t) {
      m[s][t] = accuracy_of(target_predictions(models[t], adv), data.labels);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Gradient maps
// ---------------------------------------------------------------------------

/// dL/dx for one [1, C, H, W] image at its true label.
template <Classifier M>
Tensor input_gradient(const M& model, const Tensor& image, int label) {
  Tape tape;
  Var x = tape.variable_ref(image);
  const int labels[1] = {label};
  GradientSet g = backward(tape, reduce_sum(softmax_cross_entropy(model.forward(tape, x), labels)));
  return g.take(x);
}

/// Per-pixel gradient magnitude: |g| summed over channels, [H, W].
inline Tensor gradient_magnitude(const Tensor& grad) {
  const std::size_t c = grad.dim(1), h = grad.dim(2), w = grad.dim(3);
  Tensor out({h, w}, 0.0f);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) out[i] += std::fabs(grad[ch * h * w + i]);
  }
  return out;
}

/// Share of gradient magnitude on foreground pixels; 0 for a zero gradient.
inline double foreground_concentration(const Tensor& magnitude, const MaskPair& mask) {
  double fg = 0.0, all = 0.0;
  for (std::size_t i = 0; i < magnitude.size(); ++i) {
    all += magnitude[i];
    if (mask.foreground[i] == 1.0f) fg += magnitude[i];
  }
  return all > 0.0 ? fg / all : 0.0;
}

template <Classifier M>
std::vector<double> gradient_concentration(const M& model, const Dataset& data, std::span<const MaskPair> masks) {
  std::vector<double> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.push_back(foreground_concentration(gradient_magnitude(input_gradient(model, data.image(i), data.labels[i])),
                                           masks[i]));
  }
  return out;
}

/// Min-max rescale to 0..255; a constant map becomes uniform 128.
inline std::vector<std::uint8_t> rescale_to_bytes(const Tensor& map) {
  std::vector<std::uint8_t> out(map.size(), 128);
  if (map.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.storage().begin(), map.storage().end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < map.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (map[i] - static_cast<double>(*lo)) / range));
  }
  return out;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot write " + path.string());
  return f;
}

/// Binary PGM (P5) of an [H, W] map, min-max rescaled.
inline void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("write_pgm: expected [H, W], got " + shape_string(map.shape()));
  const std::vector<std::uint8_t> bytes = rescale_to_bytes(map);
  std::ofstream f = open_output(path);
  f << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError(FormatError::Kind::io, "failed writing " + path.string());
}

/// Binary PPM (P6) of a [C, H, W] or [1, C, H, W] image in [0, 1]; one channel is replicated to gray.
inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  const Tensor img = image.rank() == 4 ? image.reshaped({image.dim(1), image.dim(2), image.dim(3)}) : image;
  if (img.rank() != 3 || (img.dim(0) != 3 && img.dim(0) != 1)) {
    throw ShapeError("write_ppm: expected 1 or 3 channels, got " + shape_string(image.shape()));
  }
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> bytes(3 * h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const float v = img[(c == 3 ? ch : 0) * h * w + i];
      bytes[3 * i + ch] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0f, 1.0f)));
    }
  }
  std::ofstream f = open_output(path);
  f << "P6\n" << w << ' ' << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError(FormatError::Kind::io, "failed writing " + path.string());
}

struct GradvizRecord {
  std::size_t index = 0;
  int label = 0;
  int prediction = 0;
  double fg_fraction = 0.0;
};

/// Writes input_<i>.ppm and grad_<i>.pgm for the first `count` images.
template <Classifier M>
std::vector<GradvizRecord> gradviz(const M& model, const Dataset& data, std::span<const MaskPair> masks,
                                   std::size_t count, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw FormatError(FormatError::Kind::io, "cannot create " + out_dir.string() + ": " + ec.message());
  count = std::min(count, data.size());
  std::vector<GradvizRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    const Tensor x = data.image(i);
    const Tensor mag = gradient_magnitude(input_gradient(model, x, data.labels[i]));
    char name[32];
    std::snprintf(name, sizeof name, "%04zu", i);
    write_ppm(out_dir / (std::string("input_") + name + ".ppm"), x);
    write_pgm(out_dir / (std::string("grad_") + name + ".pgm"), mag);
    out.push_back({i, data.labels[i], predict_class(model, x)[0], foreground_concentration(mag, masks[i])});
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

inline void write_comment_lines(std::ostream& out, std::span<const std::string> config) {
  for (const std::string& line : config) out << "# " << line << '\n';
}

inline void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows, std::span<const std::string> config) {
  write_comment_lines(out, config);
  out << "id,model,attack,axis,value,clean_acc,adv_acc,mean_fs,seconds\n";
  for (const MetricsRow& r : rows) {
    out << r.id << ',' << r.model << ',' << r.attack << ',' << r.axis << ',' << format_optional(r.value) << ','
        << format_number(r.clean_acc) << ',' << format_optional(r.adv_acc) << ',' << format_optional(r.mean_fs) << ','
        << format_number(r.seconds) << '\n';
  }
}

inline void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows,
                              std::span<const std::string> config) {
  std::ofstream f = open_output(path);
  write_metrics_csv(f, rows, config);
  if (!f) throw FormatError(FormatError::Kind::io, "failed writing " + path.string());
}

inline void write_transfer_csv(const std::filesystem::path& path, std::span<const EvalTarget> models,
                               const std::vector<std::vector<double>>& m, std::span<const std::string> config) {
  std::ofstream f = open_output(path);
  write_comment_lines(f, config);
  f << "source";
  for (const EvalTarget& t : models) f << ',' << t.name;
  f << '\n';
  for (std::size_t s = 0; s < models.size(); ++s) {
    f << models[s].name;
    for (double v : m[s]) f << ',' << format_number(v);
    f << '\n';
  }
  if (!f) throw FormatError(FormatError::Kind::io, "failed writing " + path.string());
}

inline void write_gradviz_csv(const std::filesystem::path& path, std::span<const GradvizRecord> records,
                              std::span<const std::string> config) {
  std::ofstream f = open_output(path);
  write_comment_lines(f, config);
  f << "index,label,prediction,fg_fraction\n";
  for (const GradvizRecord& r : records) {
    f << r.index << ',' << r.label << ',' << r.prediction << ',' << format_number(r.fg_fraction) << '\n';
  }
  if (!f) throw FormatError(FormatError::Kind::io, "failed writing " + path.string());
}

inline void write_train_log_csv(const std::filesystem::path& path, std::span<const TrainLogRow> log,
                                std::span<const std::string> config) {
  std::ofstream f = open_output(path);
  write_comment_lines(f, config);
  f << "epoch,loss,clean_acc\n";
  for (const TrainLogRow& r : log) f << r.epoch << ',' << format_number(r.loss) << ',' << format_number(r.clean_acc) << '\n';
  if (!f) throw FormatError(FormatError::Kind::io, "failed writing " + path.string());
}

}  // namespace dualpert
