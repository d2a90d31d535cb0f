#pragma once

#include <array>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <string>
#include <vector>

#include "dualpert/autodiff.hpp"
#include "dualpert/format.hpp"
#include "dualpert/tensor.hpp"

namespace dualpert {

/// Anything that maps an NCHW batch on a tape to [N, k] logits. Attacks are
/// written against this, so linear toy models work as well as the CNN.
template <class M>
concept Classifier = requires(const M& m, Tape& tape, Var x) {
  { m.forward(tape, x) } -> std::same_as<Var>;
};

/// conv(conv1, k×k)-relu-avgpool2-conv(conv2, k×k)-relu-avgpool2-dense(hidden)-relu-dense(classes).
/// Convolutions use "same" padding.
struct Architecture {
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t conv1 = 16;
  std::size_t conv2 = 32;
  std::size_t kernel = 3;
  std::size_t hidden = 128;
  std::size_t classes = 6;

  static Architecture reference(std::size_t classes) {
    Architecture a;
    a.classes = classes;
    return a;
  }

  std::size_t flat_features() const { return conv2 * (height / 4) * (width / 4); }

  void validate() const {
    if (in_channels == 0 || conv1 == 0 || conv2 == 0 || hidden == 0) {
      throw ArgumentError("architecture: channel and hidden widths must be positive");
    }
    if (kernel == 0 || kernel % 2 == 0) throw ArgumentError("architecture: kernel size must be odd");
    if (height < 4 || width < 4 || height % 4 || width % 4) {
      throw ArgumentError("architecture: height and width must be positive multiples of 4");
    }
    if (classes < 2) throw ArgumentError("architecture: need at least 2 classes");
  }

  std::vector<Shape> parameter_shapes() const {
    return {
        {conv1, in_channels, kernel, kernel}, {conv1},  //
        {conv2, conv1, kernel, kernel},       {conv2},  //
        {flat_features(), hidden},            {hidden},
        {hidden, classes},                    {classes},
    };
  }

  std::array<float, 9> header() const {
    return {1.0f,
            static_cast<float>(in_channels),
            static_cast<float>(height),
            static_cast<float>(width),
            static_cast<float>(conv1),
            static_cast<float>(conv2),
            static_cast<float>(kernel),
            static_cast<float>(hidden),
            static_cast<float>(classes)};
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct ClassifierParams {
  Architecture arch;
  std::vector<Tensor> tensors;

  /// Records every parameter on the tape (by reference); tracked when `track`.
  std::vector<Var> bind(Tape& tape, bool track) const {
    std::vector<Var> vars;
    vars.reserve(tensors.size());
    for (const Tensor& p : tensors) vars.push_back(track ? tape.variable_ref(p) : tape.constant_ref(p));
    return vars;
  }

  Var forward(Tape& tape, Var input, std::span<const Var> p) const {
    const Tensor& x = tape.value(input);
    if (x.rank() != 4) throw ShapeError("model input must be NCHW, got " + shape_string(x.shape()));
    const std::array<std::pair<std::size_t, const char*>, 3> expect = {
        {{arch.in_channels, "channels"}, {arch.height, "height"}, {arch.width, "width"}}};
    for (std::size_t d = 0; d < 3; ++d) {
      if (x.dim(d + 1) != expect[d].first) {
        throw ShapeError(std::string("model input ") + expect[d].second + " is " + std::to_string(x.dim(d + 1)) +
                         ", architecture expects " + std::to_string(expect[d].first));
      }
    }
    const Conv2dOptions same{1, arch.kernel / 2};
    Var h = avg_pool2(relu(add_bias(conv2d(input, p[0], same), p[1])));
    h = avg_pool2(relu(add_bias(conv2d(h, p[2], same), p[3])));
    h = reshape(h, {x.dim(0), arch.flat_features()});
    h = relu(dense(h, p[4], p[5]));
    return dense(h, p[6], p[7]);
  }

  Var forward(Tape& tape, Var input) const {
    const auto p = bind(tape, false);
    return forward(tape, input, p);
  }
};

/// He-uniform weights from `seed`; biases exactly zero.
inline ClassifierParams init_model(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng = make_rng(seed, 0x1417);
  ClassifierParams params{arch, {}};
  for (const Shape& s : arch.parameter_shapes()) {
    if (s.size() == 1) {
      params.tensors.emplace_back(s, 0.0f);
      continue;
    }
    const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[0];
    const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    params.tensors.push_back(random_uniform(s, rng, -bound, bound));
  }
  return params;
}

/// Logits for a batch, evaluated in chunks of `chunk` images.
template <Classifier M>
Tensor predict_logits(const M& model, const Tensor& batch, std::size_t chunk = 256) {
  if (batch.rank() != 4) throw ShapeError("predict_logits: batch must be NCHW, got " + shape_string(batch.shape()));
  std::vector<Tensor> parts;
  for (std::size_t first = 0; first < batch.dim(0); first += chunk) {
    const std::size_t count = std::min(chunk, batch.dim(0) - first);
    Tape tape;
    Tensor piece = batch.slice(first, count);
    Var logits = model.forward(tape, tape.constant_ref(piece));
    parts.push_back(tape.value(logits));
  }
  return concat_rows(parts);
}

/// Row-wise argmax; ties go to the lowest index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <Classifier M>
std::vector<int> predict_class(const M& model, const Tensor& batch) {
  return argmax_rows(predict_logits(model, batch));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;

  static OptimizerState for_parameters(std::span<const Tensor> params, float lr = 1e-3f) {
    OptimizerState s;
    s.learning_rate = lr;
    for (const Tensor& p : params) {
      s.first_moment.emplace_back(p.shape(), 0.0f);
      s.second_moment.emplace_back(p.shape(), 0.0f);
    }
    return s;
  }
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state.first_moment[i].shape() ||
        params[i].shape() != state.second_moment[i].shape()) {
      throw ShapeError("adam_step: shape mismatch on parameter " + std::to_string(i) + " " +
                       shape_string(params[i].shape()) + " vs gradient " + shape_string(grads[i].shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(static_cast<double>(state.beta1), t);
  const double c2 = 1.0 - std::pow(static_cast<double>(state.beta2), t);
  const float b1 = state.beta1, b2 = state.beta2;
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i].data();
    float* m = state.first_moment[i].data();
    float* v = state.second_moment[i].data();
    const float* g = grads[i].data();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= static_cast<float>(state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

inline void adam_step(ClassifierParams& params, std::span<const Tensor> grads, OptimizerState& state) {
  adam_step(std::span<Tensor>(params.tensors), grads, state);
}

/// Collects the gradients of `vars` in order.
inline std::vector<Tensor> gradients_for(GradientSet& grads, std::span<const Var> vars, const Tape& tape) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (Var v : vars) out.push_back(grads.contains(v) ? grads.take(v) : Tensor(tape.value(v).shape(), 0.0f));
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: an architecture header record followed by one DPT record per
// parameter tensor.
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_params(const ClassifierParams& params) {
  std::vector<std::uint8_t> bytes;
  const auto h = params.arch.header();
  encode_tensor(Tensor({h.size()}, std::vector<float>(h.begin(), h.end())), bytes);
  for (const Tensor& t : params.tensors) encode_tensor(t, bytes);
  return bytes;
}

inline ClassifierParams decode_params(std::span<const std::uint8_t> bytes) {
  using K = FormatError::Kind;
  std::size_t offset = 0;
  const Tensor header = decode_tensor(bytes, offset);
  if (header.rank() != 1 || header.size() != 9 || header[0] != 1.0f) {
    throw FormatError(K::inconsistent, "model file: malformed architecture header");
  }
  auto field = [&](std::size_t i) {
    const float v = header[i];
    if (!(v >= 0.0f && v < 1e7f) || v != std::floor(v)) {
      throw FormatError(K::inconsistent, "model file: non-integral architecture field");
    }
    return static_cast<std::size_t>(v);
  };
  ClassifierParams params;
  params.arch = Architecture{field(1), field(2), field(3), field(4), field(5), field(6), field(7), field(8)};
  try {
    params.arch.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(K::inconsistent, std::string("model file: ") + e.what());
  }
  for (const Shape& s : params.arch.parameter_shapes()) {
    Tensor t = decode_tensor(bytes, offset);
    if (t.shape() != s) {
      throw FormatError(K::inconsistent, "model file: parameter shape " + shape_string(t.shape()) +
                                             " does not match architecture " + shape_string(s));
    }
    params.tensors.push_back(std::move(t));
  }
  if (offset != bytes.size()) throw FormatError(K::length_mismatch, "model file: trailing bytes");
  return params;
}

inline void save_params(const std::filesystem::path& path, const ClassifierParams& params) {
  write_file_bytes(path, encode_params(params));
}

inline ClassifierParams load_params(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_params(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), path.string() + ": " + e.what());
  }
}

/// Loads and checks the stored architecture against `expected`.
inline ClassifierParams load_params(const std::filesystem::path& path, const Architecture& expected) {
  ClassifierParams p = load_params(path);
  if (!(p.arch == expected)) {
    throw FormatError(FormatError::Kind::architecture_mismatch,
                      path.string() + ": stored architecture (" + std::to_string(p.arch.classes) +
                          " classes) differs from the expected one (" + std::to_string(expected.classes) +
                          " classes)");
  }
  return p;
}

}  // namespace dualpert
