#pragma once

// Tape-based reverse-mode differentiation over Tensor.
//
// Every op evaluates eagerly and appends a node to the tape. backward() walks
// the nodes in exact reverse order of recording. Reductions accumulate in
// double; all loops run in a fixed order so forward and backward results are
// bitwise reproducible for identical inputs.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dualpert/tensor.hpp"

namespace dualpert {

class Tape;
class GradientSet;
struct Var;
GradientSet backward(Tape& tape, Var root);

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

/// Per-node gradient accumulators during a backward sweep. Returns nullptr for
/// nodes that do not require a gradient, so ops can skip dead branches.
class GradBuffer {
 public:
  explicit GradBuffer(const Tape& tape);
  Tensor* operator()(std::size_t id);

 private:
  friend class Tape;
  friend class GradientSet;
  friend GradientSet backward(Tape& tape, Var root);
  const Tape* tape_;
  std::vector<std::optional<Tensor>> grads_;
};

/// Gradients of a scalar root with respect to the tracked variables.
class GradientSet {
 public:
  bool contains(Var v) const { return grads_.count(v.id) > 0; }
  const Tensor& at(Var v) const {
    auto it = grads_.find(v.id);
    if (it == grads_.end()) throw ArgumentError("no gradient recorded for tape node " + std::to_string(v.id));
    return it->second;
  }
  Tensor take(Var v) {
    auto it = grads_.find(v.id);
    if (it == grads_.end()) throw ArgumentError("no gradient recorded for tape node " + std::to_string(v.id));
    Tensor out = std::move(it->second);
    grads_.erase(it);
    return out;
  }
  std::size_t size() const { return grads_.size(); }

 private:
  friend GradientSet backward(Tape& tape, Var root);
  std::unordered_map<std::size_t, Tensor> grads_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, GradBuffer& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Untracked input (owned copy).
  Var constant(Tensor t) { return push(std::move(t), nullptr, false, {}); }
  /// Tracked input; backward() reports its gradient.
  Var variable(Tensor t) { return push(std::move(t), nullptr, true, {}); }
  /// Non-owning variants: `t` must outlive the tape.
  Var constant_ref(const Tensor& t) { return push(Tensor(), &t, false, {}); }
  Var variable_ref(const Tensor& t) { return push(Tensor(), &t, true, {}); }

  const Tensor& value(Var v) const { return value(check(v)); }
  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Records an op result. The node requires a gradient iff any parent does;
  /// otherwise the backward function is dropped.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool req = false;
    for (Var p : parents) req = req || nodes_[check(p)].requires_grad;
    return push(std::move(value), nullptr, req, req ? std::move(fn) : BackwardFn{}, false);
  }

  std::size_t check(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ArgumentError("variable is not on this tape");
    return v.id;
  }

 private:
  friend GradientSet backward(Tape& tape, Var root);

  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    bool requires_grad = false;
    bool leaf = true;
    BackwardFn backward;
  };

  Var push(Tensor t, const Tensor* ref, bool req, BackwardFn fn, bool leaf = true) {
    nodes_.push_back(Node{std::move(t), ref, req, leaf, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline GradBuffer::GradBuffer(const Tape& tape) : tape_(&tape), grads_(tape.size()) {}

inline Tensor* GradBuffer::operator()(std::size_t id) {
  if (!tape_->requires_grad(id)) return nullptr;
  auto& g = grads_[id];
  if (!g) g.emplace(tape_->value(id).shape(), 0.0f);
  return &*g;
}

/// Reverse sweep from a scalar root. Visits nodes strictly in reverse
/// recording order.
inline GradientSet backward(Tape& tape, Var root) {
  if (root.tape != &tape || root.id >= tape.size()) throw ArgumentError("backward: root is not on this tape");
  if (tape.value(root).size() != 1) {
    throw ShapeError("backward: root must be a scalar, got shape " + shape_string(tape.value(root).shape()));
  }
  GradBuffer buf(tape);
  GradientSet out;
  if (!tape.requires_grad(root)) return out;
  buf(root.id)->storage()[0] = 1.0f;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    auto& node = tape.nodes_[i];
    if (!buf.grads_[i]) continue;
    if (node.leaf) {
      out.grads_.emplace(i, std::move(*buf.grads_[i]));
    } else if (node.backward) {
      node.backward(*buf.grads_[i], buf);
    }
    buf.grads_[i].reset();
  }
  return out;
}

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

inline void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ArgumentError("operands live on different tapes");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

inline void add_into(Tensor& dst, const Tensor& src) {
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  detail::require_same_shape(x, y, "add");
  Tensor out = x;
  detail::add_into(out, y);
  return t.record(std::move(out), {a, b}, [a, b](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) detail::add_into(*ga, g);
    if (Tensor* gb = grads(b.id)) detail::add_into(*gb, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  detail::require_same_shape(x, y, "sub");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return t.record(std::move(out), {a, b}, [a, b](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) detail::add_into(*ga, g);
    if (Tensor* gb = grads(b.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

/// Elementwise (Hadamard) product of equal shapes.
inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  detail::require_same_shape(x, y, "mul");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return t.record(std::move(out), {a, b}, [a, b, &t](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) {
      const Tensor& yv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * yv[i];
    }
    if (Tensor* gb = grads(b.id)) {
      const Tensor& xv = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * xv[i];
    }
  });
}

inline Var scale(Var a, float c) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (float& v : out.values()) v *= c;
  return t.record(std::move(out), {a}, [a, c](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
    }
  });
}

inline Var add_scalar(Var a, float c) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (float& v : out.values()) v += c;
  return t.record(std::move(out), {a}, [a](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) detail::add_into(*ga, g);
  });
}

inline Var square(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (float& v : out.values()) v *= v;
  return t.record(std::move(out), {a}, [a, &t](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) {
      const Tensor& x = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += 2.0f * x[i] * g[i];
    }
  });
}

/// max(x, 0). The derivative at exactly 0 is taken as 0.
inline Var relu(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (float& v : out.values()) v = v > 0.0f ? v : 0.0f;
  return t.record(std::move(out), {a}, [a, &t](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) {
      const Tensor& x = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0f) (*ga)[i] += g[i];
      }
    }
  });
}

inline Var reshape(Var a, Shape shape) {
  Tape& t = *a.tape;
  Tensor out = t.value(a).reshaped(std::move(shape));
  return t.record(std::move(out), {a}, [a](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Sum of every element, returned as a rank-0 tensor.
inline Var reduce_sum(Var a) {
  Tape& t = *a.tape;
  Tensor out = Tensor::scalar(static_cast<float>(sum64(t.value(a).values())));
  return t.record(std::move(out), {a}, [a](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) {
      const float gv = g[0];
      for (float& v : ga->values()) v += gv;
    }
  });
}

/// Per-row sum over all trailing dimensions: [N, ...] -> [N].
inline Var row_sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (x.rank() < 1) throw ShapeError("row_sum: rank 0 input");
  const std::size_t n = x.dim(0);
  const std::size_t stride = n ? x.size() / n : 0;
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<float>(sum64(x.values().subspan(i * stride, stride)));
  }
  return t.record(std::move(out), {a}, [a, n, stride](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < stride; ++j) (*ga)[i * stride + j] += g[i];
    }
  });
}

/// NCHW -> NHW, summing channels.
inline Var channel_sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (x.rank() != 4) throw ShapeError("channel_sum: expected NCHW, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < hw; ++p) {
      double acc = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) acc += x[(i * c + ch) * hw + p];
      out[i * hw + p] = static_cast<float>(acc);
    }
  return t.record(std::move(out), {a}, [a, n, c, hw](const Tensor& g, GradBuffer& grads) {
    if (Tensor* ga = grads(a.id)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) (*ga)[(i * c + ch) * hw + p] += g[i * hw + p];
    }
  });
}

/// Per-row density: (x + floor) / sum(x + floor), rows along dimension 0.
inline Var normalize_density(Var a, float floor) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (x.rank() < 1) throw ShapeError("normalize_density: rank 0 input");
  const std::size_t n = x.dim(0);
  const std::size_t stride = n ? x.size() / n : 0;
  auto dens = std::make_shared<Tensor>(x.shape());
  auto totals = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < stride; ++j) z += static_cast<double>(x[i * stride + j] + floor);
    (*totals)[i] = z;
    for (std::size_t j = 0; j < stride; ++j) {
      (*dens)[i * stride + j] = static_cast<float>(static_cast<double>(x[i * stride + j] + floor) / z);
    }
  }
  Tensor out = *dens;
  return t.record(std::move(out), {a}, [a, n, stride, dens, totals](const Tensor& g, GradBuffer& grads) {
    Tensor* ga = grads(a.id);
    if (!ga) return;
    // d s_i / d x_j = (delta_ij - s_i) / Z
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < stride; ++j) dot += static_cast<double>(g[i * stride + j]) * (*dens)[i * stride + j];
      const double z = (*totals)[i];
      for (std::size_t j = 0; j < stride; ++j) (*ga)[i * stride + j] += static_cast<float>((g[i * stride + j] - dot) / z);
    }
  });
}

// ---------------------------------------------------------------------------
// Gaussian blur (separable, replicate border)
// ---------------------------------------------------------------------------

/// Truncated sampled Gaussian of half-width `radius`, renormalized to sum 1.
inline std::vector<float> gaussian_kernel(double sigma, int radius) {
  if (!(sigma > 0.0)) throw ArgumentError("gaussian_kernel: sigma must be positive");
  if (radius < 1) throw ArgumentError("gaussian_kernel: radius must be >= 1");
  std::vector<double> w(2 * radius + 1);
  double z = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    w[k + radius] = std::exp(-static_cast<double>(k * k) / (2.0 * sigma * sigma));
    z += w[k + radius];
  }
  std::vector<float> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = static_cast<float>(w[i] / z);
  return out;
}

namespace detail {

// One 1-D pass along an axis of length `len` with element stride `step`.
// Written as x_i + sum_{k!=0} w_k (x_{i+k} - x_i) so that constant signals
// are reproduced exactly.
inline void blur_line(const float* in, float* out, std::size_t len, std::size_t step,
                      const std::vector<float>& w, int radius) {
  const auto last = static_cast<long>(len) - 1;
  for (long i = 0; i <= last; ++i) {
    const float xi = in[i * step];
    double acc = 0.0;
    for (int k = -radius; k <= radius; ++k) {
      if (k == 0) continue;
      const long j = std::clamp(i + k, 0L, last);
      acc += static_cast<double>(w[k + radius]) * (in[j * step] - xi);
    }
    out[i * step] = xi + static_cast<float>(acc);
  }
}

inline void blur_line_adjoint(const float* gout, float* gin, std::size_t len, std::size_t step,
                              const std::vector<float>& w, int radius) {
  const auto last = static_cast<long>(len) - 1;
  for (long i = 0; i <= last; ++i) {
    const double gi = gout[i * step];
    double self = gi;
    for (int k = -radius; k <= radius; ++k) {
      if (k == 0) continue;
      const long j = std::clamp(i + k, 0L, last);
      if (j == i) continue;
      gin[j * step] += static_cast<float>(w[k + radius] * gi);
      self -= w[k + radius] * gi;
    }
    gin[i * step] += static_cast<float>(self);
  }
}

}  // namespace detail

/// Separable Gaussian blur over the two trailing dimensions.
inline Var gaussian_blur(Var a, double sigma, int radius) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (x.rank() < 2) throw ShapeError("gaussian_blur: need at least 2 dimensions");
  auto w = std::make_shared<std::vector<float>>(gaussian_kernel(sigma, radius));
  const std::size_t h = x.dim(x.rank() - 2), wd = x.dim(x.rank() - 1);
  const std::size_t planes = x.size() / (h * wd);
  Tensor tmp(x.shape());
  Tensor out(x.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = x.data() + p * h * wd;
    float* mid = tmp.data() + p * h * wd;
    float* dst = out.data() + p * h * wd;
    for (std::size_t r = 0; r < h; ++r) detail::blur_line(src + r * wd, mid + r * wd, wd, 1, *w, radius);
    for (std::size_t c = 0; c < wd; ++c) detail::blur_line(mid + c, dst + c, h, wd, *w, radius);
  }
  return t.record(std::move(out), {a}, [a, w, radius, h, wd, planes](const Tensor& g, GradBuffer& grads) {
    Tensor* ga = grads(a.id);
    if (!ga) return;
    std::vector<float> mid(h * wd);
    for (std::size_t p = 0; p < planes; ++p) {
      std::fill(mid.begin(), mid.end(), 0.0f);
      const float* gsrc = g.data() + p * h * wd;
      for (std::size_t c = 0; c < wd; ++c) detail::blur_line_adjoint(gsrc + c, mid.data() + c, h, wd, *w, radius);
      float* gdst = ga->data() + p * h * wd;
      for (std::size_t r = 0; r < h; ++r)
        detail::blur_line_adjoint(mid.data() + r * wd, gdst + r * wd, wd, 1, *w, radius);
    }
  });
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

namespace detail {

inline void im2col(const float* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                   std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, float* cols) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        float* row = cols + ((ch * kh + ky) * kw + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            row[oy * ow + ox] = (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w))
                                    ? x[(ch * h + iy) * w + ix]
                                    : 0.0f;
          }
        }
      }
}

inline void col2im(const float* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                   std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, float* x) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const float* row = cols + ((ch * kh + ky) * kw + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            x[(ch * h + iy) * w + ix] += row[oy * ow + ox];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of an NCHW batch with an OIHW kernel (no bias).
inline Var conv2d(Var input, Var kernel, Conv2dOptions opt = {}) {
  detail::require_same_tape(input, kernel);
  Tape& t = *input.tape;
  const Tensor& x = t.value(input);
  const Tensor& k = t.value(kernel);
  if (x.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_string(x.shape()));
  if (k.rank() != 4) throw ShapeError("conv2d: kernel must be OIHW, got " + shape_string(k.shape()));
  if (opt.stride == 0) throw ArgumentError("conv2d: stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != c) {
    throw ShapeError("conv2d: channel dimension mismatch, input has " + std::to_string(c) + " channels, kernel expects " +
                     std::to_string(k.dim(1)));
  }
  if (h + 2 * opt.pad < kh || w + 2 * opt.pad < kw) {
    throw ShapeError("conv2d: spatial dimension smaller than kernel (height/width)");
  }
  const std::size_t oh = (h + 2 * opt.pad - kh) / opt.stride + 1;
  const std::size_t ow = (w + 2 * opt.pad - kw) / opt.stride + 1;
  const std::size_t ckk = c * kh * kw, ohw = oh * ow;

  Tensor out({n, o, oh, ow});
  const bool keep_cols = t.requires_grad(kernel);
  auto cols = std::make_shared<std::vector<float>>(keep_cols ? n * ckk * ohw : ckk * ohw);
  detail::CMapRow km(k.data(), o, ckk);
  for (std::size_t i = 0; i < n; ++i) {
    float* col = cols->data() + (keep_cols ? i * ckk * ohw : 0);
    detail::im2col(x.data() + i * c * h * w, c, h, w, kh, kw, opt.stride, opt.pad, oh, ow, col);
    detail::MapRow om(out.data() + i * o * ohw, o, ohw);
    om.noalias() = km * detail::CMapRow(col, ckk, ohw);
  }
  if (!keep_cols) cols.reset();

  return t.record(std::move(out), {input, kernel},
                  [=, &t](const Tensor& g, GradBuffer& grads) {
                    Tensor* gx = grads(input.id);
                    Tensor* gk = grads(kernel.id);
                    const Tensor& kv = t.value(kernel);
                    detail::CMapRow km2(kv.data(), o, ckk);
                    std::vector<float> gcol(gx ? ckk * ohw : 0);
                    for (std::size_t i = 0; i < n; ++i) {
                      detail::CMapRow gm(g.data() + i * o * ohw, o, ohw);
                      if (gk) {
                        detail::MapRow gkm(gk->data(), o, ckk);
                        gkm.noalias() += gm * detail::CMapRow(cols->data() + i * ckk * ohw, ckk, ohw).transpose();
                      }
                      if (gx) {
                        detail::MapRow gc(gcol.data(), ckk, ohw);
                        gc.noalias() = km2.transpose() * gm;
                        detail::col2im(gcol.data(), c, h, w, kh, kw, opt.stride, opt.pad, oh, ow,
                                       gx->data() + i * c * h * w);
                      }
                    }
                  });
}

/// Adds a per-channel bias: x is [N, C, ...], b is [C].
inline Var add_bias(Var x, Var b) {
  detail::require_same_tape(x, b);
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(b);
  if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw ShapeError("add_bias: channel dimension mismatch, " + shape_string(xv.shape()) + " vs bias " +
                     shape_string(bv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c ? n * c : 1);
  Tensor out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < inner; ++p) out[(i * c + ch) * inner + p] += bv[ch];
  return t.record(std::move(out), {x, b}, [x, b, n, c, inner](const Tensor& g, GradBuffer& grads) {
    if (Tensor* gx = grads(x.id)) detail::add_into(*gx, g);
    if (Tensor* gb = grads(b.id)) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < inner; ++p) acc += g[(i * c + ch) * inner + p];
        (*gb)[ch] += static_cast<float>(acc);
      }
    }
  });
}

/// Affine map with row-vector convention: y = x W + b, x [N, in], W [in, out].
inline Var dense(Var input, Var weights, Var bias) {
  detail::require_same_tape(input, weights);
  detail::require_same_tape(input, bias);
  Tape& t = *input.tape;
  const Tensor& x = t.value(input);
  const Tensor& wv = t.value(weights);
  const Tensor& bv = t.value(bias);
  if (x.rank() != 2) throw ShapeError("dense: input must be [N, in], got " + shape_string(x.shape()));
  if (wv.rank() != 2 || wv.dim(0) != x.dim(1)) {
    throw ShapeError("dense: inner dimension mismatch, input " + shape_string(x.shape()) + " vs weights " +
                     shape_string(wv.shape()));
  }
  if (bv.rank() != 1 || bv.dim(0) != wv.dim(1)) {
    throw ShapeError("dense: output dimension mismatch, weights " + shape_string(wv.shape()) + " vs bias " +
                     shape_string(bv.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), outd = wv.dim(1);
  Tensor out({n, outd});
  detail::MapRow om(out.data(), n, outd);
  om.noalias() = detail::CMapRow(x.data(), n, in) * detail::CMapRow(wv.data(), in, outd);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < outd; ++j) out[i * outd + j] += bv[j];
  return t.record(std::move(out), {input, weights, bias},
                  [=, &t](const Tensor& g, GradBuffer& grads) {
                    detail::CMapRow gm(g.data(), n, outd);
                    if (Tensor* gx = grads(input.id)) {
                      detail::MapRow(gx->data(), n, in).noalias() +=
                          gm * detail::CMapRow(t.value(weights).data(), in, outd).transpose();
                    }
                    if (Tensor* gw = grads(weights.id)) {
                      detail::MapRow(gw->data(), in, outd).noalias() +=
                          detail::CMapRow(t.value(input).data(), n, in).transpose() * gm;
                    }
                    if (Tensor* gb = grads(bias.id)) {
                      for (std::size_t j = 0; j < outd; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < n; ++i) acc += g[i * outd + j];
                        (*gb)[j] += static_cast<float>(acc);
                      }
                    }
                  });
}

/// 2x2 average pooling with stride 2 over NCHW (odd trailing rows/cols dropped).
inline Var avg_pool2(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (x.rank() != 4) throw ShapeError("avg_pool2: expected NCHW, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("avg_pool2: spatial dimension below 2 (height/width)");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({n, c, oh, ow});
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const float* base = x.data() + p * h * w + 2 * y * w + 2 * xx;
        out[(p * oh + y) * ow + xx] = 0.25f * (base[0] + base[1] + base[w] + base[w + 1]);
      }
  return t.record(std::move(out), {a}, [a, n, c, h, w, oh, ow](const Tensor& g, GradBuffer& grads) {
    Tensor* ga = grads(a.id);
    if (!ga) return;
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const float gv = 0.25f * g[(p * oh + y) * ow + xx];
          float* base = ga->data() + p * h * w + 2 * y * w + 2 * xx;
          base[0] += gv;
          base[1] += gv;
          base[w] += gv;
          base[w + 1] += gv;
        }
  });
}

/// Per-row -log softmax(logits)[label]; logits [N, k] -> [N].
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = *logits.tape;
  const Tensor& z = t.value(logits);
  if (z.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N, k]");
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (k < 2) throw ShapeError("softmax_cross_entropy: need at least 2 classes");
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count does not match batch dimension");
  auto probs = std::make_shared<std::vector<float>>(n * k);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ArgumentError("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," +
                          std::to_string(k) + ")");
    }
    const float* row = z.data() + i * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j]) - m);
    const double lse = m + std::log(s);
    out[i] = static_cast<float>(lse - row[y]);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = static_cast<float>(std::exp(row[j] - lse));
  }
  return t.record(std::move(out), {logits}, [logits, probs, lab, n, k](const Tensor& g, GradBuffer& grads) {
    Tensor* gz = grads(logits.id);
    if (!gz) return;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const float target = static_cast<int>(j) == (*lab)[i] ? 1.0f : 0.0f;
        (*gz)[i * k + j] += g[i] * ((*probs)[i * k + j] - target);
      }
    }
  });
}

}  // namespace dualpert
