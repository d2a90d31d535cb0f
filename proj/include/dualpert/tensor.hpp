#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualpert {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when operand extents disagree; the message names the dimension.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument values (negative budgets, bad labels, unknown methods).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor: dense row-major float32 array
// ---------------------------------------------------------------------------

class Tensor {
 public:
  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor scalar(float v) { return Tensor(Shape{}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // NCHW-style indexing helpers
  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  float item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  /// Copy of the slice [first, first+count) along dimension 0.
  Tensor slice(std::size_t first, std::size_t count) const {
    if (shape_.empty() || first + count > shape_[0]) {
      throw ShapeError("slice out of range on dimension 0 of " + shape_string(shape_));
    }
    const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = count;
    return Tensor(std::move(s), std::vector<float>(data_.begin() + first * stride,
                                                   data_.begin() + (first + count) * stride));
  }

  /// Rows of dimension 0 gathered in the given order.
  Tensor gather(std::span<const std::size_t> rows) const {
    const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = rows.size();
    std::vector<float> out;
    out.reserve(rows.size() * stride);
    for (std::size_t r : rows) {
      if (r >= shape_[0]) throw ShapeError("gather row out of range");
      out.insert(out.end(), data_.begin() + r * stride, data_.begin() + (r + 1) * stride);
    }
    return Tensor(std::move(s), std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  /// Bitwise equality of shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ &&
           (a.data_.empty() ||
            std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0);
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Concatenate along dimension 0.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) return Tensor();
  Shape s = parts[0].shape();
  std::size_t rows = 0;
  std::vector<float> out;
  for (const Tensor& p : parts) {
    if (p.rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat_rows: trailing extents differ");
    }
    rows += p.dim(0);
    out.insert(out.end(), p.storage().begin(), p.storage().end());
  }
  s[0] = rows;
  return Tensor(std::move(s), std::move(out));
}

inline double sum64(std::span<const float> v) {
  double acc = 0.0;
  for (float x : v) acc += x;
  return acc;
}

inline double l2_norm(std::span<const float> v) {
  double acc = 0.0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

inline double linf_norm(std::span<const float> v) {
  double m = 0.0;
  for (float x : v) m = std::max(m, static_cast<double>(std::fabs(x)));
  return m;
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream); used so that separate consumers
/// (init, noise, shuffling) never perturb each other's sequences.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}
inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

inline Tensor random_uniform(Shape shape, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(uniform(rng, lo, hi));
  return t;
}

inline Tensor random_normal(Shape shape, Rng& rng, float stddev = 1.0f) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(normal(rng, 0.0, stddev));
  return t;
}

}  // namespace dualpert
