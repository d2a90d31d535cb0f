#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "dualpert/dualpert.hpp"

namespace testing_support {

using namespace dualpert;

/// A small random instance of the reference architecture.
inline Architecture small_architecture(Rng& rng) {
  Architecture a;
  a.in_channels = 1 + rng() % 3;
  a.height = 4 * (1 + rng() % 2);
  a.width = 4 * (1 + rng() % 2);
  a.conv1 = 2 + rng() % 3;
  a.conv2 = 2 + rng() % 3;
  a.kernel = rng() % 2 ? 3 : 1;
  a.hidden = 3 + rng() % 6;
  a.classes = 2 + rng() % 3;
  return a;
}

/// init_model plus nonzero biases, so bias gradients are exercised off zero.
inline ClassifierParams random_model(const Architecture& a, std::uint64_t seed) {
  ClassifierParams p = init_model(a, seed);
  Rng rng = make_rng(seed, 77);
  for (Tensor& t : p.tensors) {
    if (t.rank() == 1) t = random_uniform(t.shape(), rng, -0.2f, 0.2f);
  }
  return p;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng() % k);
  return y;
}

/// Logits = flatten(x) · W: a linear classifier for closed-form checks.
struct LinearModel {
  Tensor weights;  // [C*H*W, k]
  Tensor bias;     // [k]

  Var forward(Tape& tape, Var x) const {
    const Tensor& v = tape.value(x);
    Var flat = reshape(x, {v.dim(0), v.size() / v.dim(0)});
    return dense(flat, tape.constant_ref(weights), tape.constant_ref(bias));
  }
};

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("dualpert_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Small synthetic split used by tests that only need valid data.
inline Dataset tiny_dataset(std::size_t samples = 24, std::uint64_t seed = 5, std::size_t classes = 3) {
  SynthConfig cfg;
  cfg.classes = classes;
  cfg.samples = samples;
  cfg.seed = seed;
  return gen_synthetic(cfg);
}

}  // namespace testing_support
