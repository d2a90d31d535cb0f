// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
//   acceptance [--only 1,5,...] [--cache DIR]
//
// --cache keeps trained desk-scale models in DIR between runs; without it
// everything is trained from scratch.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "../support/helpers.hpp"
#include "../support/oracles.hpp"

using namespace dualpert;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double rel_err(double a, double b) { return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-4}); }

double masked_l2(std::span<const float> v, std::span<const float> mask) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += mask[i] * static_cast<double>(v[i]) * v[i];
  return std::sqrt(s);
}

double masked_linf(std::span<const float> v, std::span<const float> mask) {
  double m = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) m = std::max(m, mask[i] * std::fabs(static_cast<double>(v[i])));
  return m;
}

double masked_norm(std::span<const float> v, std::span<const float> mask, Norm p) {
  return p == Norm::l2 ? masked_l2(v, mask) : masked_linf(v, mask);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Desk-scale task: one dataset and the trained models shared by 5-9 and 11.
// ---------------------------------------------------------------------------

constexpr float kTrainEpsF = 0.25f;
constexpr float kTrainEpsB = 5.0f * kTrainEpsF;
constexpr std::size_t kAtEpochs = 24;

class DeskTask {
 public:
  explicit DeskTask(std::string cache) : cache_(std::move(cache)) {
    SynthConfig sc;
    sc.seed = 1;
    std::tie(train, test) = split(gen_synthetic(sc), 0.8, 1);
    test_masks = dataset_masks(test, MaskSource::ground_truth);
  }

  Dataset train, test;
  std::vector<MaskPair> test_masks;
  std::map<std::string, double> training_seconds;  // models trained in this run

  TrainConfig clean_config() const {
    TrainConfig tc;
    tc.epochs = 25;
    tc.learning_rate = 3e-3f;
    tc.decay_epochs = {18};
    tc.seed = 3;
    return tc;
  }

  // Fine-tuning schedule starting from the Clean model.
  TrainConfig fine_tune_config() {
    TrainConfig tc;
    tc.epochs = kAtEpochs;
    tc.learning_rate = 1e-3f;
    tc.decay_epochs = {kAtEpochs * 3 / 4};
    tc.seed = 3;
    tc.init = clean();
    return tc;
  }

  // Adversarial fine-tuning at the matched training budget.
  TrainConfig adversarial_config(AttackKind kind) {
    TrainConfig tc = fine_tune_config();
    tc.attack = kind;
    tc.attack_cfg.eps_fg = kTrainEpsF;
    tc.attack_cfg.eps_bg = kTrainEpsB;
    return tc;
  }

  const ClassifierParams& clean() {
    return get("clean", [&] { return clean_train(train, clean_config()); });
  }
  const ClassifierParams& at_pgd() {
    return get("at_pgd", [&] { return adv_train(train, adversarial_config(AttackKind::pgd)); });
  }
  const ClassifierParams& at_dual() {
    return get("at_dual", [&] { return adv_train(train, adversarial_config(AttackKind::dual)); });
  }
  const ClassifierParams& noise(float sigma) {
    return get(fmt("rs_%.2f", sigma), [&] { return rs_train(train, fine_tune_config(), sigma); });
  }

 private:
  const ClassifierParams& get(const std::string& name, const std::function<ClassifierParams()>& make) {
    auto it = models_.find(name);
    if (it != models_.end()) return it->second;
    const std::filesystem::path file = cache_.empty() ? std::filesystem::path() : std::filesystem::path(cache_) / (name + ".dpt");
    ClassifierParams p;
    if (!file.empty() && std::filesystem::exists(file)) {
      p = load_params(file);
    } else {
      const auto t0 = Clock::now();
      p = make();
      const double s = seconds_since(t0);
      training_seconds[name] = s;
      std::cerr << "  trained " << name << " in " << fmt("%.1f", s) << " s, test accuracy "
                << fmt("%.4f", accuracy(p, test)) << '\n';
      if (!file.empty()) {
        std::filesystem::create_directories(file.parent_path());
        save_params(file, p);
      }
    }
    return models_.emplace(name, std::move(p)).first->second;
  }

  std::string cache_;
  std::map<std::string, ClassifierParams> models_;
};

// Dual attack at the training budget. lambda = 0 by default: with the DoG
// salience proxy a lambda of 1 dominates the objective and leaves even the
// Clean model far more accurate, so it no longer measures attack strength.
AttackSpec matched_dual_attack(float lambda = 0.0f) {
  AttackSpec s;
  s.kind = AttackName::dual;
  s.cfg.eps_fg = kTrainEpsF;
  s.cfg.eps_bg = kTrainEpsB;
  s.cfg.lambda = lambda;
  s.cfg.seed = 9;
  s.masks = MaskSource::ground_truth;
  return s;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness against a double-precision finite-difference oracle
// ---------------------------------------------------------------------------

Outcome gradient_check() {
  Rng rng = make_rng(101);
  double worst = 0.0;
  std::size_t checked = 0, skipped = 0;
  for (int config = 0; config < 50; ++config) {
    const Architecture a = testing_support::small_architecture(rng);
    const ClassifierParams p = testing_support::random_model(a, 1000 + config);
    const std::size_t n = 2;
    const Tensor x = random_uniform({n, a.in_channels, a.height, a.width}, rng);
    const auto y = testing_support::random_labels(n, a.classes, rng);

    Tape tape;
    const auto vars = p.bind(tape, true);
    Var xv = tape.variable_ref(x);
    GradientSet g = backward(tape, reduce_sum(softmax_cross_entropy(p.forward(tape, xv, vars), y)));
    const Tensor gx = g.take(xv);
    const auto gp = gradients_for(g, vars, tape);

    oracle::Network net(p);
    auto xd = oracle::to_double(x);
    std::vector<char> base;
    net.loss(xd, n, y, &base);
    auto probe = [&](double& slot, double analytic) {
      const double old = slot;
      std::vector<char> pp, pm;
      slot = old + 1e-3;
      const double fp = net.loss(xd, n, y, &pp);
      slot = old - 1e-3;
      const double fm = net.loss(xd, n, y, &pm);
      slot = old;
      if (pp != base || pm != base) {
        ++skipped;  // the step crosses a relu kink
        return;
      }
      worst = std::max(worst, rel_err(analytic, (fp - fm) / 2e-3));
      ++checked;
    };
    for (int k = 0; k < 40; ++k) {
      const std::size_t j = rng() % xd.size();
      probe(xd[j], gx[j]);
    }
    for (std::size_t t = 0; t < net.p.size(); ++t) {
      for (int k = 0; k < 20; ++k) {
        const std::size_t j = rng() % net.p[t].size();
        probe(net.p[t][j], gp[t][j]);
      }
    }
  }
  const bool ok = worst <= 1e-3 && checked >= 10 * skipped;
  return {ok, fmt("max relative error %.2e over %zu probes (%zu skipped at kinks)", worst, checked, skipped)};
}

// ---------------------------------------------------------------------------
// 2. Projection and attack feasibility
// ---------------------------------------------------------------------------

Outcome feasibility() {
  Rng rng = make_rng(202);
  std::size_t violations = 0, not_idempotent = 0;
  double worst_excess = 0.0;
  const std::vector<float> ones(3072, 1.0f);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t d = 1 + rng() % 3072;
    const Norm p = rng() % 2 ? Norm::l2 : Norm::linf;
    const float eps = static_cast<float>(uniform(rng, 0.0, 3.0));
    const float scale = static_cast<float>(std::exp(uniform(rng, -4.0, 4.0)));
    const Tensor v = random_normal({d}, rng, scale);
    const Tensor once = project(v, eps, p);
    const double excess = masked_norm(once.values(), std::span<const float>(ones).first(d), p) - eps;
    worst_excess = std::max(worst_excess, excess);
    violations += excess > 1e-5;
    not_idempotent += !(project(once, eps, p) == once);
  }

  // Full attacks: 100 batches of 100 images on small random nets.
  std::size_t images = 0, box = 0;
  for (int batch = 0; batch < 100; ++batch) {
    Architecture a{3, 8, 8, 3, 4, 3, 8, 3};
    const ClassifierParams model = testing_support::random_model(a, 2000 + batch);
    const std::size_t n = 100;
    const Tensor x = random_uniform({n, 3, 8, 8}, rng);
    const auto y = testing_support::random_labels(n, 3, rng);
    std::vector<MaskPair> masks;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor fg({8, 8});
      for (float& v : fg.values()) v = rng() % 2 ? 1.0f : 0.0f;
      masks.push_back(MaskPair::from_foreground(fg));
    }
    AttackConfig cfg;
    cfg.norm = batch % 2 ? Norm::l2 : Norm::linf;
    cfg.eps_fg = static_cast<float>(uniform(rng, 0.0, cfg.norm == Norm::l2 ? 1.0 : 0.1));
    cfg.eps_bg = static_cast<float>(uniform(rng, 0.0, cfg.norm == Norm::l2 ? 4.0 : 0.3));
    cfg.lambda = batch % 3 ? 0.0f : 1.0f;
    cfg.steps = 3;
    cfg.seed = batch;
    const Tensor adv = dual_attack(model, x, y, masks, cfg);
    const auto [fstack, bstack] = stack_masks(masks, 3);
    const std::size_t stride = 3 * 64;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<float> delta(stride);
      for (std::size_t j = 0; j < stride; ++j) {
        const float v = adv[i * stride + j];
        box += !(v >= 0.0f && v <= 1.0f);
        delta[j] = v - x[i * stride + j];
      }
      const double ef = masked_norm(delta, fstack.values().subspan(i * stride, stride), cfg.norm) - cfg.eps_fg;
      const double eb = masked_norm(delta, bstack.values().subspan(i * stride, stride), cfg.norm) - cfg.eps_bg;
      worst_excess = std::max({worst_excess, ef, eb});
      violations += ef > 1e-5 || eb > 1e-5;
      ++images;
    }
  }
  const bool ok = violations == 0 && not_idempotent == 0 && box == 0;
  return {ok, fmt("10000 projections + %zu attacked images: %zu budget violations (worst excess %.2e), "
                  "%zu box violations, %zu non-idempotent projections",
                  images, violations, worst_excess, box, not_idempotent)};
}

// ---------------------------------------------------------------------------
// 3. Dual attack with all-foreground masks and lambda = 0 is PGD
// ---------------------------------------------------------------------------

Outcome pgd_reduction() {
  const Dataset d = testing_support::tiny_dataset(24, 31, 4);
  const ClassifierParams model = testing_support::random_model(architecture_for(d), 3);
  const Tensor x = d.images.slice(0, 4);
  const std::span<const int> y(d.labels.data(), 4);
  const std::vector<MaskPair> all(4, MaskPair::all_foreground(32, 32));
  std::size_t same = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    AttackConfig cfg;
    cfg.norm = seed % 2 ? Norm::l2 : Norm::linf;
    cfg.eps_fg = cfg.norm == Norm::l2 ? 0.5f : 0.03f;
    cfg.eps_bg = cfg.norm == Norm::l2 ? 2.5f : 0.1f;
    cfg.lambda = 0.0f;
    cfg.steps = 5;
    cfg.seed = seed;
    same += dual_attack(model, x, y, all, cfg) == pgd_attack(model, x, y, cfg);
  }
  return {same == 100, fmt("%zu/100 seeds bitwise identical", same)};
}

// ---------------------------------------------------------------------------
// 4. Salience proxy
// ---------------------------------------------------------------------------

Outcome salience_suite() {
  SynthConfig sc;
  sc.samples = 500;
  sc.seed = 404;
  const Dataset d = gen_synthetic(sc);
  Rng rng = make_rng(404);
  double worst_sum = 0.0, fs_lo = 1.0, fs_hi = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    const Tensor x = i < d.size() ? d.image(i) : random_uniform({3, 32, 32}, rng);
    const SalienceMap s = salience_map(x);
    worst_sum = std::max(worst_sum, std::fabs(sum64(s.density.values()) - 1.0));
    Tensor fg({32, 32});
    for (float& v : fg.values()) v = rng() % 2 ? 1.0f : 0.0f;
    const double fs = foreground_score(s, i < d.size() ? d.mask_pair(i) : MaskPair::from_foreground(fg));
    fs_lo = std::min(fs_lo, fs);
    fs_hi = std::max(fs_hi, fs);
  }

  double worst_grad = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor x = d.image(i);
    const MaskPair m = d.mask_pair(i);
    Tape tape;
    Var xv = tape.variable_ref(x);
    Var fs = foreground_score(tape, xv, tape.constant(m.foreground.reshaped({1, 32, 32})));
    const Tensor g = backward(tape, reduce_sum(fs)).take(xv);
    auto xd = oracle::to_double(x);
    for (int k = 0; k < 50; ++k) {
      const std::size_t j = rng() % xd.size();
      const double old = xd[j];
      xd[j] = old + 1e-3;
      const double fp = oracle::foreground_score(xd, 3, 32, 32, m.foreground);
      xd[j] = old - 1e-3;
      const double fm = oracle::foreground_score(xd, 3, 32, 32, m.foreground);
      xd[j] = old;
      worst_grad = std::max(worst_grad, rel_err(g[j], (fp - fm) / 2e-3));
    }
  }

  bool uniform_ok = true;
  for (float v : {0.0f, 0.37f, 1.0f}) {
    const SalienceMap s = salience_map(Tensor({3, 32, 32}, v));
    for (float p : s.density.values()) uniform_ok = uniform_ok && p == 1.0f / 1024.0f;
  }
  const bool ok = worst_sum <= 1e-6 && fs_lo >= 0.0 && fs_hi <= 1.0 && worst_grad <= 1e-3 && uniform_ok;
  return {ok, fmt("max |sum-1| %.2e on 1000 images, FS in [%.4f, %.4f], FS gradient rel err %.2e, constant "
                  "image uniform: %s",
                  worst_sum, fs_lo, fs_hi, worst_grad, uniform_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 5. Salience penalty raises the foreground score on the Clean model
// ---------------------------------------------------------------------------

Outcome lambda_trend(DeskTask& task) {
  const EvalTarget clean{"clean", task.clean()};
  const auto t0 = Clock::now();
  AttackSpec s;
  s.kind = AttackName::dual;
  s.cfg.eps_fg = 0.5f;
  s.cfg.eps_bg = 2.5f;
  s.cfg.seed = 9;
  s.cfg.lambda = 0.0f;
  const double fs0 = *eval_accuracy(clean, task.test, s, task.test_masks).mean_fs;
  s.cfg.lambda = 1.0f;
  const double fs1 = *eval_accuracy(clean, task.test, s, task.test_masks).mean_fs;
  const double secs = seconds_since(t0);
  return {fs1 - fs0 >= 0.02 && secs <= 600.0,
          fmt("%zu images: mean FS %.4f at lambda=0, %.4f at lambda=1 (gain %.4f, need >= 0.02), %.0f s",
              task.test.size(), fs0, fs1, fs1 - fs0, secs)};
}

// ---------------------------------------------------------------------------
// 6-8, 11. Clean vs AT-PGD vs AT-Dual
// ---------------------------------------------------------------------------

Outcome attack_strength(DeskTask& task) {
  const EvalTarget clean{"clean", task.clean()}, pgd{"at-pgd", task.at_pgd()}, dual{"at-dual", task.at_dual()};
  const auto t0 = Clock::now();
  const AttackSpec s = matched_dual_attack();
  const double a_clean = *eval_accuracy(clean, task.test, s, task.test_masks).adv_acc;
  const double a_pgd = *eval_accuracy(pgd, task.test, s, task.test_masks).adv_acc;
  const double a_dual = *eval_accuracy(dual, task.test, s, task.test_masks).adv_acc;
  // Training time of the three models plus evaluation; models loaded from a cache contribute nothing.
  double secs = seconds_since(t0);
  for (const char* m : {"clean", "at_pgd", "at_dual"}) {
    if (task.training_seconds.count(m)) secs += task.training_seconds.at(m);
  }
  const bool ok = a_dual - a_pgd >= 0.10 && a_pgd > a_clean && a_dual > a_clean && secs <= 3600.0;
  // Reported only: the same attack with the salience term at lambda = 1.
  const AttackSpec s1 = matched_dual_attack(1.0f);
  const double l1[3] = {*eval_accuracy(clean, task.test, s1, task.test_masks).adv_acc,
                        *eval_accuracy(pgd, task.test, s1, task.test_masks).adv_acc,
                        *eval_accuracy(dual, task.test, s1, task.test_masks).adv_acc};
  return {ok, fmt("dual attack eps_F=%.2f eps_B=%.2f lambda=0 adversarial accuracy: Clean %.4f, AT-PGD %.4f, "
                  "AT-Dual %.4f (AT-Dual - AT-PGD = %+.1f pp, need >= 10), %.0f s; at lambda=1: %.4f, %.4f, %.4f",
                  kTrainEpsF, kTrainEpsB, a_clean, a_pgd, a_dual, 100.0 * (a_dual - a_pgd), secs, l1[0], l1[1],
                  l1[2])};
}

Outcome clean_preservation(DeskTask& task) {
  const double c = accuracy(task.clean(), task.test), d = accuracy(task.at_dual(), task.test);
  return {c - d <= 0.10, fmt("clean test accuracy: Clean %.4f, AT-Dual %.4f (gap %.1f pp, limit 10)", c, d,
                             100.0 * (c - d))};
}

Outcome transferability(DeskTask& task) {
  const std::vector<EvalTarget> models{{"clean", task.clean()}, {"at-pgd", task.at_pgd()}, {"at-dual", task.at_dual()}};
  const auto t0 = Clock::now();
  const auto m = transfer_matrix(models, task.test, matched_dual_attack());
  const double secs = seconds_since(t0);
  // m[source][target]; each target is scored on examples crafted against the other two models.
  const double dual_target = 0.5 * (m[0][2] + m[1][2]);
  const double pgd_target = 0.5 * (m[0][1] + m[2][1]);
  return {dual_target > pgd_target && secs <= 900.0,
          fmt("transferred accuracy: AT-Dual target %.4f (from Clean %.4f, AT-PGD %.4f), AT-PGD target %.4f "
              "(from Clean %.4f, AT-Dual %.4f), %.0f s",
              dual_target, m[0][2], m[1][2], pgd_target, m[0][1], m[2][1], secs)};
}

Outcome concentration(DeskTask& task) {
  const auto t0 = Clock::now();
  const double c = mean(gradient_concentration(task.clean(), task.test, task.test_masks));
  const double p = mean(gradient_concentration(task.at_pgd(), task.test, task.test_masks));
  const double d = mean(gradient_concentration(task.at_dual(), task.test, task.test_masks));
  const double secs = seconds_since(t0);
  return {d >= p && p >= c && secs <= 300.0,
          fmt("mean foreground share of input-gradient mass: AT-Dual %.4f, AT-PGD %.4f, Clean %.4f, %.0f s", d, p,
              c, secs)};
}

// ---------------------------------------------------------------------------
// 9. Randomized smoothing
// ---------------------------------------------------------------------------

Outcome smoothing(DeskTask& task) {
  const auto t0 = Clock::now();
  const ClassifierParams zero = rs_train(task.train, task.clean_config(), 0.0f);
  bool same = zero.tensors.size() == task.clean().tensors.size();
  for (std::size_t i = 0; same && i < zero.tensors.size(); ++i) same = zero.tensors[i] == task.clean().tensors[i];

  SmoothedClassifier single{task.noise(0.25f), 0.25f, 1};
  std::size_t abstained = 0;
  for (int c : rs_predict(single, task.test.images)) abstained += c == kAbstain;
  const std::vector<std::size_t> split_votes{50, 50, 0, 0, 0, 0};
  const bool split_abstains = smoothed_decision(split_votes, 100, 0.001) == kAbstain;

  const double acc25 = smoothed_accuracy({task.noise(0.25f), 0.25f, 100}, task.test.images, task.test.labels);
  const double acc50 = smoothed_accuracy({task.noise(0.5f), 0.5f, 100}, task.test.images, task.test.labels);
  const double secs = seconds_since(t0);
  const bool ok = same && abstained == 0 && split_abstains && acc50 < acc25 && secs <= 1200.0;
  return {ok, fmt("sigma=0 training bitwise clean: %s; n=1 abstentions %zu/%zu; 50/50 at n=100 abstains: %s; "
                  "smoothed clean accuracy (n=100) %.4f at sigma=0.25, %.4f at sigma=0.5, %.0f s",
                  same ? "yes" : "no", abstained, task.test.size(), split_abstains ? "yes" : "no", acc25, acc50,
                  secs)};
}

// ---------------------------------------------------------------------------
// 10. Formats
// ---------------------------------------------------------------------------

Outcome formats() {
  Rng rng = make_rng(1010);
  testing_support::TempDir dir("acceptance");
  std::size_t round_trip_failures = 0;
  for (int i = 0; i < 50; ++i) {
    Shape s;
    const std::size_t rank = rng() % 5;
    for (std::size_t r = 0; r < rank; ++r) s.push_back(rng() % 6);
    const Tensor t = random_normal(s, rng, 10.0f);
    round_trip_failures += !(decode_tensor(encode_tensor(t)) == t);
  }
  const Dataset d = testing_support::tiny_dataset(30, 7, 3);
  save_dataset(dir.path() / "data", d);
  const Dataset back = load_dataset(dir.path() / "data");
  round_trip_failures += !(back.images == d.images && back.labels == d.labels && back.masks && *back.masks == *d.masks);
  const ClassifierParams p = testing_support::random_model(Architecture::reference(3), 5);
  save_params(dir.path() / "m.dpt", p);
  const ClassifierParams q = load_params(dir.path() / "m.dpt");
  for (std::size_t i = 0; i < p.tensors.size(); ++i) round_trip_failures += !(p.tensors[i] == q.tensors[i]);
  round_trip_failures += !(p.arch == q.arch);

  // Fuzz: truncations and bit flips of encoded tensors, small models and dataset files.
  const auto tensor_bytes = encode_tensor(random_uniform({3, 5, 4}, rng));
  const auto model_bytes = encode_params(testing_support::random_model(Architecture{1, 4, 4, 2, 2, 1, 3, 2}, 8));
  const auto label_bytes = read_file_bytes(dir.path() / "data" / "labels.dpt");
  std::size_t structured = 0, silent = 0, other = 0;
  for (int c = 0; c < 10000; ++c) {
    const int which = c % 3;
    std::vector<std::uint8_t> bytes = which == 0 ? tensor_bytes : which == 1 ? model_bytes : label_bytes;
    if (rng() % 2) {
      bytes.resize(rng() % bytes.size());
    } else {
      const int flips = 1 + static_cast<int>(rng() % 3);
      for (int f = 0; f < flips; ++f) bytes[rng() % bytes.size()] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
    }
    try {
      if (which == 0) {
        decode_tensor(bytes);
      } else if (which == 1) {
        decode_params(bytes);
      } else {
        write_file_bytes(dir.path() / "data" / "labels.dpt", bytes);
        load_dataset(dir.path() / "data");
      }
      ++silent;
    } catch (const FormatError&) {
      ++structured;
    } catch (...) {
      ++other;
    }
  }
  const bool ok = round_trip_failures == 0 && silent == 0 && other == 0;
  return {ok, fmt("round-trip failures %zu; fuzz 10000 cases: %zu structured errors, %zu accepted, %zu other "
                  "exceptions",
                  round_trip_failures, structured, silent, other)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  std::string cache;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream s(argv[++i]);
      std::string item;
      while (std::getline(s, item, ',')) only.insert(std::stoi(item));
    } else if (a == "--cache" && i + 1 < argc) {
      cache = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--cache DIR]\n";
      return 2;
    }
  }

  DeskTask task(cache);
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient finite-difference check", gradient_check},
      {"projection and attack feasibility", feasibility},
      {"dual attack reduces to PGD", pgd_reduction},
      {"salience suite", salience_suite},
      {"lambda raises foreground score", [&] { return lambda_trend(task); }},
      {"attack-strength ordering", [&] { return attack_strength(task); }},
      {"clean accuracy preserved", [&] { return clean_preservation(task); }},
      {"transferability direction", [&] { return transferability(task); }},
      {"randomized smoothing suite", [&] { return smoothing(task); }},
      {"format round-trips and fuzz", formats},
      {"gradient concentration ordering", [&] { return concentration(task); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail << " ["
              << fmt("%.1f", seconds_since(t0)) << " s]" << std::endl;
  }
  return failed ? 1 : 0;
}
