#include <gtest/gtest.h>

#include "../support/helpers.hpp"
#include "../support/oracles.hpp"

using namespace dualpert;
using testing_support::TempDir;

namespace {

struct CapturedWarnings {
  std::vector<std::string> messages;
  LogSink saved;
  CapturedWarnings() : saved(warning_sink()) {
    warning_sink() = [this](const std::string& m) { messages.push_back(m); };
  }
  ~CapturedWarnings() { warning_sink() = saved; }
};

}  // namespace

TEST(Salience, DensitySumsToOneAndMatchesDirectOracle) {
  const Dataset d = testing_support::tiny_dataset(20);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const SalienceMap s = salience_map(d.image(i));
    EXPECT_NEAR(sum64(s.density.values()), 1.0, 1e-6);
    EXPECT_GT(s.min(), 0.0f);
    const auto ref = oracle::dog_density(oracle::to_double(d.image(i)), 3, 32, 32);
    for (std::size_t j = 0; j < ref.size(); ++j) EXPECT_NEAR(s.density[j], ref[j], 1e-4 * ref[j] + 1e-9);
  }
}

TEST(Salience, ConstantImageGivesExactlyUniformDensity) {
  for (float v : {0.0f, 0.3f, 1.0f}) {
    const SalienceMap s = salience_map(Tensor({3, 32, 32}, v));
    for (float x : s.density.values()) EXPECT_EQ(x, s.density[0]);
  }
}

TEST(Salience, ForegroundScoreBoundsAndFullMask) {
  const Dataset d = testing_support::tiny_dataset(10);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const float fs = foreground_score(d.image(i), d.mask_pair(i));
    EXPECT_GE(fs, 0.0f);
    EXPECT_LE(fs, 1.0f);
    EXPECT_NEAR(foreground_score(d.image(i), MaskPair::all_foreground(32, 32)), 1.0f, 1e-6);
    EXPECT_NEAR(foreground_score(salience_map(d.image(i)), d.mask_pair(i)), fs, 1e-6);
  }
}

TEST(Salience, ForegroundScoreGradientMatchesFiniteDifferences) {
  const Dataset d = testing_support::tiny_dataset(6);
  const std::size_t h = 32, w = 32;
  for (std::size_t i = 0; i < 2; ++i) {
    const Tensor x = d.image(i);
    const MaskPair m = d.mask_pair(i);
    Tape tape;
    Var xv = tape.variable_ref(x);
    Var fs = foreground_score(tape, xv, tape.constant(m.foreground.reshaped({1, h, w})));
    const Tensor g = backward(tape, reduce_sum(fs)).take(xv);
    auto xd = oracle::to_double(x);
    Rng rng = make_rng(i);
    for (int probe = 0; probe < 60; ++probe) {
      const std::size_t j = rng() % x.size();
      const double old = xd[j];
      xd[j] = old + 1e-3;
      const double fp = oracle::foreground_score(xd, 3, h, w, m.foreground);
      xd[j] = old - 1e-3;
      const double fm = oracle::foreground_score(xd, 3, h, w, m.foreground);
      xd[j] = old;
      const double fd = (fp - fm) / 2e-3;
      EXPECT_LE(std::fabs(g[j] - fd) / std::max({std::fabs(double(g[j])), std::fabs(fd), 1e-4}), 1e-3) << j;
    }
  }
}

TEST(Salience, RejectsOutOfRangePixels) {
  Tensor x({3, 8, 8}, 0.5f);
  x[3] = 1.5f;
  EXPECT_THROW(salience_map(x), ArgumentError);
}

TEST(Fixation, ThresholdIsStrictMidpoint) {
  Tensor dens({1, 4}, std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f});
  const MaskPair m = threshold_masks(SalienceMap{dens});
  // t = 0.25: only 0.3 and 0.4 lie strictly above
  EXPECT_EQ(m.foreground[0], 0.0f);
  EXPECT_EQ(m.foreground[1], 0.0f);
  EXPECT_EQ(m.foreground[2], 1.0f);
  EXPECT_EQ(m.foreground[3], 1.0f);
  EXPECT_TRUE(m.is_partition());
}

TEST(Fixation, FlatMapFallsBackToAllForegroundWithWarning) {
  CapturedWarnings w;
  const MaskPair m = fixation_masks(Tensor({3, 16, 16}, 0.5f));
  EXPECT_EQ(m.foreground_count(), 256u);
  EXPECT_EQ(w.messages.size(), 1u);
}

TEST(Fixation, MasksOverlapGroundTruthOnSyntheticShapes) {
  const Dataset d = testing_support::tiny_dataset(60, 9, 6);
  std::size_t good = 0;
  for (std::size_t i = 0; i < d.size(); ++i) good += mask_iou(fixation_masks(d.image(i)), d.mask_pair(i)) >= 0.5;
  EXPECT_GE(good, d.size() * 7 / 10);
}

TEST(Fixation, IouOfIdenticalAndDisjointMasks) {
  Tensor a({2, 2}, std::vector<float>{1, 1, 0, 0}), b({2, 2}, std::vector<float>{0, 0, 1, 1});
  const MaskPair ma = MaskPair::from_foreground(a), mb = MaskPair::from_foreground(b);
  EXPECT_DOUBLE_EQ(mask_iou(ma, ma), 1.0);
  EXPECT_DOUBLE_EQ(mask_iou(ma, mb), 0.0);
}

TEST(Fixation, SegmentationFileLoads) {
  TempDir dir("seg");
  Tensor t({1, 4, 4}, 0.0f);
  t[5] = 0.9f;
  t[6] = 0.5f;  // not strictly above 0.5
  save_tensor(dir.path() / "m.dpt", t);
  const MaskPair m = masks_from_segmentation(dir.path() / "m.dpt", 4, 4);
  EXPECT_EQ(m.foreground_count(), 1u);
  EXPECT_THROW(masks_from_segmentation(dir.path() / "m.dpt", 4, 5), ShapeError);
}

TEST(MaskPair, StackingBroadcastsOverChannels) {
  const Dataset d = testing_support::tiny_dataset(6);
  std::vector<MaskPair> masks{d.mask_pair(0), d.mask_pair(1)};
  const auto [f, b] = stack_masks(masks, 3);
  EXPECT_EQ(f.shape(), (Shape{2, 3, 32, 32}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p) {
        EXPECT_EQ(f[(n * 3 + c) * 1024 + p], masks[n].foreground[p]);
        EXPECT_EQ(f[(n * 3 + c) * 1024 + p] + b[(n * 3 + c) * 1024 + p], 1.0f);
      }
}

TEST(LearnedSalience, TrainingReducesLossAndDensityIsNormalized) {
  const Dataset d = testing_support::tiny_dataset(48, 3, 6);
  FixationTrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch = 16;
  std::vector<float> losses;
  const FixationNet net = train_fixation_net(d, cfg, &losses);
  ASSERT_EQ(losses.size(), 4u);
  EXPECT_LT(losses.back(), losses.front());

  SalienceModel model{SalienceMethod::learned, std::make_shared<FixationNet>(net)};
  const SalienceMap s = salience_map(d.image(0), model);
  EXPECT_NEAR(sum64(s.density.values()), 1.0, 1e-6);

  TempDir dir("fix");
  save_fixation_net(dir.path() / "f.dpt", net);
  const FixationNet back = load_fixation_net(dir.path() / "f.dpt");
  for (std::size_t i = 0; i < net.tensors.size(); ++i) EXPECT_TRUE(back.tensors[i] == net.tensors[i]);
}

TEST(LearnedSalience, MissingNetIsAnError) {
  SalienceModel model{SalienceMethod::learned, nullptr};
  EXPECT_THROW(salience_map(Tensor({3, 8, 8}, 0.5f), model), ArgumentError);
  EXPECT_THROW(parse_salience_method("deepgaze"), ArgumentError);
}
