#include <gtest/gtest.h>

#include "../support/helpers.hpp"
#include "../support/oracles.hpp"

using namespace dualpert;

namespace {

bool same_params(const ClassifierParams& a, const ClassifierParams& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (!(a.tensors[i] == b.tensors[i])) return false;
  }
  return true;
}

TrainConfig short_config() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 8;
  cfg.learning_rate = 3e-3f;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST(Training, LossDecreasesOnSmallTask) {
  const Dataset d = testing_support::tiny_dataset(48);
  TrainConfig cfg = short_config();
  cfg.epochs = 6;
  std::vector<TrainLogRow> log;
  clean_train(d, cfg, &log);
  ASSERT_EQ(log.size(), 6u);
  EXPECT_LT(log.back().loss, log.front().loss);
  EXPECT_EQ(log.back().epoch, 5u);
}

TEST(Training, SameSeedIsBitwiseReproducible) {
  const Dataset d = testing_support::tiny_dataset(24);
  const TrainConfig cfg = short_config();
  EXPECT_TRUE(same_params(clean_train(d, cfg), clean_train(d, cfg)));
  TrainConfig at = cfg;
  at.attack = AttackKind::dual;
  at.attack_cfg.steps = 2;
  EXPECT_TRUE(same_params(adv_train(d, at), adv_train(d, at)));
}

TEST(Training, ZeroBudgetAdversarialTrainingIsCleanTraining) {
  const Dataset d = testing_support::tiny_dataset(24);
  TrainConfig cfg = short_config();
  const ClassifierParams clean = clean_train(d, cfg);
  for (AttackKind k : {AttackKind::pgd, AttackKind::dual}) {
    cfg.attack = k;
    cfg.attack_cfg.eps_fg = 0.0f;
    cfg.attack_cfg.eps_bg = 0.0f;
    cfg.attack_cfg.steps = 2;
    EXPECT_TRUE(same_params(adv_train(d, cfg), clean));
  }
}

TEST(Training, ZeroSigmaNoiseTrainingIsCleanTraining) {
  const Dataset d = testing_support::tiny_dataset(24);
  const TrainConfig cfg = short_config();
  EXPECT_TRUE(same_params(rs_train(d, cfg, 0.0f), clean_train(d, cfg)));
  EXPECT_FALSE(same_params(rs_train(d, cfg, 0.25f), clean_train(d, cfg)));
  EXPECT_THROW(rs_train(d, cfg, -1.0f), ArgumentError);
}

TEST(Training, LearningRateSchedule) {
  TrainConfig cfg;
  cfg.learning_rate = 1.0f;
  cfg.decay = 0.5f;
  cfg.decay_epochs = {2, 4};
  EXPECT_EQ(cfg.rate_at(0), 1.0f);
  EXPECT_EQ(cfg.rate_at(2), 0.5f);
  EXPECT_EQ(cfg.rate_at(3), 0.5f);
  EXPECT_EQ(cfg.rate_at(4), 0.25f);
  cfg.decay_epochs = {4, 2};
  EXPECT_THROW(cfg.validate(), ArgumentError);
}

TEST(Training, InvalidConfigurationsAreRejected) {
  const Dataset d = testing_support::tiny_dataset(12);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(clean_train(d, cfg), ArgumentError);
  cfg = TrainConfig{};
  EXPECT_THROW(adv_train(d, cfg), ArgumentError);  // no inner attack
  Dataset unmasked = d;
  unmasked.masks.reset();
  cfg.attack = AttackKind::dual;
  cfg.masks = MaskSource::ground_truth;
  EXPECT_THROW(adv_train(unmasked, cfg), ArgumentError);
}

TEST(MaskSources, AutomaticPrefersGroundTruth) {
  Dataset d = testing_support::tiny_dataset(6);
  const auto gt = dataset_masks(d, MaskSource::automatic);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_TRUE(gt[i].foreground == d.mask_pair(i).foreground);
  d.masks.reset();
  const auto fx = dataset_masks(d, MaskSource::automatic);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_TRUE(fx[i].foreground == fixation_masks(d.image(i)).foreground);
}

TEST(Smoothing, BinomialPValueMatchesDirectSum) {
  for (std::size_t n : {2u, 10u, 37u, 100u}) {
    for (std::size_t top = n / 2; top <= n; ++top) {
      const double ref = std::min(1.0, 2.0 * oracle::binomial_upper_tail(n, top));
      EXPECT_NEAR(two_sided_binomial_p(top, n - top), ref, 1e-9 + 1e-9 * ref) << n << " " << top;
    }
  }
}

TEST(Smoothing, DecisionRules) {
  const std::vector<std::size_t> split{50, 50, 0};
  EXPECT_EQ(smoothed_decision(split, 100, 0.001), kAbstain);
  const std::vector<std::size_t> clear{90, 10, 0};
  EXPECT_EQ(smoothed_decision(clear, 100, 0.001), 0);
  const std::vector<std::size_t> single{0, 1, 0};
  EXPECT_EQ(smoothed_decision(single, 1, 0.001), 1);
}

TEST(Smoothing, SingleCopyNeverAbstainsAndZeroSigmaIsBaseModel) {
  const Dataset d = testing_support::tiny_dataset(24);
  SmoothedClassifier s{clean_train(d, short_config()), 0.5f, 1};
  for (int c : rs_predict(s, d.images)) EXPECT_NE(c, kAbstain);
  s.sigma = 0.0f;
  s.n = 20;  // unanimous votes: p = 2^-19, well under alpha
  EXPECT_EQ(rs_predict(s, d.images), predict_class(s.base, d.images));
  EXPECT_TRUE(rs_predict(s, d.images) == rs_predict(s, d.images));
  s.n = 0;
  EXPECT_THROW(rs_predict(s, d.images), ArgumentError);
}

TEST(Training, WarmStartContinuesFromGivenParameters) {
  const Dataset d = testing_support::tiny_dataset(24);
  TrainConfig cfg = short_config();
  const ClassifierParams first = clean_train(d, cfg);
  cfg.epochs = 1;
  cfg.init = first;
  const ClassifierParams resumed = clean_train(d, cfg);
  EXPECT_FALSE(same_params(resumed, first));
  // passing the seed's own initialization explicitly changes nothing
  cfg.init.reset();
  const ClassifierParams fresh = clean_train(d, cfg);
  cfg.init = init_model(architecture_for(d), cfg.seed);
  EXPECT_TRUE(same_params(clean_train(d, cfg), fresh));

  cfg.init = init_model(Architecture::reference(5), 1);
  EXPECT_THROW(clean_train(d, cfg), ShapeError);
}
