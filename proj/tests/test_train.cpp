#include <gtest/gtest.h>

#include <cmath>

#include "m4fuse/train.hpp"

using namespace m4fuse;

namespace {

Config quick() {
  Config c = toy_config();
  c.synthetic.noise = 0.3;
  c.synthetic.count = 8;
  c.val_count = 2;
  return c;
}

std::pair<std::vector<Sample>, std::vector<Sample>> data(const Config& c) {
  return split_holdout(make_dataset(c.synthetic, 0, c.synthetic.count), c.val_count);
}

}  // namespace

TEST(Train, HoldoutSplit) {
  auto [tr, va] = data(quick());
  EXPECT_EQ(tr.size(), 6u);
  ASSERT_EQ(va.size(), 2u);
  EXPECT_EQ(va.back().image, make_sample(quick().synthetic, 7).image);
  auto [all, none] = split_holdout(make_dataset(quick().synthetic, 0, 1), 5);
  EXPECT_EQ(all.size(), 1u);
  EXPECT_TRUE(none.empty());
}

TEST(Train, LossFallsOverTheFirstEpochs) {
  const Config c = quick();
  auto [tr, va] = data(c);
  auto res = train_toy(c, tr, va, 5);
  ASSERT_EQ(res.log.size(), 5u);
  EXPECT_LT(res.log.back().loss, res.log.front().loss);
  for (const auto& l : res.log) {
    EXPECT_TRUE(std::isfinite(l.loss));
    EXPECT_GE(l.val_dice, 0.0);
    EXPECT_LE(l.val_dice, 1.0);
  }
  EXPECT_GE(res.best_epoch, 1u);
  EXPECT_DOUBLE_EQ(evaluate_dice(res.model, va), res.best_dice);
}

TEST(Train, SameSeedSameRun) {
  const Config c = quick();
  auto [tr, va] = data(c);
  auto a = train_toy(c, tr, va, 2), b = train_toy(c, tr, va, 2);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.log[e].loss, b.log[e].loss);
    EXPECT_EQ(a.log[e].val_dice, b.log[e].val_dice);
  }
  auto pa = a.model.parameters(), pb = b.model.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) ASSERT_EQ(pa[i].second.value(), pb[i].second.value()) << pa[i].first;
}

TEST(Train, NonFiniteInputAborts) {
  const Config c = quick();
  auto [tr, va] = data(c);
  tr[0].image[17] = NAN;
  tr.resize(1);
  EXPECT_THROW(train_toy(c, tr, va, 1), TrainingError);
  EXPECT_THROW(train_toy(c, {}, va, 1), DataError);
}

TEST(Train, PlateauStopsEarly) {
  Config c = quick();
  c.train.lr = 0.0;
  c.train.min_lr = 0.0;
  c.train.patience = 1;
  auto [tr, va] = data(c);
  tr.resize(2);
  auto res = train_toy(c, tr, va, 10);
  EXPECT_TRUE(res.stopped_early);
  EXPECT_EQ(res.log.size(), 2u);
  EXPECT_EQ(res.best_epoch, 1u);
}
