#include <gtest/gtest.h>

#include <random>

#include "m4fuse/metrics.hpp"
#include "m4fuse/testing/oracles.hpp"

using namespace m4fuse;

namespace {

BinaryMask points(Dims3 dims, std::initializer_list<std::array<std::size_t, 3>> pts) {
  BinaryMask m(dims);
  for (const auto& p : pts) m.at(p[0], p[1], p[2]) = 1;
  return m;
}

}  // namespace

TEST(Regions, BackgroundIsEmpty) {
  auto r = composite_regions(std::vector<int>(27, 0), {3, 3, 3});
  EXPECT_TRUE(r.wt.empty());
  EXPECT_TRUE(r.tc.empty());
  EXPECT_TRUE(r.et.empty());
}

TEST(Regions, TwoByTwoByTwoEnumeration) {
  const std::vector<int> labels{0, 1, 2, 4, 4, 2, 1, 0};
  auto r = composite_regions(labels, {2, 2, 2});
  EXPECT_EQ(r.wt.v, (std::vector<std::uint8_t>{0, 1, 1, 1, 1, 1, 1, 0}));
  EXPECT_EQ(r.tc.v, (std::vector<std::uint8_t>{0, 1, 0, 1, 1, 0, 1, 0}));
  EXPECT_EQ(r.et.v, (std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0, 0, 0}));
}

TEST(Regions, NestingHoldsForRandomLabels) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pick(0, 3);
  for (int t = 0; t < 50; ++t) {
    std::vector<int> labels(5 * 4 * 3);
    for (auto& l : labels) l = kBratsLabels[static_cast<std::size_t>(pick(rng))];
    auto r = composite_regions(labels, {5, 4, 3});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      ASSERT_LE(r.et.v[i], r.tc.v[i]);
      ASSERT_LE(r.tc.v[i], r.wt.v[i]);
    }
  }
}

TEST(Regions, Errors) {
  EXPECT_THROW(composite_regions({0, 3}, {1, 1, 2}), DataError);
  EXPECT_THROW(composite_regions({0, 1, 2}, {1, 1, 2}), ShapeError);
  EXPECT_THROW(brats_to_class(3), DataError);
  EXPECT_THROW(class_to_brats(4), DataError);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(brats_to_class(class_to_brats(k)), k);
}

TEST(Dice, HandCases) {
  const Dims3 d{1, 1, 4};
  auto a = points(d, {{0, 0, 0}, {0, 0, 1}});
  EXPECT_EQ(dice(a, a), 1.0);
  EXPECT_EQ(dice(a, points(d, {{0, 0, 2}, {0, 0, 3}})), 0.0);
  EXPECT_EQ(dice(a, points(d, {{0, 0, 1}, {0, 0, 2}})), 0.5);
  EXPECT_EQ(dice(BinaryMask(d), BinaryMask(d)), 1.0);
  EXPECT_THROW(dice(a, BinaryMask({1, 2, 2})), ShapeError);
}

TEST(Dice, MatchesOracleAndIsSymmetric) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> side(1, 12);
  for (int t = 0; t < 200; ++t) {
    const Dims3 d{side(rng), side(rng), side(rng)};
    auto a = oracle::random_mask(rng, d, 0.3), b = oracle::random_mask(rng, d, 0.3);
    ASSERT_NEAR(dice(a, b), oracle::dice(a, b), 1e-12);
    ASSERT_EQ(dice(a, b), dice(b, a));
  }
}

TEST(Dice, GrowingOverlapNeverHurts) {
  // Slide a 4-voxel bar toward a fixed one; overlap rises, sizes stay fixed.
  const Dims3 d{1, 1, 12};
  BinaryMask fixed(d);
  for (std::size_t w = 0; w < 4; ++w) fixed.at(0, 0, w) = 1;
  double prev = -1.0;
  for (std::size_t off = 8; off-- > 0;) {
    BinaryMask moving(d);
    for (std::size_t w = off; w < off + 4; ++w) moving.at(0, 0, w) = 1;
    const double s = dice(fixed, moving);
    EXPECT_GE(s, prev);
    prev = s;
  }
  EXPECT_EQ(prev, 1.0);
}

TEST(Hd95, HandCases) {
  const Dims3 d{1, 1, 6};
  auto a = points(d, {{0, 0, 1}});
  auto b = points(d, {{0, 0, 4}});
  EXPECT_EQ(hd95(a, b), 3.0);
  EXPECT_EQ(hd95(a, a), 0.0);
  b.spacing = a.spacing = {1.0, 1.0, 0.5};
  EXPECT_EQ(hd95(a, b), 1.5);
}

TEST(Hd95, EmptyMasksAreMissing) {
  const Dims3 d{2, 2, 2};
  auto a = points(d, {{1, 1, 1}});
  EXPECT_THROW(hd95(a, BinaryMask(d)), MetricError);
  EXPECT_FALSE(hd95_or_missing(a, BinaryMask(d)).has_value());
  EXPECT_FALSE(hd95_or_missing(BinaryMask(d), BinaryMask(d)).has_value());
  EXPECT_THROW(hd95(a, BinaryMask({2, 2, 3})), ShapeError);
}

TEST(Hd95, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> side(1, 12);
  std::uniform_real_distribution<double> spacing(0.5, 2.0);
  for (int t = 0; t < 150; ++t) {
    const Dims3 d{side(rng), side(rng), side(rng)};
    auto a = t % 2 ? oracle::random_blob(rng, d) : oracle::random_mask(rng, d, 0.2);
    auto b = t % 3 ? oracle::random_blob(rng, d) : oracle::random_mask(rng, d, 0.2);
    if (a.empty() || b.empty()) continue;
    if (t % 5 == 0) a.spacing = b.spacing = {spacing(rng), spacing(rng), spacing(rng)};
    ASSERT_NEAR(hd95(a, b), oracle::hd95(a, b), 1e-6) << t;
    ASSERT_EQ(hd95(a, b), hd95(b, a));
    ASSERT_EQ(hd95(a, a), 0.0);
  }
}

TEST(Scores, PerRegion) {
  const Dims3 d{1, 2, 4};
  const std::vector<int> gt{0, 2, 1, 4, 0, 2, 2, 4};
  auto same = score_regions(gt, gt, d);
  for (int r = 0; r < 3; ++r) {
    EXPECT_EQ(same.dice[r], 1.0);
    EXPECT_EQ(same.hd95[r], 0.0);
  }
  auto none = score_regions(std::vector<int>(8, 0), gt, d);
  EXPECT_EQ(none.mean_dice(), 0.0);
  EXPECT_FALSE(none.hd95[0].has_value());
  auto fast = score_regions(gt, gt, d, false);
  EXPECT_FALSE(fast.hd95[2].has_value());
}
