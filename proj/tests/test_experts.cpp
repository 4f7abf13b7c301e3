#include <gtest/gtest.h>

#include <random>

#include "m4fuse/experts.hpp"
#include "m4fuse/gradcheck.hpp"

using namespace m4fuse;

namespace {

Tensor<double> random(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

Tensor<double> run(const ExpertBank<double>& bank, const Tensor<double>& u, const Route& r, bool training = false,
                   std::mt19937_64* rng = nullptr) {
  return peu_forward<double>(nullptr, Var<double>(u), r, bank, training, rng).value();
}

Tensor<double> block(const ConvBlock<double>& b, const Tensor<double>& u) {
  return block_forward<double>(nullptr, Var<double>(u), b).value();
}

Tensor<double> slice_batch(const Tensor<double>& x, std::size_t i) {
  Shape s = x.shape();
  s[0] = 1;
  const std::size_t n = x.size() / x.dim(0);
  return Tensor<double>(s, std::vector<double>(x.vec().begin() + i * n, x.vec().begin() + (i + 1) * n));
}

}  // namespace

TEST(Routing, TableLookup) {
  const IdTable table{{"A", {1}}, {"B", {2}}, {"C", {3}}};
  EXPECT_EQ(route_from_ids({"B", "A", "C"}, table, 3, 1), (Route{{2}, {1}, {3}}));
  EXPECT_EQ(route_from_ids({"C"}, table, 3, 2), (Route{{3, 1}}));
  EXPECT_EQ(route_from_ids({"A"}, table, 3, 3), (Route{{1, 2, 3}}));
  EXPECT_EQ(route_from_ids({"A", "X"}, {}, 1, 1), (Route{{1}, {1}}));
  EXPECT_EQ(route_from_ids({"Q"}, {}, 0, 0), (Route{{}}));
  EXPECT_EQ(route_from_ids({"P"}, IdTable{{"P", {3, 1}}}, 3, 2), (Route{{3, 1}}));
}

TEST(Routing, Errors) {
  const IdTable table{{"A", {1}}, {"B", {4}}, {"C", {1, 2}}};
  EXPECT_THROW(route_from_ids({"Z"}, table, 3, 1), RoutingError);
  EXPECT_THROW(route_from_ids({"B"}, table, 3, 1), RoutingError);
  EXPECT_THROW(route_from_ids({"C"}, table, 3, 3), RoutingError);
  EXPECT_THROW(route_from_ids({"A"}, IdTable{{"A", {0}}}, 3, 1), RoutingError);
  EXPECT_THROW(route_from_ids({"A"}, {}, 2, 1), RoutingError);
}

TEST(Experts, SingleExpertIsSharedPlusExpert) {
  std::mt19937_64 rng(1);
  auto bank = init_bank<double>(rng, "p", 4, 6, 2, 1, 1, 0.0);
  auto u = random(rng, Shape{1, 4, 4, 4, 4});
  auto y = run(bank, u, {{1}});
  auto ref = block(bank.shared, u);
  auto e = block(bank.experts[0], u);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i] + e[i], 1e-12);
}

TEST(Experts, AveragingIdenticalExpertsIsIdempotent) {
  std::mt19937_64 rng(2);
  auto bank = init_bank<double>(rng, "p", 4, 4, 2, 2, 2, 0.0);
  bank.experts[1] = bank.experts[0];
  auto u = random(rng, Shape{1, 4, 4, 4, 4});
  auto k2 = run(bank, u, {{1, 2}});
  auto k1 = run(bank, u, {{1}});
  EXPECT_LT(max_abs_diff(k1, k2), 1e-12);
}

TEST(Experts, MatchesPerSampleReference) {
  std::mt19937_64 rng(3);
  auto bank = init_bank<double>(rng, "p", 3, 4, 2, 3, 2, 0.0);
  auto u = random(rng, Shape{3, 3, 4, 4, 4});
  const Route route{{1, 2}, {3, 1}, {2, 3}};
  auto y = run(bank, u, route);
  for (std::size_t i = 0; i < 3; ++i) {
    auto ui = slice_batch(u, i);
    auto s = block(bank.shared, ui);
    auto a = block(bank.experts[route[i][0] - 1], ui), b = block(bank.experts[route[i][1] - 1], ui);
    auto yi = slice_batch(y, i);
    for (std::size_t k = 0; k < yi.size(); ++k) ASSERT_NEAR(yi[k], s[k] + 0.5 * (a[k] + b[k]), 1e-12);
  }
}

TEST(Experts, BatchPermutationEquivariance) {
  std::mt19937_64 rng(4);
  auto bank = init_bank<double>(rng, "p", 2, 4, 1, 3, 1, 0.0);
  auto u = random(rng, Shape{3, 2, 4, 4, 4});
  auto y = run(bank, u, {{1}, {2}, {3}});
  const std::size_t perm[3] = {2, 0, 1};
  const std::size_t n = u.size() / 3, m = y.size() / 3;
  Tensor<double> up(u.shape());
  Route rp;
  for (std::size_t i = 0; i < 3; ++i) {
    std::copy_n(u.data() + perm[i] * n, n, up.data() + i * n);
    rp.push_back({perm[i] + 1});
  }
  auto yp = run(bank, up, rp);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < m; ++k) ASSERT_EQ(yp[i * m + k], y[perm[i] * m + k]);
}

TEST(Experts, SamplesDoNotInteract) {
  std::mt19937_64 rng(5);
  auto bank = init_bank<double>(rng, "p", 2, 4, 2, 2, 1, 0.0);
  auto u = random(rng, Shape{2, 2, 4, 4, 4});
  auto y = run(bank, u, {{1}, {2}});
  auto v = u;
  for (std::size_t k = v.size() / 2; k < v.size(); ++k) v[k] *= -3.0;
  auto z = run(bank, v, {{1}, {1}});
  for (std::size_t k = 0; k < y.size() / 2; ++k) ASSERT_EQ(y[k], z[k]);
}

TEST(Experts, DropoutOnlyWhileTraining) {
  std::mt19937_64 rng(6);
  auto bank = init_bank<double>(rng, "p", 2, 4, 2, 2, 1, 0.5);
  auto u = random(rng, Shape{1, 2, 4, 4, 4});
  auto clean = run(bank, u, {{2}});
  bank.dropout_p = 0.0;
  EXPECT_EQ(run(bank, u, {{2}}), clean);
  bank.dropout_p = 0.5;
  std::mt19937_64 drng(7);
  auto noisy = run(bank, u, {{2}}, true, &drng);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (noisy[i] == 0.0) ++zeros;
    else EXPECT_NEAR(noisy[i], 2.0 * clean[i], 1e-12);
  }
  EXPECT_GT(zeros, clean.size() / 4);
  EXPECT_LT(zeros, 3 * clean.size() / 4);
}

TEST(Experts, ParameterCountIsLinearInExperts) {
  std::mt19937_64 rng(8);
  std::vector<std::size_t> totals;
  for (std::size_t m = 0; m <= 4; ++m) {
    auto bank = init_bank<double>(rng, "p", 8, 16, 4, m, 1, 0.0);
    auto c = expert_param_count(bank);
    EXPECT_EQ(c.shared, 8 * 27 + 8 + 16 * 8 + 16 + 2 * 16);
    EXPECT_EQ(c.total, c.shared + m * c.per_expert);
    totals.push_back(c.total);
  }
  for (std::size_t m = 0; m + 1 < totals.size(); ++m) EXPECT_EQ(totals[m + 1] - totals[m], totals[1] - totals[0]);
}

TEST(Experts, SharedOnlyBank) {
  std::mt19937_64 rng(9);
  auto bank = init_bank<double>(rng, "p", 2, 4, 2, 0, 3, 0.0);
  EXPECT_EQ(bank.top_k, 0u);
  auto u = random(rng, Shape{2, 2, 2, 2, 2});
  auto route = route_from_ids({"A", "B"}, {}, 0, 0);
  auto y = run(bank, u, route);
  EXPECT_EQ(slice_batch(y, 1), block(bank.shared, slice_batch(u, 1)));
}

TEST(Experts, ContractErrors) {
  std::mt19937_64 rng(10);
  EXPECT_THROW(init_bank<double>(rng, "p", 2, 4, 2, 2, 3, 0.0), ConfigError);
  EXPECT_THROW(init_bank<double>(rng, "p", 2, 4, 2, 2, 0, 0.0), ConfigError);
  EXPECT_THROW(init_bank<double>(rng, "p", 2, 4, 2, 2, 1, 1.0), ConfigError);
  EXPECT_THROW(init_bank<double>(rng, "p", 2, 5, 2, 2, 1, 0.0), ConfigError);
  auto bank = init_bank<double>(rng, "p", 2, 4, 2, 2, 1, 0.0);
  auto u = random(rng, Shape{2, 2, 2, 2, 2});
  EXPECT_THROW(run(bank, u, {{1}}), ShapeError);
  EXPECT_THROW(run(bank, u, {{1}, {3}}), RoutingError);
  EXPECT_THROW(run(bank, random(rng, Shape{2, 3, 2, 2, 2}), {{1}, {2}}), ShapeError);
}

TEST(Experts, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto bank = init_bank<double>(rng, "p", 2, 4, 2, 2, 2, 0.0);
  std::vector<Var<double>> inputs{Var<double>(random(rng, Shape{2, 2, 3, 3, 3}), true)};
  bank.visit("p", [&](const std::string&, const Var<double>& v) { inputs.push_back(v); });
  auto rep = audit_op(
      "peu", inputs,
      [&bank](Tape<double>* t, const std::vector<Var<double>>& v) {
        return peu_forward<double>(t, v[0], {{1, 2}, {2, 1}}, bank, false, nullptr);
      },
      GradCheckOptions{.entries_per_tensor = 4});
  EXPECT_TRUE(rep.pass()) << "max rel " << rep.max_rel_error << ", failures " << rep.failures;
}
