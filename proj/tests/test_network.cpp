#include <gtest/gtest.h>

#include <map>
#include <random>
#include <sstream>

#include "m4fuse/network.hpp"
#include "m4fuse/train.hpp"

using namespace m4fuse;

namespace {

NetworkConfig small(std::uint64_t seed = 3) {
  NetworkConfig c = toy_config().model;
  c.seed = seed;
  return c;
}

Tensor<float> random_input(std::mt19937_64& rng, Shape s) {
  Tensor<float> t(std::move(s));
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

std::string bytes(const Model<float>& m) {
  std::ostringstream os;
  save_checkpoint(os, m);
  return os.str();
}

std::size_t total_for(NetworkConfig c, std::size_t M) {
  c.expert_count = M;
  c.top_k = M ? 1 : 0;
  return build<float>(c).param_count();
}

}  // namespace

TEST(Network, BuildIsDeterministicInSeed) {
  auto a = build<float>(small(1)), b = build<float>(small(1)), c = build<float>(small(2));
  EXPECT_EQ(bytes(a), bytes(b));
  auto pa = a.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pc.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pc[i].first);
    differs |= !(pa[i].second.value() == pc[i].second.value());
  }
  EXPECT_TRUE(differs);
}

TEST(Network, ShapeContract) {
  auto m = build<float>(small());
  std::mt19937_64 rng(1);
  auto x = random_input(rng, Shape{2, 4, 32, 32, 32});
  auto y = forward(m, x, route_for(m, {"A", "B"}));
  EXPECT_EQ(y.shape(), (Shape{2, 4, 32, 32, 32}));
  EXPECT_TRUE(y.all_finite());
  auto z = forward(m, random_input(rng, Shape{1, 4, 32, 64, 64}), route_for(m, {"B"}));
  EXPECT_EQ(z.shape(), (Shape{1, 4, 32, 64, 64}));
}

TEST(Network, RejectsBadInputs) {
  auto m = build<float>(small());
  std::mt19937_64 rng(2);
  EXPECT_THROW(forward(m, random_input(rng, Shape{1, 4, 16, 32, 32}), route_for(m, {"A"})), ShapeError);
  EXPECT_THROW(forward(m, random_input(rng, Shape{1, 3, 32, 32, 32}), route_for(m, {"A"})), ShapeError);
  EXPECT_THROW(forward(m, random_input(rng, Shape{4, 32, 32, 32}), route_for(m, {"A"})), ShapeError);
  EXPECT_THROW(route_for(m, {"Z"}), RoutingError);
}

TEST(Network, TraceCountsAndScales) {
  auto m = build<float>(small());
  std::mt19937_64 rng(3);
  ForwardTrace<float> trace;
  forward(m, random_input(rng, Shape{1, 4, 32, 32, 32}), route_for(m, {"A"}), &trace);
  EXPECT_EQ(trace.bridge_calls, 1);
  EXPECT_EQ(trace.decoder_pom_calls, 3);
  ASSERT_EQ(trace.skips.size(), 5u);
  for (std::size_t s = 0; s < 5; ++s) {
    const std::size_t r = 32 >> s;
    EXPECT_EQ(trace.skips[s].shape(), (Shape{1, m.enc[s], r, r, r}));
    EXPECT_EQ(trace.bridged[s].shape(), (Shape{1, m.dec[s], r, r, r}));
  }
  EXPECT_EQ(trace.bottleneck.shape(), (Shape{1, m.enc[4], 1, 1, 1}));
}

TEST(Network, BridgeOffMatchesVanishingBridge) {
  NetworkConfig off = small(), full = small();
  off.bridge_mode = BridgeMode::off;
  auto a = build<float>(off);
  auto b = build<float>(full);
  b.bridge.alpha.mutable_value()[0] = -1000.0f;
  b.bridge.beta.mutable_value()[0] = -1000.0f;
  std::mt19937_64 rng(4);
  auto x = random_input(rng, Shape{1, 4, 32, 32, 32});
  auto ya = forward(a, x, route_for(a, {"A"})), yb = forward(b, x, route_for(b, {"A"}));
  EXPECT_LT(max_abs_diff(ya, yb), 1e-5f);
}

TEST(Network, ReportPartitionsEveryParameter) {
  for (std::size_t M : {0, 1, 3}) {
    NetworkConfig c = small();
    c.expert_count = M;
    c.top_k = M ? 1 : 0;
    c.id_table = {};
    auto m = build<float>(c);
    auto r = param_report(m);
    EXPECT_EQ(r.total, m.param_count());
    EXPECT_EQ(r.encoder + r.decoder + r.bridge + r.head, r.total);
    EXPECT_GT(r.bridge, 0u);
    EXPECT_EQ(r.head, 4 * m.dec[0] + 4);
  }
}

TEST(Network, WiderDecoderLeavesEncoderAlone) {
  NetworkConfig c = small(), w = small();
  w.decoder_width_multiplier = 2.0;
  auto a = param_report(build<float>(c)), b = param_report(build<float>(w));
  EXPECT_EQ(a.encoder, b.encoder);
  EXPECT_EQ(a.bridge, b.bridge);
  EXPECT_GE(b.decoder, 2 * a.decoder);
  auto m = build<float>(w);
  std::mt19937_64 rng(5);
  EXPECT_EQ(forward(m, random_input(rng, Shape{1, 4, 32, 32, 32}), route_for(m, {"A"})).shape(),
            (Shape{1, 4, 32, 32, 32}));
}

TEST(Network, VariantTotalsAndExpertIncrement) {
  const NetworkConfig B = variant_config("B");
  const std::size_t t0 = total_for(B, 0), t1 = total_for(B, 1), t2 = total_for(B, 2);
  EXPECT_EQ(t1, 1106828u);
  EXPECT_EQ(t2 - t1, 124080u);
  EXPECT_EQ(t1 - t0, t2 - t1);
  std::size_t prev = 0;
  for (const char* v : {"T", "S", "B", "L"}) {
    const std::size_t t = total_for(variant_config(v), 1);
    EXPECT_GT(t, prev) << v;
    prev = t;
  }
  EXPECT_THROW(variant_config("XL"), ConfigError);
}

TEST(Network, ExpertsOnlyAddThroughTheirBlocks) {
  // Silencing every expert's norm reduces a routed model to the shared-only one.
  NetworkConfig with = small(), without = small();
  without.expert_count = 0;
  without.top_k = 0;
  without.id_table = {};
  auto a = build<float>(with);
  auto b = build<float>(without);
  std::map<std::string, Var<float>> src;
  for (auto& [n, v] : a.parameters()) src.emplace(n, v);
  for (auto& [n, v] : b.parameters()) v.mutable_value() = src.at(n).value();
  for (auto* bank : {&a.peu4, &a.peu5, &a.peub})
    for (auto& e : bank->experts) {
      e.gn_gain.mutable_value().fill(0.0f);
      e.gn_bias.mutable_value().fill(0.0f);
    }
  std::mt19937_64 rng(6);
  auto x = random_input(rng, Shape{2, 4, 32, 32, 32});
  auto ya = forward(a, x, route_for(a, {"A", "B"}));
  auto yb = forward(b, x, route_for(b, {"A", "B"}));
  EXPECT_LT(max_abs_diff(ya, yb), 1e-6f);
}

TEST(Network, CheckpointRoundTrip) {
  auto m = build<float>(small(9));
  std::mt19937_64 rng(7);
  for (auto& [n, v] : m.parameters())
    for (auto& e : v.mutable_value().vec()) e += 0.01f * static_cast<float>(rng() % 100);
  const std::string blob = bytes(m);
  std::istringstream is(blob);
  auto back = load_checkpoint(is);
  EXPECT_EQ(bytes(back), blob);
  auto x = random_input(rng, Shape{1, 4, 32, 32, 32});
  EXPECT_EQ(forward(m, x, route_for(m, {"B"})), forward(back, x, route_for(back, {"B"})));
}

TEST(Network, CheckpointRejectsDamage) {
  const std::string blob = bytes(build<float>(small()));
  auto load = [](std::string s) {
    std::istringstream is(s);
    return load_checkpoint(is);
  };
  std::string bad = blob;
  bad[0] = 'X';
  EXPECT_THROW(load(bad), IoError);
  bad = blob;
  bad[4] = 9;
  EXPECT_THROW(load(bad), IoError);
  bad = blob;
  bad[12] ^= 1;  // inside the config text
  EXPECT_THROW(load(bad), Error);
  EXPECT_THROW(load(blob.substr(0, blob.size() / 2)), IoError);
  EXPECT_THROW(load_checkpoint(std::filesystem::path("/nonexistent/ckpt.m4fc")), IoError);
}

TEST(Network, CastPreservesTheFunction) {
  auto m = build<float>(small());
  auto d = cast_model<double>(m);
  EXPECT_EQ(d.param_count(), m.param_count());
  std::mt19937_64 rng(8);
  auto x = random_input(rng, Shape{1, 4, 32, 32, 32});
  auto yf = forward(m, x, route_for(m, {"A"}));
  auto yd = forward(d, x.cast<double>(), route_for(d, {"A"}));
  EXPECT_LT(max_abs_diff(yf.cast<double>(), yd), 1e-3);
}
