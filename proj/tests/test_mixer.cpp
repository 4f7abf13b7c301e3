#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "m4fuse/gradcheck.hpp"
#include "m4fuse/mixer.hpp"
#include "m4fuse/testing/oracles.hpp"

using namespace m4fuse;

namespace {

Tensor<double> random(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

struct ScanCase {
  Tensor<double> x, abar, bbar, c_out;
};

ScanCase random_case(std::mt19937_64& rng, std::size_t B, std::size_t L, std::size_t d, std::size_t W) {
  return {random(rng, Shape{B, L, W}), random(rng, Shape{d}, -0.95, 0.95), random(rng, Shape{d, W}),
          random(rng, Shape{W, d})};
}

}  // namespace

TEST(Discretize, ZeroPoleLimit) {
  Tensor<double> a(Shape{1}, 0.0), b(Shape{1, 3}, std::vector<double>{1, -2, 0.5});
  auto d = discretize(a, b, 0.7);
  EXPECT_EQ(d.abar[0], 1.0);
  for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(d.bbar[j], 0.7 * b[j]);
}

TEST(Discretize, HalfLife) {
  Tensor<double> a(Shape{1}, -1.0), b(Shape{1, 2}, std::vector<double>{2, -4});
  auto d = discretize(a, b, std::log(2.0));
  EXPECT_NEAR(d.abar[0], 0.5, 1e-15);
  EXPECT_NEAR(d.bbar[0], 1.0, 1e-15);
  EXPECT_NEAR(d.bbar[1], -2.0, 1e-15);
}

TEST(Discretize, MatchesTrapezoidQuadrature) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> pa(-3.0, -0.1), pd(0.01, 2.0);
  for (int t = 0; t < 20; ++t) {
    Tensor<double> a(Shape{3});
    for (auto& v : a.vec()) v = pa(rng);
    auto b = random(rng, Shape{3, 2});
    const double delta = pd(rng);
    auto d = discretize(a, b, delta);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_LE(std::abs(d.abar[i]), 1.0);
      const double phi = oracle::trapezoid_phi(a[i], delta);
      for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(d.bbar[i * 2 + j], phi * b[i * 2 + j], 1e-8);
    }
  }
}

TEST(Discretize, RejectsNonPositiveStep) {
  Tensor<double> a(Shape{1}, -1.0), b(Shape{1, 1}, 1.0);
  EXPECT_THROW(discretize(a, b, 0.0), ParamError);
  EXPECT_THROW(discretize(a, b, -0.5), ParamError);
}

TEST(Scan, ScalarHandCase) {
  Tensor<double> x(Shape{1, 3, 1}, 1.0), abar(Shape{1}, 0.5), bbar(Shape{1, 1}, 1.0), c(Shape{1, 1}, 1.0);
  auto y = ssm_scan(x, abar, bbar, c);
  EXPECT_EQ(y.vec(), (std::vector<double>{1.0, 1.5, 1.75}));
}

TEST(Scan, ZeroReadoutGivesZero) {
  std::mt19937_64 rng(2);
  auto k = random_case(rng, 2, 9, 3, 2);
  k.c_out.fill(0.0);
  const auto y = ssm_scan(k.x, k.abar, k.bbar, k.c_out);
  for (double v : y.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Scan, MatchesDenseRecursion) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> L(1, 64), d(1, 4), W(1, 4);
  for (int t = 0; t < 100; ++t) {
    auto k = random_case(rng, 1, L(rng), d(rng), W(rng));
    const std::size_t n = k.abar.size(), w = k.x.dim(2);
    oracle::Mat A = oracle::zeros(n, n), B = oracle::zeros(n, w), C = oracle::zeros(w, n), X;
    for (std::size_t i = 0; i < n; ++i) {
      A[i][i] = k.abar[i];
      for (std::size_t j = 0; j < w; ++j) {
        B[i][j] = k.bbar[i * w + j];
        C[j][i] = k.c_out[j * n + i];
      }
    }
    for (std::size_t s = 0; s < k.x.dim(1); ++s) X.emplace_back(k.x.data() + s * w, k.x.data() + (s + 1) * w);
    const auto ref = oracle::dense_recursion(X, A, B, C);
    const auto y = ssm_scan(k.x, k.abar, k.bbar, k.c_out);
    for (std::size_t s = 0; s < X.size(); ++s)
      for (std::size_t j = 0; j < w; ++j) ASSERT_NEAR(y[s * w + j], ref[s][j], 1e-6);
  }
}

TEST(Scan, Linear) {
  std::mt19937_64 rng(4);
  auto k = random_case(rng, 2, 40, 4, 3);
  auto x2 = random(rng, k.x.shape());
  Tensor<double> mix(k.x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 1.7 * k.x[i] - 0.3 * x2[i];
  auto y = ssm_scan(mix, k.abar, k.bbar, k.c_out);
  auto y1 = ssm_scan(k.x, k.abar, k.bbar, k.c_out), y2 = ssm_scan(x2, k.abar, k.bbar, k.c_out);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], 1.7 * y1[i] - 0.3 * y2[i], 1e-5);
}

TEST(Scan, Causal) {
  std::mt19937_64 rng(5);
  auto k = random_case(rng, 1, 30, 3, 2);
  auto y = ssm_scan(k.x, k.abar, k.bbar, k.c_out);
  auto x = k.x;
  for (std::size_t i = 20 * 2; i < x.size(); ++i) x[i] += 5.0;
  auto z = ssm_scan(x, k.abar, k.bbar, k.c_out);
  for (std::size_t i = 0; i < 20 * 2; ++i) EXPECT_EQ(y[i], z[i]);
  EXPECT_NE(y[20 * 2], z[20 * 2]);
}

TEST(Scan, AdjointMatchesFiniteDifferences) {
  // Scalar hand case first, then a random one over every input.
  auto scalar = audit_op(
      "scan1",
      {Var<double>(Tensor<double>(Shape{1, 3, 1}, 1.0), true), Var<double>(Tensor<double>(Shape{1}, 0.5), true),
       Var<double>(Tensor<double>(Shape{1, 1}, 1.0), true), Var<double>(Tensor<double>(Shape{1, 1}, 1.0), true)},
      [](Tape<double>* t, const std::vector<Var<double>>& v) { return ssm_scan(t, v[0], v[1], v[2], v[3]); },
      GradCheckOptions{.all_entries = true});
  EXPECT_TRUE(scalar.pass()) << scalar.max_rel_error;

  std::mt19937_64 rng(6);
  auto k = random_case(rng, 2, 17, 3, 2);
  auto rep = audit_op(
      "scan",
      {Var<double>(k.x, true), Var<double>(k.abar, true), Var<double>(k.bbar, true), Var<double>(k.c_out, true)},
      [](Tape<double>* t, const std::vector<Var<double>>& v) { return ssm_scan(t, v[0], v[1], v[2], v[3]); },
      GradCheckOptions{.all_entries = true});
  EXPECT_TRUE(rep.pass()) << rep.max_rel_error;
}

TEST(Discretize, DifferentiableFormMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  std::vector<Var<double>> in{Var<double>(random(rng, Shape{3}, -2.0, -0.1), true),
                              Var<double>(random(rng, Shape{3, 2}), true),
                              Var<double>(Tensor<double>(Shape{1}, 0.4), true)};
  for (int which = 0; which < 2; ++which) {
    auto rep = audit_op(
        "discretize", in,
        [which](Tape<double>* t, const std::vector<Var<double>>& v) {
          auto [abar, bbar] = discretize(t, v[0], v[1], v[2]);
          return which == 0 ? abar : bbar;
        },
        GradCheckOptions{.all_entries = true});
    EXPECT_TRUE(rep.pass()) << which << ": " << rep.max_rel_error;
  }
}

TEST(Kappa, ClosedForms) {
  Tensor<double> zero(Shape{2}), half(Shape{2}, 0.5);
  Tensor<double> b(Shape{2, 1}, std::vector<double>{3, 4}), c(Shape{1, 2}, std::vector<double>{0, 2});
  EXPECT_NEAR(kappa_bound(zero, b, c, 50), 5.0 * 2.0, 1e-9);

  Tensor<double> e1(Shape{2, 2}, std::vector<double>{1, 0, 0, 0});
  EXPECT_NEAR(kappa_bound(half, e1, e1, 200), 2.0, 1e-9);
  EXPECT_NEAR(kappa_bound(half, e1, e1, 3), 1.75, 1e-12);
}

TEST(Kappa, SpectralNormAgainstKnownMatrix) {
  // [[2,0],[0,-3]] rotated: singular values 3 and 2.
  const double c = std::cos(0.3), s = std::sin(0.3);
  Tensor<double> m(Shape{2, 2}, std::vector<double>{2 * c, -3 * s, 2 * s, 3 * c});
  EXPECT_NEAR(spectral_norm(m), 3.0, 1e-7);
  Tensor<double> diag(Shape{3}, std::vector<double>{0.1, -0.9, 0.4});
  EXPECT_EQ(spectral_norm(diag), 0.9);
}

TEST(Kappa, ScanStageRespectsNormBound) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> pa(-3.0, -0.01), raw(-3.0, 2.0);
  std::uniform_int_distribution<std::size_t> L(1, 64), d(1, 4), W(1, 4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = d(rng), w = W(rng), len = L(rng);
    Tensor<double> a(Shape{n});
    for (auto& v : a.vec()) v = pa(rng);
    SSMGroupParams<double> gp{Var<double>(a), Var<double>(random(rng, Shape{n, w})),
                              Var<double>(random(rng, Shape{w, n})), Var<double>(Tensor<double>(Shape{1}, raw(rng)))};
    Var<double> s(Tensor<double>(Shape{1}, raw(rng)));
    auto x = random(rng, Shape{1, len, w}, -2, 2);
    auto z = grouped_scan<double>(nullptr, Var<double>(x), {gp}, s).value();
    auto disc = discretize(a, gp.b_in.value(), ops::softplus(gp.delta.value()[0]));
    const double kappa = kappa_bound(disc.abar, disc.bbar, gp.c_out.value(), len);
    auto sup = [&](const Tensor<double>& v) {
      double m = 0;
      for (std::size_t k = 0; k < len; ++k) {
        double r = 0;
        for (std::size_t j = 0; j < w; ++j) r += v[k * w + j] * v[k * w + j];
        m = std::max(m, std::sqrt(r));
      }
      return m;
    };
    ASSERT_LE(sup(z), (kappa + ops::softplus(s.value()[0])) * sup(x) * (1 + 1e-12));
  }
}

namespace {

// Unfused mixer: LN, then the whole state-space stage as per-group dense
// recursions written against the oracle, then LN and projection.
Tensor<double> reference_mixer(const Tensor<double>& v, const MixerParams<double>& p) {
  const std::size_t B = v.dim(0), C = v.dim(1);
  const Dims3 dims = v.spatial();
  const std::size_t L = dims.voxels(), g = p.groups.size(), w = C / g;
  Tensor<double> seq(Shape{B, L, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < L; ++k) seq[(b * L + k) * C + c] = v[(b * C + c) * L + k];
  auto x = oracle::layer_norm(seq, p.ln_in_gain.value(), p.ln_in_bias.value(), ops::kNormEps);
  Tensor<double> z(x.shape());
  const double s = std::log1p(std::exp(p.s.value()[0]));
  for (std::size_t j = 0; j < g; ++j) {
    const auto& gp = p.groups[j];
    const std::size_t d = gp.a.value().size();
    const double delta = std::log1p(std::exp(gp.delta.value()[0]));
    oracle::Mat A = oracle::zeros(d, d), Bm = oracle::zeros(d, w), Cm = oracle::zeros(w, d);
    for (std::size_t i = 0; i < d; ++i) {
      const double ai = gp.a.value()[i];
      A[i][i] = std::exp(ai * delta);
      for (std::size_t q = 0; q < w; ++q) {
        Bm[i][q] = oracle::trapezoid_phi(ai, delta, 20000) * gp.b_in.value()[i * w + q];
        Cm[q][i] = gp.c_out.value()[q * d + i];
      }
    }
    for (std::size_t b = 0; b < B; ++b) {
      oracle::Mat X;
      for (std::size_t k = 0; k < L; ++k) {
        std::vector<double> row(w);
        for (std::size_t q = 0; q < w; ++q) row[q] = x[(b * L + k) * C + j * w + q];
        X.push_back(row);
      }
      const auto y = oracle::dense_recursion(X, A, Bm, Cm);
      for (std::size_t k = 0; k < L; ++k)
        for (std::size_t q = 0; q < w; ++q) z[(b * L + k) * C + j * w + q] = y[k][q] + s * X[k][q];
    }
  }
  auto zn = oracle::layer_norm(z, p.ln_out_gain.value(), p.ln_out_bias.value(), ops::kNormEps);
  const std::size_t Co = p.out_channels();
  Tensor<double> out(Shape{B, Co, dims.d, dims.h, dims.w});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < L; ++k)
      for (std::size_t o = 0; o < Co; ++o) {
        double acc = 0;
        for (std::size_t c = 0; c < C; ++c) acc += zn[(b * L + k) * C + c] * p.proj.value()[c * Co + o];
        out[(b * Co + o) * L + k] = acc;
      }
  return out;
}

}  // namespace

TEST(Mixer, MatchesUnfusedReference) {
  std::mt19937_64 rng(9);
  auto p = init_mixer<double>(rng, "m", 8, 6, 4, 3);
  for (auto& gp : p.groups) gp.delta.mutable_value()[0] = 0.3;  // a longer memory than the init step
  p.ln_in_gain.mutable_value() = random(rng, Shape{8}, 0.5, 1.5);
  p.ln_out_bias.mutable_value() = random(rng, Shape{8}, -0.2, 0.2);
  auto v = random(rng, Shape{1, 8, 2, 4, 4});
  auto y = mixer_forward(v, p);
  auto ref = reference_mixer(v, p);
  ASSERT_EQ(y.shape(), (Shape{1, 6, 2, 4, 4}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5);
}

TEST(Mixer, PureResidualPath) {
  std::mt19937_64 rng(10);
  auto p = init_mixer<double>(rng, "m", 4, 4, 2, 3);
  for (auto& gp : p.groups) gp.c_out.mutable_value().fill(0.0);
  p.s.mutable_value()[0] = ops::softplus_inverse(1.0);
  Tensor<double> eye(Shape{4, 4});
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  p.proj.mutable_value() = eye;
  auto v = random(rng, Shape{2, 4, 2, 2, 2});
  Tensor<double> one(Shape{4}, 1.0), zero(Shape{4});
  auto expect = ops::to_volume(ops::layer_norm(ops::layer_norm(ops::to_sequence(v), one, zero), one, zero), {2, 2, 2});
  auto y = mixer_forward(v, p);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-9);
}

TEST(Mixer, ShapeContractAndErrors) {
  std::mt19937_64 rng(11);
  auto p = init_mixer<float>(rng, "m", 8, 12, 4, 2);
  Tensor<float> v(Shape{3, 8, 2, 3, 4}, 0.5f);
  EXPECT_EQ(mixer_forward(v, p).shape(), (Shape{3, 12, 2, 3, 4}));
  EXPECT_THROW(mixer_forward(Tensor<float>(Shape{1, 4, 2, 2, 2}), p), ShapeError);
  EXPECT_THROW(init_mixer<float>(rng, "m", 10, 10, 4, 2), ConfigError);
  EXPECT_THROW(init_mixer<float>(rng, "m", 8, 12, 4, 2, MixerOptions{true, true, false}), ConfigError);
  auto q = init_mixer<float>(rng, "m", 8, 8, 4, 2, MixerOptions{true, true, false});
  EXPECT_EQ(mixer_forward(v, q).shape(), v.shape());
}

TEST(Mixer, GroupOrderIsImmaterial) {
  std::mt19937_64 rng(12);
  auto p = init_mixer<double>(rng, "m", 6, 6, 3, 2);
  auto seq = random(rng, Shape{1, 10, 6});
  auto z = grouped_scan<double>(nullptr, Var<double>(seq), p.groups, p.s).value();
  // Permute groups (2,0,1) and their input column blocks, then undo.
  const std::size_t perm[3] = {2, 0, 1};
  std::vector<SSMGroupParams<double>> pg;
  Tensor<double> ps(seq.shape());
  for (std::size_t j = 0; j < 3; ++j) {
    pg.push_back(p.groups[perm[j]]);
    for (std::size_t k = 0; k < 10; ++k)
      for (std::size_t q = 0; q < 2; ++q) ps[k * 6 + j * 2 + q] = seq[k * 6 + perm[j] * 2 + q];
  }
  auto zp = grouped_scan<double>(nullptr, Var<double>(ps), pg, p.s).value();
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t k = 0; k < 10; ++k)
      for (std::size_t q = 0; q < 2; ++q) EXPECT_EQ(zp[k * 6 + j * 2 + q], z[k * 6 + perm[j] * 2 + q]);
}

TEST(Mixer, AblationsChangeTheOutput) {
  std::mt19937_64 rng(13);
  auto v = random(rng, Shape{1, 4, 2, 2, 2});
  auto base = init_mixer<double>(rng, "m", 4, 4, 2, 3);
  for (auto& gp : base.groups) gp.delta.mutable_value()[0] = 0.5;
  auto y = mixer_forward(v, base);
  for (MixerOptions o : {MixerOptions{false, true, true}, MixerOptions{true, false, true}, MixerOptions{true, true, false}}) {
    auto p = base;
    p.options = o;
    if (!o.use_projection) p.proj = Var<double>();
    auto z = mixer_forward(v, p);
    EXPECT_EQ(z.shape(), y.shape());
    EXPECT_GT(max_abs_diff(z, y), 1e-6);
  }
}

TEST(Mixer, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  auto p = init_mixer<double>(rng, "m", 4, 6, 2, 3);
  for (auto& gp : p.groups) gp.delta.mutable_value()[0] = 0.2;
  std::vector<Var<double>> inputs{Var<double>(random(rng, Shape{1, 4, 2, 2, 2}), true)};
  p.visit("m", [&](const std::string&, const Var<double>& v) { inputs.push_back(v); });
  auto rep = audit_op(
      "mixer", inputs,
      [&p](Tape<double>* t, const std::vector<Var<double>>& v) { return mixer_forward(t, v[0], p); },
      GradCheckOptions{.all_entries = true});
  EXPECT_TRUE(rep.pass()) << "max rel " << rep.max_rel_error << ", failures " << rep.failures;
}
