#pragma once

// Grouped state-space mixer: the channel axis of the raster-ordered sequence
// is split into g groups, each scanned by its own diagonal linear recurrence
// with a softplus-scaled residual, then normalized and projected.

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "m4fuse/autodiff.hpp"
#include "m4fuse/fault_injection.hpp"
#include "m4fuse/nn.hpp"
#include "m4fuse/ops.hpp"

namespace m4fuse {

/// One channel group's continuous system. `a` is the diagonal of A (d),
/// `b_in` is d x (C/g), `c_out` is (C/g) x d, and `delta` holds the raw step
/// size mapped through softplus.
template <class T>
struct SSMGroupParams {
  Var<T> a, b_in, c_out, delta;

  std::size_t state_dim() const { return a.value().size(); }
  std::size_t width() const { return b_in.shape()[1]; }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".a", a);
    f(prefix + ".b_in", b_in);
    f(prefix + ".c_out", c_out);
    f(prefix + ".delta", delta);
  }
};

/// Sub-component switches for mixer ablations.
struct MixerOptions {
  bool use_ssm = true;
  bool use_skip_scale = true;
  bool use_projection = true;
};

template <class T>
struct MixerParams {
  std::vector<SSMGroupParams<T>> groups;
  Var<T> s;  // raw residual scale, softplus-mapped
  Var<T> proj;  // C x C_out; empty when the projection is ablated
  Var<T> ln_in_gain, ln_in_bias, ln_out_gain, ln_out_bias;
  MixerOptions options;

  std::size_t in_channels() const { return ln_in_gain.value().size(); }
  std::size_t out_channels() const { return proj ? proj.shape()[1] : in_channels(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".ln_in.gain", ln_in_gain);
    f(prefix + ".ln_in.bias", ln_in_bias);
    for (std::size_t j = 0; j < groups.size(); ++j) groups[j].visit(prefix + ".group" + std::to_string(j), f);
    f(prefix + ".s", s);
    f(prefix + ".ln_out.gain", ln_out_gain);
    f(prefix + ".ln_out.bias", ln_out_bias);
    if (proj) f(prefix + ".proj", proj);
  }
};

// ---------------------------------------------------------------------------
// Discretization

template <class T>
struct Discretized {
  Tensor<T> abar;  // d
  Tensor<T> bbar;  // d x (C/g)
};

namespace detail {
inline constexpr double kZeroPole = 1e-8;

// phi(a, delta) = integral_0^delta exp(a tau) dtau and its partials.
inline double phi(double a, double delta) { return std::abs(a) < kZeroPole ? delta : std::expm1(a * delta) / a; }

inline double dphi_da(double a, double delta) {
  const double x = a * delta;
  if (std::abs(x) < 1e-3) return delta * delta * (0.5 + x / 3.0 + x * x / 8.0);
  return delta * delta * (x * std::exp(x) - std::expm1(x)) / (x * x);
}
}  // namespace detail

/// Zero-order-hold discretization of a diagonal system:
/// abar_i = exp(a_i delta), bbar_ij = (exp(a_i delta) - 1)/a_i * b_ij, with the
/// delta * b_ij limit when |a_i| < 1e-8.
template <class T>
Discretized<T> discretize(const Tensor<T>& a, const Tensor<T>& b_in, double delta) {
  if (!(delta > 0.0)) throw ParamError("discretize: step size must be positive, got " + std::to_string(delta));
  const std::size_t d = a.size();
  if (b_in.rank() != 2 || b_in.dim(0) != d) throw ShapeError("discretize: b_in must be d x (C/g)");
  const std::size_t w = b_in.dim(1);
  const bool corrupt = active_fault().load() == Fault::abar_formula;
  Discretized<T> out{Tensor<T>(Shape{d}), Tensor<T>(Shape{d, w})};
  for (std::size_t i = 0; i < d; ++i) {
    const double ai = a[i];
    out.abar[i] = static_cast<T>(corrupt ? 1.0 + ai * delta : std::exp(ai * delta));
    const double ph = corrupt ? delta : detail::phi(ai, delta);
    for (std::size_t j = 0; j < w; ++j) out.bbar[i * w + j] = static_cast<T>(ph * b_in[i * w + j]);
  }
  return out;
}

/// Differentiable discretization; `delta` is the already-positive step size.
template <class T>
std::pair<Var<T>, Var<T>> discretize(Tape<T>* tape, const Var<T>& a, const Var<T>& b_in, const Var<T>& delta) {
  const double dt = delta.value()[0];
  auto disc = discretize(a.value(), b_in.value(), dt);
  const bool rec = ad::should_record(tape, {&a, &b_in, &delta});
  Var<T> abar(std::move(disc.abar), rec), bbar(std::move(disc.bbar), rec);
  if (rec) {
    const bool corrupt = active_fault().load() == Fault::abar_formula;
    tape->record([a, b_in, delta, abar, bbar, dt, corrupt] {
      const std::size_t d = a.value().size(), w = b_in.shape()[1];
      Tensor<T>* ga = a.grad_sink();
      Tensor<T>* gb = b_in.grad_sink();
      Tensor<T>* gd = delta.grad_sink();
      double gdelta = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double ai = a.value()[i];
        const double e = std::exp(ai * dt);
        double g_a = 0.0;
        if (abar.has_grad()) {
          const double g = abar.grad()[i];
          g_a += g * (corrupt ? dt : dt * e);
          gdelta += g * (corrupt ? ai : ai * e);
        }
        if (bbar.has_grad()) {
          const double ph = corrupt ? dt : detail::phi(ai, dt);
          double gphi = 0.0;
          for (std::size_t j = 0; j < w; ++j) {
            const double g = bbar.grad()[i * w + j];
            gphi += g * b_in.value()[i * w + j];
            if (gb) (*gb)[i * w + j] += static_cast<T>(g * ph);
          }
          g_a += gphi * (corrupt ? 0.0 : detail::dphi_da(ai, dt));
          gdelta += gphi * (corrupt ? 1.0 : e);
        }
        if (ga) (*ga)[i] += static_cast<T>(g_a);
      }
      if (gd) (*gd)[0] += static_cast<T>(gdelta);
    });
  }
  return {abar, bbar};
}

// ---------------------------------------------------------------------------
// Scan

/// Causal diagonal recurrence over a (B, L, W) sequence with zero initial
/// state: h <- abar * h + bbar x_k, y_k = c_out h (read after the update).
/// `states`, when given, receives every post-update state (B x L x d).
template <class T>
Tensor<T> ssm_scan(const Tensor<T>& x, const Tensor<T>& abar, const Tensor<T>& bbar, const Tensor<T>& c_out,
                   std::vector<T>* states = nullptr) {
  x.require_rank(3, "ssm_scan");
  const std::size_t B = x.dim(0), L = x.dim(1), W = x.dim(2), d = abar.size();
  if (bbar.shape() != Shape{d, W} || c_out.shape() != Shape{W, d})
    throw ShapeError("ssm_scan: parameter shapes do not match width " + std::to_string(W) + " and state " +
                     std::to_string(d));
  Tensor<T> y(x.shape());
  if (states) states->assign(B * L * d, T{});
  std::vector<T> h(d);
  const T* A = abar.data();
  const T* Bm = bbar.data();
  const T* Cm = c_out.data();
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(h.begin(), h.end(), T{});
    for (std::size_t k = 0; k < L; ++k) {
      const T* xk = x.data() + (b * L + k) * W;
      for (std::size_t i = 0; i < d; ++i) {
        T acc = A[i] * h[i];
        const T* br = Bm + i * W;
        for (std::size_t j = 0; j < W; ++j) acc += br[j] * xk[j];
        h[i] = acc;
      }
      T* yk = y.data() + (b * L + k) * W;
      for (std::size_t j = 0; j < W; ++j) {
        T acc{};
        const T* cr = Cm + j * d;
        for (std::size_t i = 0; i < d; ++i) acc += cr[i] * h[i];
        yk[j] = acc;
      }
      if (states) std::copy(h.begin(), h.end(), states->begin() + (b * L + k) * d);
    }
  }
  return y;
}

/// Adjoint recursion, run backward in k.
template <class T>
void ssm_scan_backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>& abar, const Tensor<T>& bbar,
                       const Tensor<T>& c_out, const std::vector<T>& states, Tensor<T>* gx, Tensor<T>* gabar,
                       Tensor<T>* gbbar, Tensor<T>* gc) {
  const std::size_t B = x.dim(0), L = x.dim(1), W = x.dim(2), d = abar.size();
  std::vector<T> carry(d), g(d);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(carry.begin(), carry.end(), T{});
    for (std::size_t kk = L; kk-- > 0;) {
      const T* gyk = gy.data() + (b * L + kk) * W;
      const T* hk = states.data() + (b * L + kk) * d;
      const T* xk = x.data() + (b * L + kk) * W;
      for (std::size_t i = 0; i < d; ++i) {
        T acc = carry[i];
        for (std::size_t j = 0; j < W; ++j) acc += c_out[j * d + i] * gyk[j];
        g[i] = acc;
      }
      if (gc)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t i = 0; i < d; ++i) (*gc)[j * d + i] += gyk[j] * hk[i];
      if (gabar && kk > 0) {
        const T* hprev = states.data() + (b * L + kk - 1) * d;
        for (std::size_t i = 0; i < d; ++i) (*gabar)[i] += g[i] * hprev[i];
      }
      if (gbbar)
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < W; ++j) (*gbbar)[i * W + j] += g[i] * xk[j];
      if (gx) {
        T* gxk = gx->data() + (b * L + kk) * W;
        for (std::size_t j = 0; j < W; ++j) {
          T acc{};
          for (std::size_t i = 0; i < d; ++i) acc += bbar[i * W + j] * g[i];
          gxk[j] += acc;
        }
      }
      for (std::size_t i = 0; i < d; ++i) carry[i] = abar[i] * g[i];
    }
  }
}

template <class T>
Var<T> ssm_scan(Tape<T>* tape, const Var<T>& x, const Var<T>& abar, const Var<T>& bbar, const Var<T>& c_out) {
  const bool rec = ad::should_record(tape, {&x, &abar, &bbar, &c_out});
  auto states = std::make_shared<std::vector<T>>();
  Var<T> out(ssm_scan(x.value(), abar.value(), bbar.value(), c_out.value(), rec ? states.get() : nullptr), rec);
  if (rec)
    tape->record([x, abar, bbar, c_out, out, states] {
      if (!out.has_grad()) return;
      ssm_scan_backward(out.grad(), x.value(), abar.value(), bbar.value(), c_out.value(), *states, x.grad_sink(),
                        abar.grad_sink(), bbar.grad_sink(), c_out.grad_sink());
    });
  return out;
}

// ---------------------------------------------------------------------------
// Norm bound

/// Largest singular value of a rows x cols matrix by power iteration on M^T M.
template <class T>
double spectral_norm(const Tensor<T>& m, double tol = 1e-8, int max_iter = 100000) {
  if (m.rank() == 1) {  // diagonal matrix given by its diagonal
    double r = 0.0;
    for (auto v : m.vec()) r = std::max(r, std::abs(static_cast<double>(v)));
    return r;
  }
  const std::size_t R = m.dim(0), C = m.dim(1);
  std::vector<double> v(C), mv(R), w(C);
  for (std::size_t i = 0; i < C; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7);
  double lambda = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    double nv = 0.0;
    for (double x : v) nv += x * x;
    nv = std::sqrt(nv);
    if (nv == 0.0) return 0.0;
    for (double& x : v) x /= nv;
    for (std::size_t r = 0; r < R; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) acc += static_cast<double>(m[r * C + c]) * v[c];
      mv[r] = acc;
    }
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t r = 0; r < R; ++r) acc += static_cast<double>(m[r * C + c]) * mv[r];
      w[c] = acc;
    }
    double next = 0.0;
    for (std::size_t c = 0; c < C; ++c) next += v[c] * w[c];  // Rayleigh quotient of M^T M
    v = w;
    if (std::abs(next - lambda) <= tol * std::max(1.0, std::abs(next))) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return std::sqrt(std::max(lambda, 0.0));
}

/// kappa = ||c_out|| * sum_{t=0}^{L-1} ||abar||^t * ||bbar|| with spectral norms.
template <class T>
double kappa_bound(const Tensor<T>& abar, const Tensor<T>& bbar, const Tensor<T>& c_out, std::size_t horizon) {
  const double na = spectral_norm(abar), nb = spectral_norm(bbar), nc = spectral_norm(c_out);
  double series;
  if (na == 1.0)
    series = static_cast<double>(horizon);
  else if (na == 0.0)
    series = horizon > 0 ? 1.0 : 0.0;
  else
    series = (1.0 - std::pow(na, static_cast<double>(horizon))) / (1.0 - na);
  return nc * series * nb;
}

// ---------------------------------------------------------------------------
// Mixer

/// Grouped scan stage on a normalized (B, L, C) sequence:
/// Z^(j) = SSM(X^(j)) + softplus(s) X^(j), concatenated over groups.
template <class T>
Var<T> grouped_scan(Tape<T>* tape, const Var<T>& seq, const std::vector<SSMGroupParams<T>>& groups, const Var<T>& s,
                    const MixerOptions& opt = {}) {
  const std::size_t C = seq.shape()[2], g = groups.size();
  if (g == 0 || C % g != 0)
    throw ShapeError("mixer: " + std::to_string(C) + " channels not divisible into " + std::to_string(g) + " groups");
  const std::size_t w = C / g;
  Var<T> scale = opt.use_skip_scale ? nn::softplus(tape, s) : Var<T>();
  std::vector<Var<T>> parts;
  parts.reserve(g);
  for (std::size_t j = 0; j < g; ++j) {
    const auto& gp = groups[j];
    if (gp.width() != w) throw ShapeError("mixer: group " + std::to_string(j) + " width mismatch");
    Var<T> xj = nn::slice(tape, seq, 2, j * w, w);
    Var<T> zj;
    if (opt.use_ssm) {
      Var<T> delta = nn::softplus(tape, gp.delta);
      auto [abar, bbar] = discretize(tape, gp.a, gp.b_in, delta);
      zj = ssm_scan(tape, xj, abar, bbar, gp.c_out);
    }
    if (opt.use_skip_scale) {
      Var<T> res = nn::scale_by(tape, xj, scale);
      zj = zj ? nn::add(tape, zj, res) : res;
    }
    if (!zj) zj = xj;
    parts.push_back(zj);
  }
  return nn::concat(tape, parts, 2);
}

/// Full mixer on a volume: LN -> grouped scan -> LN -> projection, reshaped
/// back to (B, C_out, D, H, W).
template <class T>
Var<T> mixer_forward(Tape<T>* tape, const Var<T>& v, const MixerParams<T>& p) {
  v.value().require_rank(5, "mixer_forward");
  if (v.value().channels() != p.in_channels())
    throw ShapeError("mixer: input has " + std::to_string(v.value().channels()) + " channels, mixer expects " +
                     std::to_string(p.in_channels()));
  const Dims3 dims = v.value().spatial();
  Var<T> x = nn::layer_norm(tape, nn::to_sequence(tape, v), p.ln_in_gain, p.ln_in_bias);
  Var<T> z = grouped_scan(tape, x, p.groups, p.s, p.options);
  z = nn::layer_norm(tape, z, p.ln_out_gain, p.ln_out_bias);
  Var<T> u = p.proj ? nn::linear(tape, z, p.proj) : z;
  return nn::to_volume(tape, u, dims);
}

template <class T>
Tensor<T> mixer_forward(const Tensor<T>& v, const MixerParams<T>& p) {
  return mixer_forward<T>(nullptr, Var<T>(v), p).value();
}

/// Initialization: a_i = -0.25 * 16^(i/(d-1)) (log-spaced on [-4, -0.25]),
/// b_in and c_out ~ U(+-1/sqrt(d)), delta = 0.01, s = 1, projection
/// ~ U(+-1/sqrt(C)), affine-neutral norms.
template <class T>
MixerParams<T> init_mixer(std::mt19937_64& rng, const std::string& name, std::size_t channels,
                          std::size_t out_channels, std::size_t groups, std::size_t state_dim,
                          MixerOptions opt = {}) {
  if (groups == 0 || channels % groups != 0)
    throw ConfigError(name + ": " + std::to_string(channels) + " channels not divisible by " + std::to_string(groups) +
                      " groups");
  if (!opt.use_projection && channels != out_channels)
    throw ConfigError(name + ": projection ablation needs equal in/out widths");
  const std::size_t w = channels / groups, d = state_dim;
  auto uniform = [&rng](Tensor<T>& t, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.vec()) v = static_cast<T>(u(rng));
  };
  MixerParams<T> p;
  p.options = opt;
  p.ln_in_gain = Var<T>::parameter(Tensor<T>(Shape{channels}, T{1}), name + ".ln_in.gain");
  p.ln_in_bias = Var<T>::parameter(Tensor<T>(Shape{channels}), name + ".ln_in.bias");
  const double b_bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t j = 0; j < groups; ++j) {
    const std::string gn = name + ".group" + std::to_string(j);
    Tensor<T> a(Shape{d}), bi(Shape{d, w}), co(Shape{w, d});
    for (std::size_t i = 0; i < d; ++i)
      a[i] = static_cast<T>(d > 1 ? -0.25 * std::pow(16.0, static_cast<double>(i) / static_cast<double>(d - 1)) : -1.0);
    uniform(bi, b_bound);
    uniform(co, b_bound);
    p.groups.push_back({Var<T>::parameter(std::move(a), gn + ".a"), Var<T>::parameter(std::move(bi), gn + ".b_in"),
                        Var<T>::parameter(std::move(co), gn + ".c_out"),
                        Var<T>::parameter(Tensor<T>(Shape{1}, static_cast<T>(ops::softplus_inverse(0.01))),
                                          gn + ".delta")});
  }
  p.s = Var<T>::parameter(Tensor<T>(Shape{1}, static_cast<T>(ops::softplus_inverse(1.0))), name + ".s");
  p.ln_out_gain = Var<T>::parameter(Tensor<T>(Shape{channels}, T{1}), name + ".ln_out.gain");
  p.ln_out_bias = Var<T>::parameter(Tensor<T>(Shape{channels}), name + ".ln_out.bias");
  if (opt.use_projection) {
    Tensor<T> wproj(Shape{channels, out_channels});
    uniform(wproj, 1.0 / std::sqrt(static_cast<double>(channels)));
    p.proj = Var<T>::parameter(std::move(wproj), name + ".proj");
  }
  return p;
}

}  // namespace m4fuse
