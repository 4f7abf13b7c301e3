#pragma once

// Wall-clock scaling of the linear scan against dense softmax attention.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "m4fuse/mixer.hpp"
#include "m4fuse/parallel.hpp"
#include "m4fuse/tensor.hpp"

#include <json.hpp>

namespace m4fuse {

/// softmax(Q K^T / sqrt(C)) V for (L, C) operands, one query row at a time so
/// memory stays O(L).
template <class T>
Tensor<T> dense_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  const std::size_t L = q.dim(0), C = q.dim(1);
  Tensor<T> out(Shape{L, C});
  std::vector<T> s(L);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(C)));
  for (std::size_t i = 0; i < L; ++i) {
    const T* qi = q.data() + i * C;
    T mx = -INFINITY;
    for (std::size_t j = 0; j < L; ++j) {
      const T* kj = k.data() + j * C;
      T acc{};
      for (std::size_t c = 0; c < C; ++c) acc += qi[c] * kj[c];
      s[j] = acc * scale;
      mx = std::max(mx, s[j]);
    }
    T z{};
    for (auto& x : s) {
      x = std::exp(x - mx);
      z += x;
    }
    T* oi = out.data() + i * C;
    for (std::size_t j = 0; j < L; ++j) {
      const T w = s[j] / z;
      const T* vj = v.data() + j * C;
      for (std::size_t c = 0; c < C; ++c) oi[c] += w * vj[c];
    }
  }
  return out;
}

struct BenchPoint {
  std::string kernel;
  std::size_t length = 0;
  std::size_t reps = 0;
  std::size_t inner = 0;  // kernel calls per timed repetition
  double best_s = 0;  // per call
  double ratio = 0;  // t(L) / t(L/2), 0 for the first point
};

struct BenchReport {
  std::vector<BenchPoint> points;
  std::vector<std::string> warnings;
  double scan_exponent = 0, attention_exponent = 0;  // least-squares slope of log t on log L
  bool scan_ok = true, attention_ok = true;
  bool pass() const { return scan_ok && attention_ok; }
};

struct BenchOptions {
  std::vector<std::size_t> scan_lengths{4096, 8192, 16384, 32768};
  std::vector<std::size_t> attention_lengths{1024, 2048, 4096};
  std::size_t width = 16;  // channels per group / attention width
  std::size_t state_dim = 16;
  std::size_t reps = 5;
  double min_sample_s = 0.02;  // grow the inner loop until a sample lasts this long
  double scan_lo = 1.6, scan_hi = 2.6, attention_min = 3.2;
  std::uint64_t seed = 0;
};

namespace detail {
inline double loglog_slope(const std::vector<BenchPoint>& pts) {
  if (pts.size() < 2) return 0.0;
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    mx += std::log(static_cast<double>(p.length));
    my += std::log(p.best_s);
  }
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double sxy = 0, sxx = 0;
  for (const auto& p : pts) {
    const double dx = std::log(static_cast<double>(p.length)) - mx;
    sxy += dx * (std::log(p.best_s) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

template <class Fn>
double seconds(Fn&& fn, std::size_t inner) {
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < inner; ++i) fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Times `make(L)` over a doubling ladder. The inner-loop count is calibrated
/// once on the shortest length and reused, so ratios compare equal work.
/// Repetitions are interleaved across lengths so load spikes hit every length
/// alike, and each point keeps its fastest sample.
template <class Make>
std::vector<BenchPoint> ladder(const std::string& name, const std::vector<std::size_t>& lengths,
                               const BenchOptions& opt, Make&& make, std::vector<std::string>& warnings) {
  using Fn = decltype(make(std::size_t{}));
  std::vector<Fn> fns;
  for (std::size_t L : lengths) {
    fns.push_back(make(L));
    fns.back()();  // warm-up
  }
  std::size_t inner = 1;
  if (!fns.empty()) {
    while (seconds(fns.front(), inner) < opt.min_sample_s && inner < (1u << 20)) inner *= 2;
    if (inner > 1) warnings.push_back(name + ": timer resolution needed " + std::to_string(inner) + " calls per sample");
  }
  const std::size_t reps = std::max<std::size_t>(3, opt.reps);
  std::vector<double> best(fns.size(), std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t li = 0; li < fns.size(); ++li)
      best[li] = std::min(best[li], seconds(fns[li], inner) / static_cast<double>(inner));
  std::vector<BenchPoint> pts;
  for (std::size_t li = 0; li < fns.size(); ++li) {
    BenchPoint p{name, lengths[li], reps, inner, best[li], 0.0};
    if (!pts.empty()) p.ratio = p.best_s / pts.back().best_s;
    pts.push_back(p);
  }
  return pts;
}
}  // namespace detail

/// Runs single-threaded regardless of M4FUSE_THREADS.
inline BenchReport bench_complexity(const BenchOptions& opt = {}) {
  ScopedThreads serial(1);
  BenchReport rep;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  auto random = [&](Shape s) {
    Tensor<float> t(std::move(s));
    for (auto& v : t.vec()) v = u(rng);
    return t;
  };
  const std::size_t W = opt.width, d = opt.state_dim;
  Tensor<float> abar(Shape{d});
  for (std::size_t i = 0; i < d; ++i) abar[i] = 0.5f + 0.4f * static_cast<float>(i) / static_cast<float>(d);
  const Tensor<float> bbar = random(Shape{d, W}), cout = random(Shape{W, d});

  auto scan = detail::ladder("scan", opt.scan_lengths, opt, [&](std::size_t L) {
    auto x = std::make_shared<Tensor<float>>(random(Shape{1, L, W}));
    return [x, &abar, &bbar, &cout] {
      volatile float sink = ssm_scan(*x, abar, bbar, cout)[0];
      (void)sink;
    };
  }, rep.warnings);
  auto attn = detail::ladder("attention", opt.attention_lengths, opt, [&](std::size_t L) {
    auto q = std::make_shared<Tensor<float>>(random(Shape{L, W}));
    auto k = std::make_shared<Tensor<float>>(random(Shape{L, W}));
    auto v = std::make_shared<Tensor<float>>(random(Shape{L, W}));
    return [q, k, v] {
      volatile float sink = dense_attention(*q, *k, *v)[0];
      (void)sink;
    };
  }, rep.warnings);
  rep.scan_exponent = detail::loglog_slope(scan);
  rep.attention_exponent = detail::loglog_slope(attn);
  for (auto& p : scan) {
    if (p.ratio != 0.0 && (p.ratio < opt.scan_lo || p.ratio > opt.scan_hi)) rep.scan_ok = false;
    rep.points.push_back(p);
  }
  for (auto& p : attn) {
    if (p.ratio != 0.0 && p.ratio < opt.attention_min) rep.attention_ok = false;
    rep.points.push_back(p);
  }
  return rep;
}

inline nlohmann::json to_json(const BenchPoint& p) {
  return {{"kernel", p.kernel}, {"length", p.length}, {"reps", p.reps},   {"inner", p.inner},
          {"best_s", p.best_s}, {"ratio", p.ratio},   {"model", p.kernel == "scan" ? "linear" : "quadratic"}};
}

}  // namespace m4fuse
