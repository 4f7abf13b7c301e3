#pragma once

// Differentiable wrappers over the primitive kernels. Every function takes an
// optional tape; with a null tape (or inputs that need no gradient) the call
// is a plain forward evaluation.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "m4fuse/autodiff.hpp"
#include "m4fuse/fault_injection.hpp"
#include "m4fuse/ops.hpp"

namespace m4fuse::nn {

using ad::Tape;
using ad::Var;

/// While alive, max-selecting ops fold their argmax pattern into `hash`, so
/// two evaluations can be compared for lying on the same smooth piece.
struct SelectionProbe {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  SelectionProbe* prev;
  SelectionProbe() : prev(current()) { current() = this; }
  ~SelectionProbe() { current() = prev; }
  SelectionProbe(const SelectionProbe&) = delete;
  SelectionProbe& operator=(const SelectionProbe&) = delete;

  static SelectionProbe*& current() {
    thread_local SelectionProbe* p = nullptr;
    return p;
  }
  static void fold(const std::vector<std::size_t>& arg) {
    SelectionProbe* p = current();
    if (!p) return;
    for (std::size_t a : arg) p->hash = (p->hash ^ a) * 0x100000001b3ULL;
  }
};

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  const bool rec = ad::should_record(tape, {&a, &b});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([a, b, out] {
      if (!out.has_grad()) return;
      a.accumulate(out.grad());
      b.accumulate(out.grad());
    });
  return out;
}

template <class T>
Var<T> scale_const(Tape<T>* tape, const Var<T>& x, T c) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v *= c;
  const bool rec = ad::should_record(tape, {&x});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([x, out, c] {
      if (!out.has_grad()) return;
      Tensor<T>* gx = x.grad_sink();
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += c * out.grad()[i];
    });
  return out;
}

/// x * s for a one-element scalar s.
template <class T>
Var<T> scale_by(Tape<T>* tape, const Var<T>& x, const Var<T>& s) {
  if (s.value().size() != 1) throw ShapeError("scale_by: scale must hold one element");
  const T c = s.value()[0];
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v *= c;
  const bool rec = ad::should_record(tape, {&x, &s});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([x, s, out, c] {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      if (Tensor<T>* gx = x.grad_sink())
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += c * g[i];
      if (Tensor<T>* gs = s.grad_sink()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += static_cast<double>(g[i]) * x.value()[i];
        (*gs)[0] += static_cast<T>(acc);
      }
    });
  return out;
}

template <class T>
Var<T> softplus(Tape<T>* tape, const Var<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = ops::softplus(x.value()[i]);
  const bool rec = ad::should_record(tape, {&x});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([x, out] {
      if (!out.has_grad()) return;
      Tensor<T>* gx = x.grad_sink();
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += out.grad()[i] * ops::sigmoid(x.value()[i]);
    });
  return out;
}

/// Logistic gate used by the bridge. Subject to the gate_sigmoid fault.
template <class T>
Var<T> gate_sigmoid(Tape<T>* tape, const Var<T>& x) {
  const bool corrupt = active_fault().load() == Fault::gate_sigmoid;
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = corrupt ? std::tanh(x.value()[i]) : ops::sigmoid(x.value()[i]);
  const bool rec = ad::should_record(tape, {&x});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([x, out, corrupt] {
      if (!out.has_grad()) return;
      Tensor<T>* gx = x.grad_sink();
      for (std::size_t i = 0; i < gx->size(); ++i) {
        const T s = out.value()[i];
        (*gx)[i] += out.grad()[i] * (corrupt ? T{1} - s * s : s * (T{1} - s));
      }
    });
  return out;
}

/// x * sigmoid(x).
template <class T>
Var<T> silu(Tape<T>* tape, const Var<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] * ops::sigmoid(x.value()[i]);
  const bool rec = ad::should_record(tape, {&x});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([x, out] {
      if (!out.has_grad()) return;
      Tensor<T>* gx = x.grad_sink();
      for (std::size_t i = 0; i < gx->size(); ++i) {
        const T v = x.value()[i], s = ops::sigmoid(v);
        (*gx)[i] += out.grad()[i] * s * (T{1} + v * (T{1} - s));
      }
    });
  return out;
}

/// Inverted dropout; masks are drawn sample-major, element-minor and kept on
/// the tape. Identity when not training or p == 0.
template <class T>
Var<T> dropout(Tape<T>* tape, const Var<T>& x, double p, bool training, std::mt19937_64* rng) {
  if (p < 0.0 || p >= 1.0) throw ParamError("dropout probability must lie in [0,1)");
  if (!training || p == 0.0) return x;
  if (!rng) throw ParamError("dropout in training mode needs an rng");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto mask = std::make_shared<std::vector<T>>(x.value().size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : *mask) m = u(*rng) >= p ? keep_scale : T{0};
  Tensor<T> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= (*mask)[i];
  const bool rec = ad::should_record(tape, {&x});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([x, out, mask] {
      if (!out.has_grad()) return;
      Tensor<T>* gx = x.grad_sink();
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += out.grad()[i] * (*mask)[i];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast products over rank-5 volumes

/// t (B,C,D,H,W) times mask (B,1,D,H,W), broadcast over channels.
template <class T>
Var<T> mul_spatial(Tape<T>* tape, const Var<T>& t, const Var<T>& mask) {
  const auto& tv = t.value();
  tv.require_rank(5, "mul_spatial");
  const std::size_t B = tv.dim(0), C = tv.dim(1), S = tv.spatial().voxels();
  if (mask.shape() != Shape{B, 1, tv.dim(2), tv.dim(3), tv.dim(4)})
    throw ShapeError("mul_spatial: mask " + shape_str(mask.shape()) + " vs " + shape_str(tv.shape()));
  Tensor<T> y(tv.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) y[(b * C + c) * S + s] = tv[(b * C + c) * S + s] * mask.value()[b * S + s];
  const bool rec = ad::should_record(tape, {&t, &mask});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([t, mask, out, B, C, S] {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      Tensor<T>* gt = t.grad_sink();
      Tensor<T>* gm = mask.grad_sink();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t s = 0; s < S; ++s) {
            const std::size_t i = (b * C + c) * S + s;
            if (gt) (*gt)[i] += g[i] * mask.value()[b * S + s];
            if (gm) (*gm)[b * S + s] += g[i] * t.value()[i];
          }
    });
  return out;
}

/// t (B,C,D,H,W) times gate (B,C), broadcast over spatial axes.
template <class T>
Var<T> mul_channel(Tape<T>* tape, const Var<T>& t, const Var<T>& gate) {
  const auto& tv = t.value();
  tv.require_rank(5, "mul_channel");
  const std::size_t B = tv.dim(0), C = tv.dim(1), S = tv.spatial().voxels();
  if (gate.shape() != Shape{B, C}) throw ShapeError("mul_channel: gate " + shape_str(gate.shape()));
  Tensor<T> y(tv.shape());
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t s = 0; s < S; ++s) y[bc * S + s] = tv[bc * S + s] * gate.value()[bc];
  const bool rec = ad::should_record(tape, {&t, &gate});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([t, gate, out, B, C, S] {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      Tensor<T>* gt = t.grad_sink();
      Tensor<T>* gg = gate.grad_sink();
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        double acc = 0.0;
        for (std::size_t s = 0; s < S; ++s) {
          if (gt) (*gt)[bc * S + s] += g[bc * S + s] * gate.value()[bc];
          acc += static_cast<double>(g[bc * S + s]) * t.value()[bc * S + s];
        }
        if (gg) (*gg)[bc] += static_cast<T>(acc);
      }
    });
  return out;
}

/// Channel-wise mean: (B,C,D,H,W) -> (B,1,D,H,W).
template <class T>
Var<T> channel_mean(Tape<T>* tape, const Var<T>& t) {
  const auto& tv = t.value();
  tv.require_rank(5, "channel_mean");
  const std::size_t B = tv.dim(0), C = tv.dim(1), S = tv.spatial().voxels();
  Tensor<T> y(Shape{B, 1, tv.dim(2), tv.dim(3), tv.dim(4)});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) acc += tv[(b * C + c) * S + s];
      y[b * S + s] = static_cast<T>(acc / static_cast<double>(C));
    }
  const bool rec = ad::should_record(tape, {&t});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([t, out, B, C, S] {
      if (!out.has_grad()) return;
      Tensor<T>* gt = t.grad_sink();
      const T inv = T{1} / static_cast<T>(C);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t s = 0; s < S; ++s) (*gt)[(b * C + c) * S + s] += out.grad()[b * S + s] * inv;
    });
  return out;
}

/// Channel-wise maximum: (B,C,D,H,W) -> (B,1,D,H,W); ties go to the lowest channel.
template <class T>
Var<T> channel_max(Tape<T>* tape, const Var<T>& t) {
  const auto& tv = t.value();
  tv.require_rank(5, "channel_max");
  const std::size_t B = tv.dim(0), C = tv.dim(1), S = tv.spatial().voxels();
  Tensor<T> y(Shape{B, 1, tv.dim(2), tv.dim(3), tv.dim(4)});
  auto arg = std::make_shared<std::vector<std::size_t>>(B * S);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (tv[(b * C + c) * S + s] > tv[(b * C + best) * S + s]) best = c;
      y[b * S + s] = tv[(b * C + best) * S + s];
      (*arg)[b * S + s] = best;
    }
  SelectionProbe::fold(*arg);
  const bool rec = ad::should_record(tape, {&t});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([t, out, arg, B, C, S] {
      if (!out.has_grad()) return;
      Tensor<T>* gt = t.grad_sink();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s) (*gt)[(b * C + (*arg)[b * S + s]) * S + s] += out.grad()[b * S + s];
    });
  return out;
}

/// Global average pooling over spatial axes: (B,C,D,H,W) -> (B,C).
template <class T>
Var<T> global_avg_pool(Tape<T>* tape, const Var<T>& t) {
  const auto& tv = t.value();
  tv.require_rank(5, "global_avg_pool");
  const std::size_t B = tv.dim(0), C = tv.dim(1), S = tv.spatial().voxels();
  Tensor<T> y(Shape{B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double acc = 0.0;
    for (std::size_t s = 0; s < S; ++s) acc += tv[bc * S + s];
    y[bc] = static_cast<T>(acc / static_cast<double>(S));
  }
  const bool rec = ad::should_record(tape, {&t});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([t, out, B, C, S] {
      if (!out.has_grad()) return;
      Tensor<T>* gt = t.grad_sink();
      const T inv = T{1} / static_cast<T>(S);
      for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t s = 0; s < S; ++s) (*gt)[bc * S + s] += out.grad()[bc] * inv;
    });
  return out;
}

// ---------------------------------------------------------------------------
// Concatenation and slicing along one axis

namespace detail {
inline void outer_inner(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
Var<T> concat(Tape<T>* tape, const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape os = parts[0].shape();
  if (axis >= os.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != os.size()) throw ShapeError("concat rank mismatch");
    total += s[axis];
    s[axis] = os[axis];
    if (s != os) throw ShapeError("concat: incompatible shapes " + shape_str(p.shape()) + " vs " + shape_str(os));
  }
  os[axis] = total;
  std::size_t outer, inner;
  detail::outer_inner(os, axis, outer, inner);
  Tensor<T> y(os);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data() + o * n * inner, n * inner, y.data() + (o * total + off) * inner);
    off += n;
  }
  const bool rec = ad::should_record(tape, parts);
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([parts, out, axis, outer, inner, total] {
      if (!out.has_grad()) return;
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t n = p.shape()[axis];
        if (Tensor<T>* g = p.grad_sink())
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < n * inner; ++k)
              (*g)[o * n * inner + k] += out.grad()[(o * total + off) * inner + k];
        off += n;
      }
    });
  return out;
}

template <class T>
Var<T> slice(Tape<T>* tape, const Var<T>& x, std::size_t axis, std::size_t start, std::size_t count) {
  const Shape& is = x.shape();
  if (axis >= is.size() || start + count > is[axis] || count == 0)
    throw ShapeError("slice out of range on " + shape_str(is));
  Shape os = is;
  os[axis] = count;
  std::size_t outer, inner;
  detail::outer_inner(is, axis, outer, inner);
  const std::size_t n = is[axis];
  Tensor<T> y(os);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.value().data() + (o * n + start) * inner, count * inner, y.data() + o * count * inner);
  const bool rec = ad::should_record(tape, {&x});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([x, out, outer, inner, n, start, count] {
      if (!out.has_grad()) return;
      Tensor<T>* g = x.grad_sink();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < count * inner; ++k)
          (*g)[(o * n + start) * inner + k] += out.grad()[o * count * inner + k];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Dense maps

/// Row-wise product x W over the last axis: (..., K) x (K, N) -> (..., N),
/// plus an optional bias of length N.
template <class T>
Var<T> linear(Tape<T>* tape, const Var<T>& x, const Var<T>& w, const Var<T>& bias = {}) {
  const std::size_t K = x.shape().back();
  if (w.value().rank() != 2 || w.shape()[0] != K)
    throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t N = w.shape()[1], rows = x.value().size() / K;
  if (bias && bias.value().size() != N) throw ShapeError("linear: bias length");
  Shape os = x.shape();
  os.back() = N;
  Tensor<T> y(os);
  const T* W = w.value().data();
  parallel_for(rows, [&](std::size_t r) {
    const T* xr = x.value().data() + r * K;
    T* yr = y.data() + r * N;
    if (bias)
      for (std::size_t n = 0; n < N; ++n) yr[n] = bias.value()[n];
    for (std::size_t k = 0; k < K; ++k) {
      const T xv = xr[k];
      const T* wr = W + k * N;
      for (std::size_t n = 0; n < N; ++n) yr[n] += xv * wr[n];
    }
  });
  const bool rec = ad::should_record(tape, {&x, &w, &bias});
  Var<T> out(std::move(y), rec);
  if (rec)
    tape->record([x, w, bias, out, K, N, rows] {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (Tensor<T>* gx = x.grad_sink())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < K; ++k) {
            T acc{};
            const T* wr = w.value().data() + k * N;
            for (std::size_t n = 0; n < N; ++n) acc += g[r * N + n] * wr[n];
            (*gx)[r * K + k] += acc;
          }
      if (Tensor<T>* gw = w.grad_sink())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < K; ++k) {
            const T xv = x.value()[r * K + k];
            T* gwr = gw->data() + k * N;
            for (std::size_t n = 0; n < N; ++n) gwr[n] += xv * g[r * N + n];
          }
      if (Tensor<T>* gb = bias.grad_sink())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t n = 0; n < N; ++n) (*gb)[n] += g[r * N + n];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Volumetric ops

template <class T>
Var<T> to_sequence(Tape<T>* tape, const Var<T>& v) {
  const Dims3 dims = v.value().spatial();
  const bool rec = ad::should_record(tape, {&v});
  Var<T> out(ops::to_sequence(v.value()), rec);
  if (rec)
    tape->record([v, out, dims] {
      if (!out.has_grad()) return;
      v.accumulate(ops::to_volume(out.grad(), dims));
    });
  return out;
}

template <class T>
Var<T> to_volume(Tape<T>* tape, const Var<T>& s, Dims3 dims) {
  const bool rec = ad::should_record(tape, {&s});
  Var<T> out(ops::to_volume(s.value(), dims), rec);
  if (rec)
    tape->record([s, out] {
      if (!out.has_grad()) return;
      s.accumulate(ops::to_sequence(out.grad()));
    });
  return out;
}

template <class T>
Var<T> layer_norm(Tape<T>* tape, const Var<T>& x, const Var<T>& gain, const Var<T>& bias) {
  auto cache = std::make_shared<ops::NormCache>();
  const bool rec = ad::should_record(tape, {&x, &gain, &bias});
  Var<T> out(ops::layer_norm(x.value(), gain.value(), bias.value(), ops::kNormEps, rec ? cache.get() : nullptr), rec);
  if (rec)
    tape->record([x, gain, bias, out, cache] {
      if (!out.has_grad()) return;
      ops::layer_norm_backward(out.grad(), x.value(), gain.value(), *cache, x.grad_sink(), gain.grad_sink(),
                               bias.grad_sink());
    });
  return out;
}

template <class T>
Var<T> group_norm(Tape<T>* tape, const Var<T>& x, std::size_t groups, const Var<T>& gain, const Var<T>& bias) {
  auto cache = std::make_shared<ops::NormCache>();
  const bool rec = ad::should_record(tape, {&x, &gain, &bias});
  Var<T> out(ops::group_norm(x.value(), groups, gain.value(), bias.value(), ops::kNormEps, rec ? cache.get() : nullptr),
             rec);
  if (rec)
    tape->record([x, gain, bias, out, cache, groups] {
      if (!out.has_grad()) return;
      ops::group_norm_backward(out.grad(), x.value(), groups, gain.value(), *cache, x.grad_sink(), gain.grad_sink(),
                               bias.grad_sink());
    });
  return out;
}

template <class T>
Var<T> conv3d(Tape<T>* tape, const Var<T>& x, const Var<T>& w, const Var<T>& bias, ops::ConvSpec spec) {
  static const Tensor<T> kNoBias;
  const bool rec = ad::should_record(tape, {&x, &w, &bias});
  Var<T> out(ops::conv3d(x.value(), w.value(), bias ? bias.value() : kNoBias, spec), rec);
  if (rec)
    tape->record([x, w, bias, out, spec] {
      if (!out.has_grad()) return;
      ops::conv3d_backward(out.grad(), x.value(), w.value(), spec, x.grad_sink(), w.grad_sink(),
                           bias ? bias.grad_sink() : nullptr);
    });
  return out;
}

template <class T>
Var<T> max_pool2(Tape<T>* tape, const Var<T>& x) {
  auto arg = std::make_shared<std::vector<std::size_t>>();
  const bool rec = ad::should_record(tape, {&x});
  const bool probe = SelectionProbe::current() != nullptr;
  Var<T> out(ops::max_pool2(x.value(), rec || probe ? arg.get() : nullptr), rec);
  if (probe) SelectionProbe::fold(*arg);
  if (rec)
    tape->record([x, out, arg] {
      if (!out.has_grad()) return;
      ops::max_pool2_backward(out.grad(), *arg, *x.grad_sink());
    });
  return out;
}

template <class T>
Var<T> upsample2(Tape<T>* tape, const Var<T>& x) {
  const bool rec = ad::should_record(tape, {&x});
  Var<T> out(ops::upsample2(x.value()), rec);
  if (rec)
    tape->record([x, out] {
      if (!out.has_grad()) return;
      x.accumulate(ops::upsample2_backward(out.grad()));
    });
  return out;
}

}  // namespace m4fuse::nn
