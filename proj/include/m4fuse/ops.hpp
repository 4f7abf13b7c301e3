#pragma once

// Primitive volumetric kernels. Every forward kernel here is a pure function;
// the matching *_backward kernels compute vector-Jacobian products and are
// wired into the tape by autodiff.hpp.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "m4fuse/parallel.hpp"
#include "m4fuse/tensor.hpp"

namespace m4fuse::ops {

inline constexpr double kNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Sequence view

/// (B,C,D,H,W) -> (B,L,C) with L = D*H*W in D-major, W-fastest raster order.
template <class T>
Tensor<T> to_sequence(const Tensor<T>& v) {
  v.require_rank(5, "to_sequence");
  const std::size_t B = v.dim(0), C = v.dim(1), L = v.spatial().voxels();
  Tensor<T> s(Shape{B, L, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = v.data() + (b * C + c) * L;
      T* dst = s.data() + b * L * C + c;
      for (std::size_t k = 0; k < L; ++k) dst[k * C] = src[k];
    }
  return s;
}

template <class T>
Tensor<T> to_volume(const Tensor<T>& s, Dims3 dims) {
  s.require_rank(3, "to_volume");
  const std::size_t B = s.dim(0), L = s.dim(1), C = s.dim(2);
  if (L != dims.voxels())
    throw ShapeError("to_volume: sequence length " + std::to_string(L) + " != D*H*W = " +
                     std::to_string(dims.voxels()));
  Tensor<T> v(Shape{B, C, dims.d, dims.h, dims.w});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = s.data() + b * L * C + c;
      T* dst = v.data() + (b * C + c) * L;
      for (std::size_t k = 0; k < L; ++k) dst[k] = src[k * C];
    }
  return v;
}

// ---------------------------------------------------------------------------
// Normalization

struct NormCache {
  std::vector<double> mean;
  std::vector<double> rstd;
};

/// Layer normalization over the last axis of any tensor.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = kNormEps,
                     NormCache* cache = nullptr) {
  const std::size_t C = x.shape().back();
  if (gain.size() != C || bias.size() != C)
    throw ShapeError("layer_norm: affine length must equal channel count " + std::to_string(C));
  const std::size_t rows = x.size() / C;
  Tensor<T> y(x.shape());
  if (cache) {
    cache->mean.assign(rows, 0.0);
    cache->rstd.assign(rows, 0.0);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * C;
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(C);
    const double rstd = 1.0 / std::sqrt(var + eps);
    T* yr = y.data() + r * C;
    for (std::size_t c = 0; c < C; ++c)
      yr[c] = static_cast<T>((xr[c] - mean) * rstd * gain[c] + bias[c]);
    if (cache) {
      cache->mean[r] = mean;
      cache->rstd[r] = rstd;
    }
  }
  return y;
}

template <class T>
void layer_norm_backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>& gain, const NormCache& cache,
                         Tensor<T>* gx, Tensor<T>* ggain, Tensor<T>* gbias) {
  const std::size_t C = x.shape().back();
  const std::size_t rows = x.size() / C;
  std::vector<double> xhat(C), gxhat(C);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * C;
    const T* gr = gy.data() + r * C;
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      xhat[c] = (xr[c] - cache.mean[r]) * cache.rstd[r];
      gxhat[c] = gr[c] * static_cast<double>(gain[c]);
      m1 += gxhat[c];
      m2 += gxhat[c] * xhat[c];
      if (ggain) (*ggain)[c] += static_cast<T>(gr[c] * xhat[c]);
      if (gbias) (*gbias)[c] += gr[c];
    }
    if (gx) {
      m1 /= static_cast<double>(C);
      m2 /= static_cast<double>(C);
      T* gxr = gx->data() + r * C;
      for (std::size_t c = 0; c < C; ++c) gxr[c] += static_cast<T>(cache.rstd[r] * (gxhat[c] - m1 - xhat[c] * m2));
    }
  }
}

/// Group normalization over (channels-in-group x D x H x W) per sample.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = kNormEps, NormCache* cache = nullptr) {
  x.require_rank(5, "group_norm");
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.spatial().voxels();
  if (groups == 0 || C % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) +
                     " groups");
  if (gain.size() != C || bias.size() != C) throw ShapeError("group_norm: affine length must equal channel count");
  const std::size_t cg = C / groups, n = cg * S;
  Tensor<T> y(x.shape());
  if (cache) {
    cache->mean.assign(B * groups, 0.0);
    cache->rstd.assign(B * groups, 0.0);
  }
  parallel_for(B * groups, [&](std::size_t bg) {
    const std::size_t b = bg / groups, g = bg % groups;
    const T* xg = x.data() + (b * C + g * cg) * S;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += xg[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xg[i] - mean) * (xg[i] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    T* yg = y.data() + (b * C + g * cg) * S;
    for (std::size_t j = 0; j < cg; ++j) {
      const double a = rstd * gain[g * cg + j];
      const double c0 = bias[g * cg + j] - mean * a;
      for (std::size_t s = 0; s < S; ++s) yg[j * S + s] = static_cast<T>(xg[j * S + s] * a + c0);
    }
    if (cache) {
      cache->mean[bg] = mean;
      cache->rstd[bg] = rstd;
    }
  });
  return y;
}

template <class T>
void group_norm_backward(const Tensor<T>& gy, const Tensor<T>& x, std::size_t groups, const Tensor<T>& gain,
                         const NormCache& cache, Tensor<T>* gx, Tensor<T>* ggain, Tensor<T>* gbias) {
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.spatial().voxels();
  const std::size_t cg = C / groups, n = cg * S;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t bg = b * groups + g;
      const double mean = cache.mean[bg], rstd = cache.rstd[bg];
      const T* xg = x.data() + (b * C + g * cg) * S;
      const T* gyg = gy.data() + (b * C + g * cg) * S;
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < cg; ++j) {
        const double gam = gain[g * cg + j];
        double sg = 0.0, sgx = 0.0;
        for (std::size_t s = 0; s < S; ++s) {
          const double xh = (xg[j * S + s] - mean) * rstd;
          sg += gyg[j * S + s];
          sgx += gyg[j * S + s] * xh;
        }
        if (ggain) (*ggain)[g * cg + j] += static_cast<T>(sgx);
        if (gbias) (*gbias)[g * cg + j] += static_cast<T>(sg);
        m1 += gam * sg;
        m2 += gam * sgx;
      }
      if (!gx) continue;
      m1 /= static_cast<double>(n);
      m2 /= static_cast<double>(n);
      T* gxg = gx->data() + (b * C + g * cg) * S;
      for (std::size_t j = 0; j < cg; ++j) {
        const double gam = gain[g * cg + j];
        for (std::size_t s = 0; s < S; ++s) {
          const double xh = (xg[j * S + s] - mean) * rstd;
          gxg[j * S + s] += static_cast<T>(rstd * (gyg[j * S + s] * gam - m1 - xh * m2));
        }
      }
    }
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip)

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, const ConvSpec& s) {
  if (in + 2 * s.pad < k) throw ShapeError("conv3d: kernel larger than padded input");
  return (in + 2 * s.pad - k) / s.stride + 1;
}

namespace detail {

struct ConvGeom {
  std::size_t B, Ci, Co, D, H, W, kd, kh, kw, Od, Oh, Ow, cig, cog;
};

template <class T>
ConvGeom conv_geom(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& s) {
  x.require_rank(5, "conv3d input");
  w.require_rank(5, "conv3d kernel");
  if (s.stride == 0 || s.groups == 0) throw ShapeError("conv3d: stride and groups must be positive");
  ConvGeom g{};
  g.B = x.dim(0);
  g.Ci = x.dim(1);
  g.D = x.dim(2);
  g.H = x.dim(3);
  g.W = x.dim(4);
  g.Co = w.dim(0);
  g.kd = w.dim(2);
  g.kh = w.dim(3);
  g.kw = w.dim(4);
  if (g.Ci % s.groups != 0 || g.Co % s.groups != 0)
    throw ShapeError("conv3d: channels not divisible by groups");
  g.cig = g.Ci / s.groups;
  g.cog = g.Co / s.groups;
  if (w.dim(1) != g.cig)
    throw ShapeError("conv3d: kernel expects " + std::to_string(w.dim(1) * s.groups) + " input channels, got " +
                     std::to_string(g.Ci));
  g.Od = conv_out_size(g.D, g.kd, s);
  g.Oh = conv_out_size(g.H, g.kh, s);
  g.Ow = conv_out_size(g.W, g.kw, s);
  return g;
}

// Output index range [lo, hi) whose input tap o*stride + k - pad lies in [0, n).
inline void tap_range(std::size_t k, std::size_t n, std::size_t out, const ConvSpec& s, std::size_t& lo,
                      std::size_t& hi) {
  const long long kk = static_cast<long long>(k), p = static_cast<long long>(s.pad),
                  st = static_cast<long long>(s.stride), nn = static_cast<long long>(n);
  long long l = (p - kk + st - 1) / st;
  if (p - kk <= 0) l = 0;
  long long h = (nn - 1 + p - kk) / st + 1;  // first o with o*st + k - p >= n
  if (nn - 1 + p - kk < 0) h = 0;
  l = std::max<long long>(l, 0);
  h = std::min<long long>(h, static_cast<long long>(out));
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(std::max(l, h));
}

}  // namespace detail

/// 3-D cross-correlation. Kernel shape (C_out, C_in/groups, kd, kh, kw); bias
/// may be empty. Output size per axis: floor((in + 2*pad - k)/stride) + 1.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, const ConvSpec& spec) {
  const auto g = detail::conv_geom(x, w, spec);
  if (!bias.empty() && bias.size() != g.Co) throw ShapeError("conv3d: bias length must equal C_out");
  Tensor<T> y(Shape{g.B, g.Co, g.Od, g.Oh, g.Ow});
  const std::size_t in_plane = g.D * g.H * g.W, out_plane = g.Od * g.Oh * g.Ow;
  const std::size_t ksz = g.kd * g.kh * g.kw;
  parallel_for(g.B * g.Co, [&](std::size_t bc) {
    const std::size_t b = bc / g.Co, co = bc % g.Co;
    const std::size_t ci0 = (co / g.cog) * g.cig;
    T* out = y.data() + bc * out_plane;
    std::fill(out, out + out_plane, bias.empty() ? T{} : bias[co]);
    for (std::size_t j = 0; j < g.cig; ++j) {
      const T* in = x.data() + (b * g.Ci + ci0 + j) * in_plane;
      const T* wk = w.data() + (co * g.cig + j) * ksz;
      for (std::size_t a = 0; a < g.kd; ++a) {
        std::size_t od0, od1;
        detail::tap_range(a, g.D, g.Od, spec, od0, od1);
        for (std::size_t bb = 0; bb < g.kh; ++bb) {
          std::size_t oh0, oh1;
          detail::tap_range(bb, g.H, g.Oh, spec, oh0, oh1);
          for (std::size_t c = 0; c < g.kw; ++c) {
            const T wv = wk[(a * g.kh + bb) * g.kw + c];
            std::size_t ow0, ow1;
            detail::tap_range(c, g.W, g.Ow, spec, ow0, ow1);
            for (std::size_t od = od0; od < od1; ++od) {
              const std::size_t id = od * spec.stride + a - spec.pad;
              for (std::size_t oh = oh0; oh < oh1; ++oh) {
                const std::size_t ih = oh * spec.stride + bb - spec.pad;
                T* orow = out + (od * g.Oh + oh) * g.Ow;
                const T* irow = in + (id * g.H + ih) * g.W;
                if (spec.stride == 1) {
                  const std::size_t off = c - spec.pad;  // wraps; ow + off >= 0 on [ow0, ow1)
                  for (std::size_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * irow[ow + off];
                } else {
                  for (std::size_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * irow[ow * spec.stride + c - spec.pad];
                }
              }
            }
          }
        }
      }
    }
  });
  return y;
}

template <class T>
void conv3d_backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                     Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const auto g = detail::conv_geom(x, w, spec);
  const std::size_t in_plane = g.D * g.H * g.W, out_plane = g.Od * g.Oh * g.Ow;
  const std::size_t ksz = g.kd * g.kh * g.kw;
  if (gb) {
    for (std::size_t co = 0; co < g.Co; ++co) {
      double s = 0.0;
      for (std::size_t b = 0; b < g.B; ++b) {
        const T* p = gy.data() + (b * g.Co + co) * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) s += p[i];
      }
      (*gb)[co] += static_cast<T>(s);
    }
  }
  if (gx) {
    parallel_for(g.B * g.Ci, [&](std::size_t bci) {
      const std::size_t b = bci / g.Ci, ci = bci % g.Ci;
      const std::size_t grp = ci / g.cig, j = ci % g.cig;
      T* gin = gx->data() + bci * in_plane;
      for (std::size_t co = grp * g.cog; co < (grp + 1) * g.cog; ++co) {
        const T* go = gy.data() + (b * g.Co + co) * out_plane;
        const T* wk = w.data() + (co * g.cig + j) * ksz;
        for (std::size_t a = 0; a < g.kd; ++a) {
          std::size_t od0, od1;
          detail::tap_range(a, g.D, g.Od, spec, od0, od1);
          for (std::size_t bb = 0; bb < g.kh; ++bb) {
            std::size_t oh0, oh1;
            detail::tap_range(bb, g.H, g.Oh, spec, oh0, oh1);
            for (std::size_t c = 0; c < g.kw; ++c) {
              const T wv = wk[(a * g.kh + bb) * g.kw + c];
              std::size_t ow0, ow1;
              detail::tap_range(c, g.W, g.Ow, spec, ow0, ow1);
              for (std::size_t od = od0; od < od1; ++od) {
                const std::size_t id = od * spec.stride + a - spec.pad;
                for (std::size_t oh = oh0; oh < oh1; ++oh) {
                  const std::size_t ih = oh * spec.stride + bb - spec.pad;
                  const T* grow = go + (od * g.Oh + oh) * g.Ow;
                  T* irow = gin + (id * g.H + ih) * g.W;
                  if (spec.stride == 1) {
                    const std::size_t off = c - spec.pad;
                    for (std::size_t ow = ow0; ow < ow1; ++ow) irow[ow + off] += wv * grow[ow];
                  } else {
                    for (std::size_t ow = ow0; ow < ow1; ++ow) irow[ow * spec.stride + c - spec.pad] += wv * grow[ow];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  if (gw) {
    parallel_for(g.Co, [&](std::size_t co) {
      const std::size_t ci0 = (co / g.cog) * g.cig;
      for (std::size_t j = 0; j < g.cig; ++j)
        for (std::size_t a = 0; a < g.kd; ++a) {
          std::size_t od0, od1;
          detail::tap_range(a, g.D, g.Od, spec, od0, od1);
          for (std::size_t bb = 0; bb < g.kh; ++bb) {
            std::size_t oh0, oh1;
            detail::tap_range(bb, g.H, g.Oh, spec, oh0, oh1);
            for (std::size_t c = 0; c < g.kw; ++c) {
              std::size_t ow0, ow1;
              detail::tap_range(c, g.W, g.Ow, spec, ow0, ow1);
              T acc{};
              for (std::size_t b = 0; b < g.B; ++b) {
                const T* go = gy.data() + (b * g.Co + co) * out_plane;
                const T* in = x.data() + (b * g.Ci + ci0 + j) * in_plane;
                for (std::size_t od = od0; od < od1; ++od) {
                  const std::size_t id = od * spec.stride + a - spec.pad;
                  for (std::size_t oh = oh0; oh < oh1; ++oh) {
                    const std::size_t ih = oh * spec.stride + bb - spec.pad;
                    const T* grow = go + (od * g.Oh + oh) * g.Ow;
                    const T* irow = in + (id * g.H + ih) * g.W;
                    for (std::size_t ow = ow0; ow < ow1; ++ow) acc += grow[ow] * irow[ow * spec.stride + c - spec.pad];
                  }
                }
              }
              (*gw)[((co * g.cig + j) * g.kd + a) * g.kh * g.kw + bb * g.kw + c] += acc;
            }
          }
        }
    });
  }
}

// ---------------------------------------------------------------------------
// Pooling and upsampling

/// 2x2x2 max pooling, stride 2. `argmax`, when given, receives the flat input
/// index selected for each output element (first maximum in raster order).
template <class T>
Tensor<T> max_pool2(const Tensor<T>& x, std::vector<std::size_t>* argmax = nullptr) {
  x.require_rank(5, "pool");
  const auto sp = x.spatial();
  if (sp.d < 2 || sp.h < 2 || sp.w < 2)
    throw ShapeError("pool: every spatial dim must be >= 2, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t Od = sp.d / 2, Oh = sp.h / 2, Ow = sp.w / 2;
  Tensor<T> y(Shape{B, C, Od, Oh, Ow});
  if (argmax) argmax->assign(y.size(), 0);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t ibase = bc * sp.voxels();
    for (std::size_t od = 0; od < Od; ++od)
      for (std::size_t oh = 0; oh < Oh; ++oh)
        for (std::size_t ow = 0; ow < Ow; ++ow) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t bi = 0;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b)
              for (std::size_t c = 0; c < 2; ++c) {
                const std::size_t idx = ibase + ((2 * od + a) * sp.h + 2 * oh + b) * sp.w + 2 * ow + c;
                if (x[idx] > best) {
                  best = x[idx];
                  bi = idx;
                }
              }
          const std::size_t o = ((bc * Od + od) * Oh + oh) * Ow + ow;
          y[o] = best;
          if (argmax) (*argmax)[o] = bi;
        }
  }
  return y;
}

template <class T>
void max_pool2_backward(const Tensor<T>& gy, const std::vector<std::size_t>& argmax, Tensor<T>& gx) {
  for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;
};

// Half-voxel-center sampling for a 2x upscale: src = (i + 0.5)/2 - 0.5.
inline std::vector<LerpTap> upsample_taps(std::size_t n) {
  std::vector<LerpTap> taps(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    double src = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    taps[i] = {i0, std::min(i0 + 1, n - 1), src - static_cast<double>(i0)};
  }
  return taps;
}

template <class T>
Tensor<T> upsample_axis(const Tensor<T>& x, std::size_t axis) {
  Shape os = x.shape();
  const std::size_t n = os[axis];
  os[axis] = 2 * n;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const auto taps = upsample_taps(n);
  Tensor<T> y(os);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < 2 * n; ++i) {
      const T* a = x.data() + (o * n + taps[i].i0) * inner;
      const T* b = x.data() + (o * n + taps[i].i1) * inner;
      const T w1 = static_cast<T>(taps[i].w1), w0 = static_cast<T>(1.0 - taps[i].w1);
      T* dst = y.data() + (o * 2 * n + i) * inner;
      for (std::size_t k = 0; k < inner; ++k) dst[k] = w0 * a[k] + w1 * b[k];
    }
  return y;
}

template <class T>
Tensor<T> upsample_axis_backward(const Tensor<T>& gy, std::size_t axis) {
  Shape is = gy.shape();
  const std::size_t n = is[axis] / 2;
  is[axis] = n;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= gy.dim(i);
  for (std::size_t i = axis + 1; i < gy.rank(); ++i) inner *= gy.dim(i);
  const auto taps = upsample_taps(n);
  Tensor<T> gx(is);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < 2 * n; ++i) {
      const T* g = gy.data() + (o * 2 * n + i) * inner;
      T* a = gx.data() + (o * n + taps[i].i0) * inner;
      T* b = gx.data() + (o * n + taps[i].i1) * inner;
      const T w1 = static_cast<T>(taps[i].w1), w0 = static_cast<T>(1.0 - taps[i].w1);
      for (std::size_t k = 0; k < inner; ++k) {
        a[k] += w0 * g[k];
        b[k] += w1 * g[k];
      }
    }
  return gx;
}

}  // namespace detail

/// Trilinear 2x upsampling with half-voxel centers (align-corners off).
template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  x.require_rank(5, "upsample");
  return detail::upsample_axis(detail::upsample_axis(detail::upsample_axis(x, 2), 3), 4);
}

template <class T>
Tensor<T> upsample2_backward(const Tensor<T>& gy) {
  return detail::upsample_axis_backward(detail::upsample_axis_backward(detail::upsample_axis_backward(gy, 4), 3), 2);
}

// ---------------------------------------------------------------------------
// Scalar helpers

template <class T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
T softplus(T x) {
  return x > T{20} ? x : std::log1p(std::exp(x));
}

inline double softplus_inverse(double y) { return y > 20.0 ? y : std::log(std::expm1(y)); }

}  // namespace m4fuse::ops
