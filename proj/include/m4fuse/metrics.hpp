#pragma once

// BraTS-style region masks, Dice, and HD95.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "m4fuse/errors.hpp"
#include "m4fuse/tensor.hpp"

namespace m4fuse {

/// BraTS label values in class-index order: background, necrotic core,
/// edema, enhancing tumor.
inline constexpr std::array<int, 4> kBratsLabels{0, 1, 2, 4};

inline int class_to_brats(int k) {
  if (k < 0 || k >= static_cast<int>(kBratsLabels.size())) throw DataError("class index " + std::to_string(k));
  return kBratsLabels[static_cast<std::size_t>(k)];
}

inline int brats_to_class(int label) {
  for (std::size_t k = 0; k < kBratsLabels.size(); ++k)
    if (kBratsLabels[k] == label) return static_cast<int>(k);
  throw DataError("unexpected label value " + std::to_string(label) + " (expected 0,1,2,4)");
}

struct BinaryMask {
  Dims3 dims;
  std::vector<std::uint8_t> v;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // d, h, w

  BinaryMask() = default;
  explicit BinaryMask(Dims3 d) : dims(d), v(d.voxels(), 0) {}

  std::size_t count() const { return static_cast<std::size_t>(std::count(v.begin(), v.end(), 1)); }
  bool empty() const { return count() == 0; }
  std::uint8_t& at(std::size_t d, std::size_t h, std::size_t w) { return v[(d * dims.h + h) * dims.w + w]; }
  std::uint8_t at(std::size_t d, std::size_t h, std::size_t w) const { return v[(d * dims.h + h) * dims.w + w]; }
};

struct Regions {
  BinaryMask wt, tc, et;
};

/// WT = {1,2,4}, TC = {1,4}, ET = {4} over a D x H x W label volume.
inline Regions composite_regions(const std::vector<int>& labels, Dims3 dims) {
  if (labels.size() != dims.voxels()) throw ShapeError("composite_regions: label count does not match dims");
  Regions r{BinaryMask(dims), BinaryMask(dims), BinaryMask(dims)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l != 0 && l != 1 && l != 2 && l != 4) throw DataError("unexpected label value " + std::to_string(l));
    r.wt.v[i] = l != 0;
    r.tc.v[i] = l == 1 || l == 4;
    r.et.v[i] = l == 4;
  }
  return r;
}

inline void require_same_dims(const BinaryMask& a, const BinaryMask& b, const char* where) {
  if (!(a.dims == b.dims) || a.v.size() != b.v.size()) throw ShapeError(std::string(where) + ": mask shapes differ");
}

/// 2|a & b| / (|a| + |b|); 1 when both are empty.
inline double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a, b, "dice");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    na += a.v[i];
    nb += b.v[i];
    both += a.v[i] & b.v[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

/// Foreground voxels with a 6-neighbour that is background or outside.
inline BinaryMask boundary(const BinaryMask& m) {
  BinaryMask out(m.dims);
  out.spacing = m.spacing;
  const auto [D, H, W] = m.dims;
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        if (!m.at(d, h, w)) continue;
        const bool edge = d == 0 || h == 0 || w == 0 || d + 1 == D || h + 1 == H || w + 1 == W || !m.at(d - 1, h, w) ||
                          !m.at(d + 1, h, w) || !m.at(d, h - 1, w) || !m.at(d, h + 1, w) || !m.at(d, h, w - 1) ||
                          !m.at(d, h, w + 1);
        out.at(d, h, w) = edge;
      }
  return out;
}

namespace detail {

inline constexpr double kFar = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one axis
// with sample spacing s: out[q] = min_p f[p] + (s (q - p))^2.
inline void edt_1d(const double* f, double* out, std::size_t n, double s, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  const double s2 = s * s;
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kFar) continue;
    if (!any) {
      v[0] = q;
      z[0] = -kFar;
      z[1] = kFar;
      any = true;
      continue;
    }
    const double fq = f[q] + s2 * static_cast<double>(q * q);
    auto cross = [&](std::size_t p) {
      return (fq - (f[p] + s2 * static_cast<double>(p * p))) /
             (2.0 * s2 * (static_cast<double>(q) - static_cast<double>(p)));
    };
    double sep = cross(v[k]);
    while (sep <= z[k]) sep = cross(v[--k]);  // z[0] = -inf stops the walk
    ++k;
    v[k] = q;
    z[k] = sep;
    z[k + 1] = kFar;
  }
  if (!any) {
    std::fill(out, out + n, kFar);
    return;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = s * (static_cast<double>(q) - static_cast<double>(v[k]));
    out[q] = f[v[k]] + dq * dq;
  }
}

}  // namespace detail

/// Squared Euclidean distance from every voxel to the nearest set voxel.
inline std::vector<double> squared_distance_transform(const BinaryMask& m) {
  const auto [D, H, W] = m.dims;
  std::vector<double> g(m.v.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = m.v[i] ? 0.0 : detail::kFar;
  std::vector<double> in, out;
  std::vector<std::size_t> v;
  std::vector<double> z;
  auto pass = [&](std::size_t n, std::size_t stride, std::size_t lines, auto base_of, double s) {
    in.resize(n);
    out.resize(n);
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = base_of(l);
      for (std::size_t i = 0; i < n; ++i) in[i] = g[base + i * stride];
      detail::edt_1d(in.data(), out.data(), n, s, v, z);
      for (std::size_t i = 0; i < n; ++i) g[base + i * stride] = out[i];
    }
  };
  pass(W, 1, D * H, [W](std::size_t l) { return l * W; }, m.spacing[2]);
  pass(H, W, D * W, [H, W](std::size_t l) { return (l / W) * H * W + l % W; }, m.spacing[1]);
  pass(D, H * W, H * W, [](std::size_t l) { return l; }, m.spacing[0]);
  return g;
}

/// Linear interpolation between order statistics at position q (n - 1).
inline double percentile(std::vector<double> xs, double q) {
  if (xs.empty()) throw MetricError("percentile of an empty set");
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

/// 95th percentile of the pooled directed boundary-to-boundary distances.
inline double hd95(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a, b, "hd95");
  if (a.empty() || b.empty()) throw MetricError("hd95 undefined for an empty mask");
  const BinaryMask ba = boundary(a), bb = boundary(b);
  const auto da = squared_distance_transform(ba);
  const auto db = squared_distance_transform(bb);
  std::vector<double> dist;
  for (std::size_t i = 0; i < ba.v.size(); ++i) {
    if (ba.v[i]) dist.push_back(std::sqrt(db[i]));
    if (bb.v[i]) dist.push_back(std::sqrt(da[i]));
  }
  return percentile(std::move(dist), 0.95);
}

/// hd95 with empty masks reported as a missing value.
inline std::optional<double> hd95_or_missing(const BinaryMask& a, const BinaryMask& b) {
  if (a.empty() || b.empty()) return std::nullopt;
  return hd95(a, b);
}

struct RegionScores {
  std::array<double, 3> dice{};  // WT, TC, ET
  std::array<std::optional<double>, 3> hd95{};
  double mean_dice() const { return (dice[0] + dice[1] + dice[2]) / 3.0; }
};

inline constexpr std::array<const char*, 3> kRegionNames{"WT", "TC", "ET"};

inline RegionScores score_regions(const std::vector<int>& pred, const std::vector<int>& gt, Dims3 dims,
                                  bool with_hd95 = true) {
  const Regions p = composite_regions(pred, dims), g = composite_regions(gt, dims);
  const BinaryMask* pm[3] = {&p.wt, &p.tc, &p.et};
  const BinaryMask* gm[3] = {&g.wt, &g.tc, &g.et};
  RegionScores s;
  for (int r = 0; r < 3; ++r) {
    s.dice[r] = dice(*pm[r], *gm[r]);
    if (with_hd95) s.hd95[r] = hd95_or_missing(*pm[r], *gm[r]);
  }
  return s;
}

}  // namespace m4fuse
