#pragma once

// Synthetic tumour-like volumes: nested ellipsoids for edema / core / an
// enhancing shell, four "modalities" with a distinct intensity profile per
// tissue class, Gaussian noise, and a per-site additive intensity shift.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "m4fuse/config.hpp"
#include "m4fuse/errors.hpp"
#include "m4fuse/io.hpp"
#include "m4fuse/loss.hpp"
#include "m4fuse/metrics.hpp"
#include "m4fuse/tensor.hpp"

#include <json.hpp>

namespace m4fuse {

struct Sample {
  Tensor<float> image;  // 1 x 4 x D x H x W
  LabelVolume labels;  // 1 x D x H x W class indices
  std::string id;  // dataset / site identifier
};

/// Per-class mean intensity in each channel (background, core, edema, ET).
/// The four profiles are affinely independent, so no class mean lies in the
/// convex hull of the others.
inline constexpr double kProfiles[4][4] = {
    {0.0, 0.0, 0.0, 0.0},
    {0.3, 1.0, 0.6, 0.0},
    {1.0, 0.2, 1.0, 0.3},
    {0.6, 0.3, 0.2, 1.2},
};

inline std::string site_id(std::size_t site) { return std::string(1, static_cast<char>('A' + site % 26)); }

/// Additive shift for a site: spread evenly over [-shift, +shift].
inline double site_offset(std::size_t site, std::size_t sites, double shift) {
  if (sites <= 1) return 0.0;
  return -shift + 2.0 * shift * static_cast<double>(site) / static_cast<double>(sites - 1);
}

inline Sample make_sample(const SyntheticSpec& spec, std::size_t index) {
  if (spec.sites == 0) throw ConfigError("synthetic.sites must be positive");
  if (!(spec.radius_et < spec.radius_tc && spec.radius_tc < spec.radius_wt))
    throw ConfigError("synthetic radii must satisfy et < tc < wt");
  std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + index + 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const auto [D, H, W] = spec.shape;
  const double ext[3] = {static_cast<double>(D), static_cast<double>(H), static_cast<double>(W)};
  double centre[3], axis_scale[3];
  for (int a = 0; a < 3; ++a) {
    centre[a] = ext[a] * (0.4 + 0.2 * u(rng));
    axis_scale[a] = 0.85 + 0.3 * u(rng);
  }
  const std::size_t site = index % spec.sites;
  const double shift = site_offset(site, spec.sites, spec.site_shift);

  Sample s{Tensor<float>(Shape{1, 4, D, H, W}), LabelVolume(Shape{1, D, H, W}), site_id(site)};
  const std::size_t V = spec.shape.voxels();
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        const double p[3] = {static_cast<double>(d) + 0.5, static_cast<double>(h) + 0.5, static_cast<double>(w) + 0.5};
        // Ellipsoidal radius with semi-axes frac * extent * axis_scale.
        auto rho = [&](double frac) {
          double r2 = 0.0;
          for (int a = 0; a < 3; ++a) {
            const double q = (p[a] - centre[a]) / (frac * ext[a] * axis_scale[a]);
            r2 += q * q;
          }
          return std::sqrt(r2);
        };
        int cls = 0;
        if (rho(spec.radius_wt) <= 1.0) cls = 2;
        if (rho(spec.radius_tc) <= 1.0) cls = 1;
        const double re = rho(spec.radius_et);
        if (re <= 1.0 && re >= spec.et_shell) cls = 3;
        const std::size_t v = (d * H + h) * W + w;
        s.labels[v] = cls;
        for (std::size_t c = 0; c < 4; ++c)
          s.image[c * V + v] = static_cast<float>(kProfiles[cls][c] + shift + spec.noise * noise(rng));
      }
  return s;
}

inline std::vector<Sample> make_dataset(const SyntheticSpec& spec, std::size_t first, std::size_t count) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_sample(spec, first + i));
  return out;
}

/// BraTS label values of one sample's class-index volume (batch entry b).
inline std::vector<int> brats_labels(const LabelVolume& labels, std::size_t b = 0) {
  const std::size_t V = labels.size() / labels.dim(0);
  std::vector<int> out(V);
  for (std::size_t v = 0; v < V; ++v) out[v] = class_to_brats(labels[b * V + v]);
  return out;
}

inline Tensor<float> labels_as_volume(const LabelVolume& labels) {
  Tensor<float> t(Shape{labels.dim(0), 1, labels.dim(1), labels.dim(2), labels.dim(3)});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<float>(class_to_brats(labels[i]));
  return t;
}

inline LabelVolume volume_as_labels(const Tensor<float>& t) {
  t.require_rank(5, "labels");
  if (t.dim(1) != 1) throw DataError("label volume must have one channel");
  LabelVolume l(Shape{t.dim(0), t.dim(2), t.dim(3), t.dim(4)});
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (v != std::round(v)) throw DataError("non-integer label value " + std::to_string(v));
    l[i] = brats_to_class(static_cast<int>(v));
  }
  return l;
}

/// Writes image/label M4FV pairs plus manifest.json into `dir`.
inline nlohmann::json write_dataset(const std::filesystem::path& dir, const SyntheticSpec& spec) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["shape"] = {spec.shape.d, spec.shape.h, spec.shape.w};
  manifest["seed"] = spec.seed;
  manifest["sites"] = spec.sites;
  manifest["samples"] = nlohmann::json::array();
  for (std::size_t i = 0; i < spec.count; ++i) {
    const Sample s = make_sample(spec, i);
    char stem[32];
    std::snprintf(stem, sizeof stem, "case_%04zu", i);
    const std::string img = std::string(stem) + "_img.m4fv", lab = std::string(stem) + "_seg.m4fv";
    io::save_volume(dir / img, s.image);
    io::save_volume(dir / lab, labels_as_volume(s.labels));
    manifest["samples"].push_back({{"image", img}, {"label", lab}, {"id", s.id}});
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << "\n";
  return manifest;
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const std::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": " + e.what());
  }
  std::vector<Sample> out;
  for (const auto& e : manifest.at("samples")) {
    Sample s;
    s.image = io::load_volume(dir / e.at("image").get<std::string>());
    s.labels = volume_as_labels(io::load_volume(dir / e.at("label").get<std::string>()));
    s.id = e.at("id").get<std::string>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace m4fuse
