#pragma once

// Cross-scale dual-stage gating bridge. Stage one gates each scale spatially
// with a shared 7^3 kernel over [channel-mean, channel-max]; stage two pools
// every gated scale, concatenates the statistics, and derives per-scale
// channel gates from the joint vector.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "m4fuse/autodiff.hpp"
#include "m4fuse/errors.hpp"
#include "m4fuse/nn.hpp"
#include "m4fuse/ops.hpp"

namespace m4fuse {

enum class BridgeMode { full, spatial_only, channel_only, off };

inline BridgeMode parse_bridge_mode(const std::string& s) {
  if (s == "full") return BridgeMode::full;
  if (s == "spatial_only") return BridgeMode::spatial_only;
  if (s == "channel_only") return BridgeMode::channel_only;
  if (s == "off") return BridgeMode::off;
  throw ConfigError("bridge.mode must be full|spatial_only|channel_only|off, got '" + s + "'");
}

inline const char* to_string(BridgeMode m) {
  switch (m) {
    case BridgeMode::full: return "full";
    case BridgeMode::spatial_only: return "spatial_only";
    case BridgeMode::channel_only: return "channel_only";
    case BridgeMode::off: return "off";
  }
  return "?";
}

inline constexpr int kBridgeKernel = 7;

template <class T>
struct BridgeParams {
  Var<T> spatial_w;  // 1 x 2 x 7 x 7 x 7
  Var<T> spatial_b;  // 1
  std::vector<Var<T>> gate_w;  // per scale: C_sum x C_s
  std::vector<Var<T>> gate_b;  // per scale: C_s
  Var<T> alpha, beta;  // raw, softplus-mapped
  BridgeMode mode = BridgeMode::full;

  std::size_t scales() const { return gate_w.size(); }
  std::size_t total_channels() const { return gate_w.empty() ? 0 : gate_w.front().shape()[0]; }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".spatial.w", spatial_w);
    f(prefix + ".spatial.b", spatial_b);
    for (std::size_t s = 0; s < gate_w.size(); ++s) {
      f(prefix + ".gate" + std::to_string(s + 1) + ".w", gate_w[s]);
      f(prefix + ".gate" + std::to_string(s + 1) + ".b", gate_b[s]);
    }
    f(prefix + ".alpha", alpha);
    f(prefix + ".beta", beta);
  }
};

template <class T>
struct SpatialGate {
  Var<T> mask;  // B x 1 x D x H x W
  Var<T> gated;
};

template <class T>
SpatialGate<T> spatial_gate(Tape<T>* tape, const Var<T>& t, const Var<T>& kernel, const Var<T>& bias) {
  Var<T> stats = nn::concat(tape, {nn::channel_mean(tape, t), nn::channel_max(tape, t)}, 1);
  const ops::ConvSpec spec{1, kBridgeKernel / 2, 1};
  Var<T> mask = nn::gate_sigmoid(tape, nn::conv3d(tape, stats, kernel, bias, spec));
  return {mask, nn::mul_spatial(tape, t, mask)};
}

/// z = [GAP(t_1), ..., GAP(t_S)]; g_s = sigmoid(z W_s + b_s), each B x C_s.
template <class T>
std::vector<Var<T>> channel_gates(Tape<T>* tape, const std::vector<Var<T>>& gated, const std::vector<Var<T>>& w,
                                  const std::vector<Var<T>>& b) {
  if (gated.size() != w.size() || w.size() != b.size()) throw ShapeError("channel_gates: scale count mismatch");
  std::vector<Var<T>> pooled;
  pooled.reserve(gated.size());
  for (const auto& t : gated) pooled.push_back(nn::global_avg_pool(tape, t));
  Var<T> z = nn::concat(tape, pooled, 1);
  std::vector<Var<T>> gates;
  for (std::size_t s = 0; s < w.size(); ++s) {
    if (w[s].shape()[0] != z.shape()[1])
      throw ShapeError("channel_gates: concatenated width " + std::to_string(z.shape()[1]) + " != " +
                       std::to_string(w[s].shape()[0]));
    gates.push_back(nn::gate_sigmoid(tape, nn::linear(tape, z, w[s], b[s])));
  }
  return gates;
}

/// Optional view of the intermediate gates for tests and instrumentation.
template <class T>
struct BridgeTrace {
  std::vector<Var<T>> masks;
  std::vector<Var<T>> gates;
};

/// t^_s = t_s + alpha t_s^sp + beta (g_s . t_s^sp).
template <class T>
std::vector<Var<T>> bridge_forward(Tape<T>* tape, const std::vector<Var<T>>& scales, const BridgeParams<T>& p,
                                   BridgeTrace<T>* trace = nullptr) {
  if (scales.size() != p.scales())
    throw ShapeError("bridge: expected " + std::to_string(p.scales()) + " scales, got " +
                     std::to_string(scales.size()));
  if (p.mode == BridgeMode::off) return scales;
  const bool use_spatial = p.mode != BridgeMode::channel_only;
  const bool use_channel = p.mode != BridgeMode::spatial_only;

  std::vector<Var<T>> gated;
  gated.reserve(scales.size());
  for (const auto& t : scales) {
    if (use_spatial) {
      auto sg = spatial_gate(tape, t, p.spatial_w, p.spatial_b);
      if (trace) trace->masks.push_back(sg.mask);
      gated.push_back(sg.gated);
    } else {
      gated.push_back(t);
    }
  }
  std::vector<Var<T>> gates;
  if (use_channel) {
    gates = channel_gates(tape, gated, p.gate_w, p.gate_b);
    if (trace) trace->gates = gates;
  }
  Var<T> alpha = use_spatial ? nn::softplus(tape, p.alpha) : Var<T>();
  Var<T> beta = use_channel ? nn::softplus(tape, p.beta) : Var<T>();

  std::vector<Var<T>> out;
  out.reserve(scales.size());
  for (std::size_t s = 0; s < scales.size(); ++s) {
    Var<T> y = scales[s];
    if (use_spatial) y = nn::add(tape, y, nn::scale_by(tape, gated[s], alpha));
    if (use_channel) y = nn::add(tape, y, nn::scale_by(tape, nn::mul_channel(tape, gated[s], gates[s]), beta));
    out.push_back(y);
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> bridge_forward(const std::vector<Tensor<T>>& scales, const BridgeParams<T>& p) {
  std::vector<Var<T>> in;
  for (const auto& t : scales) in.emplace_back(t);
  std::vector<Tensor<T>> out;
  for (const auto& v : bridge_forward<T>(nullptr, in, p)) out.push_back(v.value());
  return out;
}

/// Kernel ~ U(+-1/sqrt(fan_in)), gates likewise, biases zero, alpha = beta = 0.1.
template <class T>
BridgeParams<T> init_bridge(std::mt19937_64& rng, const std::string& name, const std::vector<std::size_t>& widths,
                            BridgeMode mode = BridgeMode::full) {
  std::size_t total = 0;
  for (auto c : widths) total += c;
  auto uniform = [&rng](Shape s, double bound) {
    Tensor<T> t(std::move(s));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.vec()) v = static_cast<T>(u(rng));
    return t;
  };
  BridgeParams<T> p;
  p.mode = mode;
  const std::size_t k = kBridgeKernel;
  p.spatial_w = Var<T>::parameter(uniform(Shape{1, 2, k, k, k}, 1.0 / std::sqrt(2.0 * k * k * k)), name + ".spatial.w");
  p.spatial_b = Var<T>::parameter(Tensor<T>(Shape{1}), name + ".spatial.b");
  for (std::size_t s = 0; s < widths.size(); ++s) {
    const std::string gs = name + ".gate" + std::to_string(s + 1);
    p.gate_w.push_back(
        Var<T>::parameter(uniform(Shape{total, widths[s]}, 1.0 / std::sqrt(static_cast<double>(total))), gs + ".w"));
    p.gate_b.push_back(Var<T>::parameter(Tensor<T>(Shape{widths[s]}), gs + ".b"));
  }
  const T a0 = static_cast<T>(ops::softplus_inverse(0.1));
  p.alpha = Var<T>::parameter(Tensor<T>(Shape{1}, a0), name + ".alpha");
  p.beta = Var<T>::parameter(Tensor<T>(Shape{1}, a0), name + ".beta");
  return p;
}

}  // namespace m4fuse
