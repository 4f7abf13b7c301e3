#pragma once

// 0.7 * soft Dice + 0.3 * cross-entropy over softmax probabilities.
//
// Dice is pooled over the whole batch per foreground class (1..K-1) and then
// averaged over those classes.

#include <cmath>
#include <cstdint>
#include <vector>

#include "m4fuse/autodiff.hpp"
#include "m4fuse/errors.hpp"
#include "m4fuse/tensor.hpp"

namespace m4fuse {

/// Class-index volume (B, D, H, W).
using LabelVolume = Tensor<std::int32_t>;

inline constexpr double kDiceWeight = 0.7;
inline constexpr double kCeWeight = 0.3;
inline constexpr double kDiceEps = 1e-5;

struct LossParts {
  double total = 0, dice = 0, ce = 0;
};

namespace detail {

template <class T>
void check_labels(const Tensor<T>& logits, const LabelVolume& labels) {
  logits.require_rank(5, "loss");
  const Shape& s = logits.shape();
  if (labels.shape() != Shape{s[0], s[2], s[3], s[4]})
    throw ShapeError("loss: labels " + shape_str(labels.shape()) + " do not match logits " + shape_str(s));
  const auto K = static_cast<std::int32_t>(s[1]);
  for (auto v : labels.vec())
    if (v < 0 || v >= K) throw DataError("label " + std::to_string(v) + " outside [0, " + std::to_string(K) + ")");
}

/// Softmax over the channel axis, in double.
template <class T>
std::vector<double> softmax_channels(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1), V = logits.spatial().voxels();
  std::vector<double> p(logits.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t v = 0; v < V; ++v) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits[(b * K + k) * V + v]));
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double e = std::exp(static_cast<double>(logits[(b * K + k) * V + v]) - mx);
        p[(b * K + k) * V + v] = e;
        z += e;
      }
      for (std::size_t k = 0; k < K; ++k) p[(b * K + k) * V + v] /= z;
    }
  return p;
}

}  // namespace detail

/// Loss value and its gradient w.r.t. the logits (when `grad` is non-null).
template <class T>
LossParts dice_ce_loss(const Tensor<T>& logits, const LabelVolume& labels, Tensor<T>* grad = nullptr) {
  detail::check_labels(logits, labels);
  const std::size_t B = logits.dim(0), K = logits.dim(1), V = logits.spatial().voxels();
  const double N = static_cast<double>(B * V);
  const auto p = detail::softmax_channels(logits);

  double ce = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t y = static_cast<std::size_t>(labels[b * V + v]);
      ce -= std::log(std::max(p[(b * K + y) * V + v], 1e-300));
    }
  ce /= N;

  std::vector<double> inter(K, 0.0), psum(K, 0.0), gsum(K, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 1; k < K; ++k)
      for (std::size_t v = 0; v < V; ++v) {
        const double pk = p[(b * K + k) * V + v];
        const bool g = static_cast<std::size_t>(labels[b * V + v]) == k;
        psum[k] += pk;
        if (g) {
          inter[k] += pk;
          gsum[k] += 1.0;
        }
      }
  const double F = static_cast<double>(K - 1);
  double dice_mean = 0.0;
  for (std::size_t k = 1; k < K; ++k) dice_mean += 2.0 * inter[k] / (psum[k] + gsum[k] + kDiceEps);
  dice_mean /= F;
  const double dice_loss = 1.0 - dice_mean;

  LossParts out{kDiceWeight * dice_loss + kCeWeight * ce, dice_loss, ce};
  if (!grad) return out;

  if (grad->shape() != logits.shape()) *grad = Tensor<T>(logits.shape());
  std::vector<double> gp(K);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t y = static_cast<std::size_t>(labels[b * V + v]);
      // d(dice part)/dp_k, then through the softmax Jacobian.
      double dot = 0.0;
      gp[0] = 0.0;
      for (std::size_t k = 1; k < K; ++k) {
        const double S = psum[k] + gsum[k] + kDiceEps;
        const double g = y == k ? 1.0 : 0.0;
        gp[k] = -kDiceWeight / F * (2.0 * g / S - 2.0 * inter[k] / (S * S));
      }
      for (std::size_t k = 0; k < K; ++k) dot += p[(b * K + k) * V + v] * gp[k];
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t i = (b * K + k) * V + v;
        const double ce_g = kCeWeight * (p[i] - (y == k ? 1.0 : 0.0)) / N;
        (*grad)[i] += static_cast<T>(p[i] * (gp[k] - dot) + ce_g);
      }
    }
  return out;
}

/// Differentiable scalar loss node.
template <class T>
Var<T> dice_ce_loss(Tape<T>* tape, const Var<T>& logits, const LabelVolume& labels, LossParts* parts = nullptr) {
  const LossParts lp = dice_ce_loss(logits.value(), labels);
  if (parts) *parts = lp;
  const bool rec = ad::should_record(tape, {&logits});
  Var<T> out(Tensor<T>(Shape{1}, static_cast<T>(lp.total)), rec);
  if (rec)
    tape->record([logits, labels, out] {
      if (!out.has_grad()) return;
      Tensor<T> g(logits.shape());
      dice_ce_loss(logits.value(), labels, &g);
      const T seed = out.grad()[0];
      Tensor<T>* gl = logits.grad_sink();
      for (std::size_t i = 0; i < g.size(); ++i) (*gl)[i] += seed * g[i];
    });
  return out;
}

}  // namespace m4fuse
