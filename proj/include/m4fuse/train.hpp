#pragma once

// Desk-scale training loop with validation Dice and plateau early stopping.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "m4fuse/config.hpp"
#include "m4fuse/loss.hpp"
#include "m4fuse/metrics.hpp"
#include "m4fuse/network.hpp"
#include "m4fuse/optim.hpp"
#include "m4fuse/synthetic.hpp"

namespace m4fuse {

/// Pinned toy protocol: Max(C)=16, two sites routed to two experts, noisy
/// enough that per-voxel intensity alone does not saturate Dice.
inline Config toy_config() {
  Config c;
  c.model.variant = "custom";
  c.model.max_channels = 16;
  c.model.expert_count = 2;
  c.model.top_k = 1;
  c.model.id_table = {{"A", {1}}, {"B", {2}}};
  c.train.epochs = 40;
  c.train.batch_size = 2;
  c.train.lr = 3e-3;
  c.synthetic.count = 32;
  c.synthetic.sites = 2;
  c.synthetic.noise = 0.8;
  c.val_count = 8;
  return c;
}

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0;  // mean training loss over the epoch
  double val_dice = 0;  // mean of WT/TC/ET Dice on the held-out set
  double lr = 0;  // learning rate at the last step of the epoch
};

struct TrainResult {
  Model<float> model;  // parameters of the best validation epoch
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_dice = 0;
  bool stopped_early = false;
};

/// Argmax over classes of (1, K, D, H, W) logits as BraTS label values.
inline std::vector<int> predict_labels(const Tensor<float>& logits) {
  const std::size_t K = logits.dim(1), V = logits.spatial().voxels();
  std::vector<int> out(V);
  for (std::size_t v = 0; v < V; ++v) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[k * V + v] > logits[best * V + v]) best = k;
    out[v] = class_to_brats(static_cast<int>(best));
  }
  return out;
}

inline double evaluate_dice(const Model<float>& m, const std::vector<Sample>& val) {
  if (val.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& s : val) {
    const Tensor<float> logits = forward(m, s.image, route_for(m, {s.id}));
    acc += score_regions(predict_labels(logits), brats_labels(s.labels), s.image.spatial(), false).mean_dice();
  }
  return acc / static_cast<double>(val.size());
}

namespace detail {
inline Tensor<float> stack_images(const std::vector<const Sample*>& batch) {
  const Shape& s = batch.front()->image.shape();
  Tensor<float> out(Shape{batch.size(), s[1], s[2], s[3], s[4]});
  const std::size_t n = batch.front()->image.size();
  for (std::size_t i = 0; i < batch.size(); ++i)
    std::copy(batch[i]->image.data(), batch[i]->image.data() + n, out.data() + i * n);
  return out;
}

inline LabelVolume stack_labels(const std::vector<const Sample*>& batch) {
  const Shape& s = batch.front()->labels.shape();
  LabelVolume out(Shape{batch.size(), s[1], s[2], s[3]});
  const std::size_t n = batch.front()->labels.size();
  for (std::size_t i = 0; i < batch.size(); ++i)
    std::copy(batch[i]->labels.data(), batch[i]->labels.data() + n, out.data() + i * n);
  return out;
}

inline void copy_params(const Model<float>& from, Model<float>& to) {
  auto a = from.parameters();
  auto b = to.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) b[i].second.mutable_value() = a[i].second.value();
}
}  // namespace detail

/// Last `val_count` samples are held out (at least one sample stays in training).
inline std::pair<std::vector<Sample>, std::vector<Sample>> split_holdout(std::vector<Sample> all, std::size_t val_count) {
  const std::size_t n_val = all.empty() ? 0 : std::min(val_count, all.size() - 1);
  std::vector<Sample> val(std::make_move_iterator(all.end() - static_cast<std::ptrdiff_t>(n_val)),
                          std::make_move_iterator(all.end()));
  all.resize(all.size() - n_val);
  return {std::move(all), std::move(val)};
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains from a fresh build of cfg.model. Aborts with TrainingError if the
/// loss turns non-finite.
inline TrainResult train_toy(const Config& cfg, const std::vector<Sample>& train, const std::vector<Sample>& val,
                             std::size_t epochs, const EpochCallback& on_epoch = {}) {
  if (train.empty()) throw DataError("train_toy: empty training set");
  const std::size_t bs = std::max<std::size_t>(1, cfg.train.batch_size);
  const std::size_t steps_per_epoch = (train.size() + bs - 1) / bs;

  TrainResult res{build<float>(cfg.model), {}, 0, -1.0, false};
  Model<float> best = build<float>(cfg.model);
  AdamW<float> opt(res.model.parameters(), cfg.train.weight_decay);
  const CosineSchedule sched{cfg.train.lr, cfg.train.min_lr, epochs * steps_per_epoch};
  std::mt19937_64 rng(cfg.model.seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  std::size_t step = 0, since_best = 0;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    double lr = sched(step);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<const Sample*> batch;
      std::vector<std::string> ids;
      for (std::size_t i = s * bs; i < std::min(train.size(), (s + 1) * bs); ++i) {
        batch.push_back(&train[order[i]]);
        ids.push_back(train[order[i]].id);
      }
      Tape<float> tape;
      Var<float> x(detail::stack_images(batch));
      Var<float> logits = forward(&tape, res.model, x, route_for(res.model, ids), true, &rng);
      Var<float> loss = dice_ce_loss(&tape, logits, detail::stack_labels(batch));
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw TrainingError("loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step));
      opt.zero_grad();
      tape.backward(loss);
      lr = sched(step);
      opt.step(lr);
      ++step;
      loss_sum += lv;
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(steps_per_epoch), evaluate_dice(res.model, val), lr};
    res.log.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.val_dice > res.best_dice) {
      res.best_dice = log.val_dice;
      res.best_epoch = epoch;
      detail::copy_params(res.model, best);
      since_best = 0;
    } else if (++since_best >= cfg.train.patience) {
      res.stopped_early = true;
      break;
    }
  }
  detail::copy_params(best, res.model);
  return res;
}

}  // namespace m4fuse
