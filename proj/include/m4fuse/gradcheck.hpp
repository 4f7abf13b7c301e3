#pragma once

// Central finite-difference audits of reverse-mode gradients, run in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "m4fuse/autodiff.hpp"
#include "m4fuse/loss.hpp"
#include "m4fuse/network.hpp"

namespace m4fuse {

struct GradCheckEntry {
  std::string name;  // parameter or input name
  std::string probe;  // "dir" for a random direction, "[i]" for one entry
  double analytic = 0, numeric = 0, rel_error = 0;
  double step = 0;  // step actually used for the central difference
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  std::size_t failures = 0;
  std::size_t refined = 0;  // probes whose step was shrunk to stay off a max kink
  bool pass() const { return failures == 0 && !entries.empty(); }
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  double floor = 1e-6;  // gradients below this magnitude are compared absolutely
  // When +-step changes which element a max-pool or channel-max selects, the
  // difference spans a kink; divide the step by 10 until it does not.
  bool refine_at_kinks = true;
  double min_step = 1e-7;
  std::size_t entries_per_tensor = 2;  // in addition to one random direction
  bool all_entries = false;
  std::uint64_t seed = 0;
};

inline double grad_rel_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Audits d(loss)/d(var) for every var in `vars`. `loss` must evaluate the
/// objective from the current values of the vars (no tape); `gradients` must
/// fill the grad buffers of the vars.
inline GradCheckReport audit_gradients(const std::vector<std::pair<std::string, Var<double>>>& vars,
                                       const std::function<double()>& loss, const std::function<void()>& gradients,
                                       const GradCheckOptions& opt = {}) {
  for (const auto& [n, v] : vars) v.zero_grad();
  gradients();
  std::vector<Tensor<double>> grads;
  for (const auto& [n, v] : vars) grads.push_back(v.has_grad() ? v.grad() : Tensor<double>(v.shape()));

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  GradCheckReport rep;
  // Central difference of f(h); f must restore the parameters itself.
  auto central = [&](const std::function<double(double)>& f, double& used) {
    double h = opt.step;
    for (;;) {
      if (!opt.refine_at_kinks) {
        used = h;
        return (f(h) - f(-h)) / (2.0 * h);
      }
      std::uint64_t sig[3];
      double fp, fm;
      {
        nn::SelectionProbe p;
        f(0.0);
        sig[0] = p.hash;
      }
      {
        nn::SelectionProbe p;
        fp = f(h);
        sig[1] = p.hash;
      }
      {
        nn::SelectionProbe p;
        fm = f(-h);
        sig[2] = p.hash;
      }
      if ((sig[0] == sig[1] && sig[0] == sig[2]) || h / 10.0 < opt.min_step) {
        if (h != opt.step) ++rep.refined;
        used = h;
        return (fp - fm) / (2.0 * h);
      }
      h /= 10.0;
    }
  };
  auto record = [&](const std::string& name, std::string probe, double a, double n, double h) {
    GradCheckEntry e{name, std::move(probe), a, n, grad_rel_error(a, n, opt.floor), h, false};
    e.pass = e.rel_error < opt.tolerance;
    rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
    if (!e.pass) ++rep.failures;
    rep.entries.push_back(std::move(e));
  };

  for (std::size_t p = 0; p < vars.size(); ++p) {
    Var<double> var = vars[p].second;
    Tensor<double>& w = var.mutable_value();
    const Tensor<double>& g = grads[p];
    const Tensor<double> w0 = w;

    // Random unit direction over the whole tensor.
    std::vector<double> dir(w.size());
    double norm = 0.0;
    for (auto& x : dir) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    double analytic = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i) {
      dir[i] /= norm;
      analytic += dir[i] * g[i];
    }
    auto shifted = [&](double h) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = w0[i] + h * dir[i];
      const double f = loss();
      w = w0;
      return f;
    };
    double h = 0.0;
    const double nd = central(shifted, h);
    record(vars[p].first, "dir", analytic, nd, h);

    std::vector<std::size_t> idx;
    if (opt.all_entries) {
      for (std::size_t i = 0; i < w.size(); ++i) idx.push_back(i);
    } else if (opt.entries_per_tensor > 0) {
      std::size_t big = 0;
      for (std::size_t i = 1; i < g.size(); ++i)
        if (std::abs(g[i]) > std::abs(g[big])) big = i;
      idx.push_back(big);
      std::uniform_int_distribution<std::size_t> pick(0, w.size() - 1);
      while (idx.size() < std::min(opt.entries_per_tensor, w.size())) {
        const std::size_t i = pick(rng);
        if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
      }
    }
    for (std::size_t i : idx) {
      auto at = [&](double h) {
        w[i] = w0[i] + h;
        const double f = loss();
        w[i] = w0[i];
        return f;
      };
      const double ni = central(at, h);
      record(vars[p].first, "[" + std::to_string(i) + "]", g[i], ni, h);
    }
  }
  return rep;
}

/// Weighted-sum probe for a single op: loss = sum_i r_i * op(inputs)_i.
inline GradCheckReport audit_op(const std::string& name, std::vector<Var<double>> inputs,
                                const std::function<Var<double>(Tape<double>*, const std::vector<Var<double>>&)>& op,
                                GradCheckOptions opt = {}) {
  Tensor<double> probe = op(nullptr, inputs).value();
  std::mt19937_64 rng(opt.seed + 17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : probe.vec()) v = u(rng);
  auto weighted = [&probe](const Tensor<double>& y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += probe[i] * y[i];
    return acc;
  };
  std::vector<std::pair<std::string, Var<double>>> named;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (inputs[i].requires_grad()) named.emplace_back(name + ".in" + std::to_string(i), inputs[i]);
  return audit_gradients(
      named, [&] { return weighted(op(nullptr, inputs).value()); },
      [&] {
        Tape<double> tape;
        Var<double> y = op(&tape, inputs);
        if (!y.requires_grad()) return;
        y.grad_sink()->vec() = probe.vec();
        tape.propagate();
      },
      opt);
}

/// Configuration of the small model used by the end-to-end audit.
inline NetworkConfig tiny_config(std::size_t width = 8) {
  NetworkConfig c;
  c.variant = "custom";
  c.max_channels = width;
  c.channels = {width, width, width, width, width};
  c.groups = 4;
  c.state_dim = 4;
  c.norm_groups = 1;  // the 1^3 bottleneck would otherwise normalise two values per group
  c.expert_count = 2;
  c.top_k = 2;
  c.dropout_p = 0.0;
  c.seed = 0;
  return c;
}

struct ModelGradCheck {
  GradCheckReport report;
  std::size_t tensors = 0;
};

/// End-to-end audit of every trainable tensor of a model against the 7:3
/// loss on a random input of the given spatial size.
inline ModelGradCheck audit_model(const NetworkConfig& cfg, Dims3 dims, const GradCheckOptions& opt = {}) {
  Model<double> m = build<double>(cfg);
  std::mt19937_64 rng(opt.seed + 101);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<double> x(Shape{1, cfg.in_channels, dims.d, dims.h, dims.w});
  for (auto& v : x.vec()) v = normal(rng);
  LabelVolume labels(Shape{1, dims.d, dims.h, dims.w});
  std::uniform_int_distribution<int> cls(0, static_cast<int>(cfg.num_classes) - 1);
  for (auto& v : labels.vec()) v = cls(rng);
  const Route route = route_from_ids({"a"}, {{"a", {1}}}, cfg.expert_count, cfg.top_k);

  auto params = m.parameters();
  ModelGradCheck out;
  out.tensors = params.size();
  out.report = audit_gradients(
      params, [&] { return dice_ce_loss(forward(m, x, route), labels).total; },
      [&] {
        Tape<double> tape;
        Var<double> logits = forward(&tape, m, Var<double>(x), route, false);
        tape.backward(dice_ce_loss(&tape, logits, labels));
      },
      opt);
  return out;
}

}  // namespace m4fuse
