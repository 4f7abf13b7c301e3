#pragma once

// Shared-plus-expert unit with hard, identifier-based routing.
//
// Every block (shared and expert) is depthwise 3^3 conv -> pointwise conv ->
// group norm -> SiLU. Experts share one shape so outputs can be averaged and
// the parameter count is exactly linear in the expert count.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "m4fuse/autodiff.hpp"
#include "m4fuse/errors.hpp"
#include "m4fuse/nn.hpp"

namespace m4fuse {

template <class T>
struct ConvBlock {
  Var<T> dw_w, dw_b;  // C_in x 1 x 3 x 3 x 3, C_in
  Var<T> pw_w, pw_b;  // C_out x C_in x 1 x 1 x 1, C_out
  Var<T> gn_gain, gn_bias;
  std::size_t norm_groups = 1;

  std::size_t in_channels() const { return dw_w.shape()[0]; }
  std::size_t out_channels() const { return pw_w.shape()[0]; }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".dw.w", dw_w);
    f(prefix + ".dw.b", dw_b);
    f(prefix + ".pw.w", pw_w);
    f(prefix + ".pw.b", pw_b);
    f(prefix + ".gn.gain", gn_gain);
    f(prefix + ".gn.bias", gn_bias);
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    visit("", [&n](const std::string&, const Var<T>& v) { n += v.value().size(); });
    return n;
  }
};

template <class T>
Var<T> block_forward(Tape<T>* tape, const Var<T>& x, const ConvBlock<T>& b) {
  const std::size_t c = b.in_channels();
  Var<T> y = nn::conv3d(tape, x, b.dw_w, b.dw_b, ops::ConvSpec{1, 1, c});
  y = nn::conv3d(tape, y, b.pw_w, b.pw_b, ops::ConvSpec{1, 0, 1});
  y = nn::group_norm(tape, y, b.norm_groups, b.gn_gain, b.gn_bias);
  return nn::silu(tape, y);
}

template <class T>
ConvBlock<T> init_block(std::mt19937_64& rng, const std::string& name, std::size_t c_in, std::size_t c_out,
                        std::size_t norm_groups) {
  if (c_out % norm_groups != 0)
    throw ConfigError(name + ": width " + std::to_string(c_out) + " not divisible by " + std::to_string(norm_groups) +
                      " norm groups");
  auto uniform = [&rng](Shape s, double bound) {
    Tensor<T> t(std::move(s));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.vec()) v = static_cast<T>(u(rng));
    return t;
  };
  ConvBlock<T> b;
  b.norm_groups = norm_groups;
  b.dw_w = Var<T>::parameter(uniform(Shape{c_in, 1, 3, 3, 3}, 1.0 / std::sqrt(27.0)), name + ".dw.w");
  b.dw_b = Var<T>::parameter(Tensor<T>(Shape{c_in}), name + ".dw.b");
  b.pw_w = Var<T>::parameter(uniform(Shape{c_out, c_in, 1, 1, 1}, 1.0 / std::sqrt(static_cast<double>(c_in))),
                             name + ".pw.w");
  b.pw_b = Var<T>::parameter(Tensor<T>(Shape{c_out}), name + ".pw.b");
  b.gn_gain = Var<T>::parameter(Tensor<T>(Shape{c_out}, T{1}), name + ".gn.gain");
  b.gn_bias = Var<T>::parameter(Tensor<T>(Shape{c_out}), name + ".gn.bias");
  return b;
}

template <class T>
struct ExpertBank {
  ConvBlock<T> shared;
  std::vector<ConvBlock<T>> experts;
  std::size_t top_k = 1;
  double dropout_p = 0.0;

  std::size_t count() const { return experts.size(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    shared.visit(prefix + ".shared", f);
    for (std::size_t m = 0; m < experts.size(); ++m) experts[m].visit(prefix + ".expert" + std::to_string(m + 1), f);
  }
};

template <class T>
ExpertBank<T> init_bank(std::mt19937_64& rng, const std::string& name, std::size_t c_in, std::size_t c_out,
                        std::size_t norm_groups, std::size_t count, std::size_t top_k, double dropout_p) {
  if (count > 0 && (top_k < 1 || top_k > count))
    throw ConfigError(name + ": top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(count) + "]");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError(name + ": dropout_p must lie in [0,1)");
  ExpertBank<T> bank;
  bank.top_k = count == 0 ? 0 : top_k;
  bank.dropout_p = dropout_p;
  bank.shared = init_block<T>(rng, name + ".shared", c_in, c_out, norm_groups);
  for (std::size_t m = 0; m < count; ++m)
    bank.experts.push_back(init_block<T>(rng, name + ".expert" + std::to_string(m + 1), c_in, c_out, norm_groups));
  return bank;
}

/// Per-sample 1-based expert indices (size top_k each; empty for a
/// shared-only bank).
using Route = std::vector<std::vector<std::size_t>>;

/// Identifier -> 1-based expert list. A single index with top_k > 1 is
/// extended cyclically (i, i+1, ...) over the M experts.
using IdTable = std::map<std::string, std::vector<std::size_t>>;

inline Route route_from_ids(const std::vector<std::string>& ids, const IdTable& table, std::size_t count,
                            std::size_t top_k) {
  Route route;
  route.reserve(ids.size());
  for (const auto& id : ids) {
    std::vector<std::size_t> sel;
    if (count == 0) {
      route.push_back(sel);
      continue;
    }
    if (table.empty() && count == 1) {
      sel.assign(1, 1);
    } else {
      auto it = table.find(id);
      if (it == table.end()) throw RoutingError("no expert mapping for dataset id '" + id + "'");
      sel = it->second;
    }
    for (auto m : sel)
      if (m < 1 || m > count)
        throw RoutingError("id '" + id + "' maps to expert " + std::to_string(m) + ", outside [1, " +
                           std::to_string(count) + "]");
    if (sel.size() == 1 && top_k > 1) {
      for (std::size_t j = 1; j < top_k; ++j) sel.push_back((sel[0] - 1 + j) % count + 1);
    } else if (sel.size() != top_k) {
      throw RoutingError("id '" + id + "' selects " + std::to_string(sel.size()) + " experts, top_k is " +
                         std::to_string(top_k));
    }
    route.push_back(std::move(sel));
  }
  return route;
}

/// out_i = Dropout_p(f_sh(u_i) + mean_{m in route_i} f_m(u_i)), stacked over
/// the batch axis.
template <class T>
Var<T> peu_forward(Tape<T>* tape, const Var<T>& u, const Route& route, const ExpertBank<T>& bank, bool training,
                   std::mt19937_64* rng) {
  u.value().require_rank(5, "peu_forward");
  const std::size_t B = u.value().batch();
  if (route.size() != B)
    throw ShapeError("peu: route has " + std::to_string(route.size()) + " entries for batch " + std::to_string(B));
  if (u.value().channels() != bank.shared.in_channels())
    throw ShapeError("peu: input has " + std::to_string(u.value().channels()) + " channels, bank expects " +
                     std::to_string(bank.shared.in_channels()));
  std::vector<Var<T>> outs;
  outs.reserve(B);
  for (std::size_t i = 0; i < B; ++i) {
    Var<T> ui = B == 1 ? u : nn::slice(tape, u, 0, i, 1);
    Var<T> y = block_forward(tape, ui, bank.shared);
    const auto& sel = route[i];
    if (!sel.empty()) {
      Var<T> acc;
      for (auto m : sel) {
        if (m < 1 || m > bank.count()) throw RoutingError("expert index " + std::to_string(m) + " out of range");
        Var<T> e = block_forward(tape, ui, bank.experts[m - 1]);
        acc = acc ? nn::add(tape, acc, e) : e;
      }
      if (sel.size() > 1) acc = nn::scale_const(tape, acc, static_cast<T>(1.0 / static_cast<double>(sel.size())));
      y = nn::add(tape, y, acc);
    }
    outs.push_back(nn::dropout(tape, y, bank.dropout_p, training, rng));
  }
  return B == 1 ? outs.front() : nn::concat(tape, outs, 0);
}

struct ExpertCount {
  std::size_t shared = 0;
  std::size_t per_expert = 0;
  std::size_t total = 0;
};

template <class T>
ExpertCount expert_param_count(const ExpertBank<T>& bank) {
  ExpertCount c;
  c.shared = bank.shared.param_count();
  c.per_expert = bank.experts.empty() ? 0 : bank.experts.front().param_count();
  c.total = c.shared;
  for (const auto& e : bank.experts) c.total += e.param_count();
  return c;
}

}  // namespace m4fuse
