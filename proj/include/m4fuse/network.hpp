#pragma once

// Full segmentation network.
//
//   t1 = GN(Conv(x))                      r      C1
//   t2 = GN(Conv(Pool(t1)))               r/2    C2
//   t3 = GN(Conv(Pool(t2)))               r/4    C3
//   t4 = GN(PEU4(Pool(t3)))               r/8    C4
//   t5 = GN(PEU5(Pool(t4)))               r/16   C5
//   b  = PEUb(Pool(t5))                   r/32   C5
//   (t~1..t~5) = Bridge(t1..t5)
//   y1 = Up(GN(POM1(b)))  + t~5           r/16
//   y2 = Up(GN(POM2(y1))) + t~4           r/8
//   y3 = Up(GN(POM3(y2))) + t~3           r/4
//   y4 = Up(GN(Conv(y3))) + t~2           r/2
//   y5 = Up(GN(Conv(y4))) + t~1           r
//   logits = Conv1x1x1(y5)

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "m4fuse/autodiff.hpp"
#include "m4fuse/bridge.hpp"
#include "m4fuse/config.hpp"
#include "m4fuse/experts.hpp"
#include "m4fuse/io.hpp"
#include "m4fuse/mixer.hpp"
#include "m4fuse/nn.hpp"

namespace m4fuse {

template <class T>
struct ConvNorm {
  Var<T> w, b;  // conv weights/bias; b may be empty
  Var<T> gain, bias;  // group-norm affine

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".conv.w", w);
    if (b) f(prefix + ".conv.b", b);
    f(prefix + ".gn.gain", gain);
    f(prefix + ".gn.bias", bias);
  }
};

template <class T>
struct Norm {
  Var<T> gain, bias;

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".gain", gain);
    f(prefix + ".bias", bias);
  }
};

template <class T>
struct Model {
  NetworkConfig cfg;
  std::vector<std::size_t> enc;  // C1..C5
  std::vector<std::size_t> dec;  // decoder widths per level

  ConvNorm<T> stem[3];
  ExpertBank<T> peu4, peu5, peub;
  Norm<T> gn4, gn5;
  BridgeParams<T> bridge;
  MixerParams<T> pom[3];
  Norm<T> pom_gn[3];
  ConvNorm<T> dec_conv[2];
  std::vector<Var<T>> skip_proj;  // pointwise C_s -> dec_s, only when widths differ
  Var<T> head_w, head_b;

  /// Visits every parameter once with its canonical name. The name prefix
  /// decides its report bucket.
  template <class F>
  void visit(F&& f) const {
    for (int i = 0; i < 3; ++i) stem[i].visit("encoder.stage" + std::to_string(i + 1), f);
    peu4.visit("encoder.peu4", f);
    gn4.visit("encoder.stage4.gn", f);
    peu5.visit("encoder.peu5", f);
    gn5.visit("encoder.stage5.gn", f);
    peub.visit("encoder.peub", f);
    bridge.visit("bridge", f);
    for (int i = 0; i < 3; ++i) {
      pom[i].visit("decoder.pom" + std::to_string(i + 1), f);
      pom_gn[i].visit("decoder.pom" + std::to_string(i + 1) + ".gn", f);
    }
    for (int i = 0; i < 2; ++i) dec_conv[i].visit("decoder.conv" + std::to_string(i + 4), f);
    for (std::size_t s = 0; s < skip_proj.size(); ++s)
      if (skip_proj[s]) f("decoder.skip" + std::to_string(s + 1) + ".w", skip_proj[s]);
    f("head.conv.w", head_w);
    f("head.conv.b", head_b);
  }

  std::vector<std::pair<std::string, Var<T>>> parameters() const {
    std::vector<std::pair<std::string, Var<T>>> out;
    visit([&out](const std::string& n, const Var<T>& v) { out.emplace_back(n, v); });
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    visit([&n](const std::string&, const Var<T>& v) { n += v.value().size(); });
    return n;
  }

  void zero_grad() const {
    visit([](const std::string&, const Var<T>& v) { v.zero_grad(); });
  }
};

namespace detail {
template <class T>
Tensor<T> uniform_tensor(std::mt19937_64& rng, Shape s, double bound) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.vec()) v = static_cast<T>(u(rng));
  return t;
}

template <class T>
ConvNorm<T> init_conv_norm(std::mt19937_64& rng, const std::string& name, std::size_t cin, std::size_t cout,
                           std::size_t k) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k * k));
  ConvNorm<T> c;
  c.w = Var<T>::parameter(uniform_tensor<T>(rng, Shape{cout, cin, k, k, k}, bound), name + ".conv.w");
  c.b = Var<T>::parameter(Tensor<T>(Shape{cout}), name + ".conv.b");
  c.gain = Var<T>::parameter(Tensor<T>(Shape{cout}, T{1}), name + ".gn.gain");
  c.bias = Var<T>::parameter(Tensor<T>(Shape{cout}), name + ".gn.bias");
  return c;
}

template <class T>
Norm<T> init_norm(const std::string& name, std::size_t c) {
  return {Var<T>::parameter(Tensor<T>(Shape{c}, T{1}), name + ".gain"),
          Var<T>::parameter(Tensor<T>(Shape{c}), name + ".bias")};
}
}  // namespace detail

/// Deterministic construction from the config and its seed.
template <class T>
Model<T> build(const NetworkConfig& cfg) {
  validate(cfg);
  std::mt19937_64 rng(cfg.seed);
  Model<T> m;
  m.cfg = cfg;
  m.enc = encoder_widths(cfg);
  m.dec = decoder_widths(cfg);
  const auto& c = m.enc;
  const auto& d = m.dec;
  const std::size_t ng = cfg.norm_groups;

  m.stem[0] = detail::init_conv_norm<T>(rng, "encoder.stage1", cfg.in_channels, c[0], 3);
  m.stem[1] = detail::init_conv_norm<T>(rng, "encoder.stage2", c[0], c[1], 3);
  m.stem[2] = detail::init_conv_norm<T>(rng, "encoder.stage3", c[1], c[2], 3);
  m.peu4 = init_bank<T>(rng, "encoder.peu4", c[2], c[3], ng, cfg.expert_count, cfg.top_k, cfg.dropout_p);
  m.gn4 = detail::init_norm<T>("encoder.stage4.gn", c[3]);
  m.peu5 = init_bank<T>(rng, "encoder.peu5", c[3], c[4], ng, cfg.expert_count, cfg.top_k, cfg.dropout_p);
  m.gn5 = detail::init_norm<T>("encoder.stage5.gn", c[4]);
  m.peub = init_bank<T>(rng, "encoder.peub", c[4], c[4], ng, cfg.expert_count, cfg.top_k, cfg.dropout_p);

  m.bridge = init_bridge<T>(rng, "bridge", c, cfg.bridge_mode);

  const std::size_t pom_in[3] = {c[4], d[4], d[3]};
  const std::size_t pom_out[3] = {d[4], d[3], d[2]};
  for (int i = 0; i < 3; ++i) {
    const std::string n = "decoder.pom" + std::to_string(i + 1);
    m.pom[i] = init_mixer<T>(rng, n, pom_in[i], pom_out[i], cfg.groups, cfg.state_dim, cfg.mixer);
    m.pom_gn[i] = detail::init_norm<T>(n + ".gn", pom_out[i]);
  }
  m.dec_conv[0] = detail::init_conv_norm<T>(rng, "decoder.conv4", d[2], d[1], 3);
  m.dec_conv[1] = detail::init_conv_norm<T>(rng, "decoder.conv5", d[1], d[0], 3);
  m.skip_proj.assign(5, Var<T>());
  for (std::size_t s = 0; s < 5; ++s)
    if (d[s] != c[s])
      m.skip_proj[s] = Var<T>::parameter(
          detail::uniform_tensor<T>(rng, Shape{d[s], c[s], 1, 1, 1}, 1.0 / std::sqrt(static_cast<double>(c[s]))),
          "decoder.skip" + std::to_string(s + 1) + ".w");
  m.head_w = Var<T>::parameter(
      detail::uniform_tensor<T>(rng, Shape{cfg.num_classes, d[0], 1, 1, 1}, 1.0 / std::sqrt(static_cast<double>(d[0]))),
      "head.conv.w");
  m.head_b = Var<T>::parameter(Tensor<T>(Shape{cfg.num_classes}), "head.conv.b");
  return m;
}

/// Instrumentation filled by forward when requested.
template <class T>
struct ForwardTrace {
  int bridge_calls = 0;
  int decoder_pom_calls = 0;
  std::vector<Var<T>> skips;  // t1..t5
  Var<T> bottleneck;
  std::vector<Var<T>> bridged;
};

template <class T>
Var<T> forward(Tape<T>* tape, const Model<T>& m, const Var<T>& x, const Route& route, bool training,
               std::mt19937_64* rng = nullptr, ForwardTrace<T>* trace = nullptr) {
  const auto& xv = x.value();
  xv.require_rank(5, "forward");
  if (xv.channels() != m.cfg.in_channels)
    throw ShapeError("forward: input has " + std::to_string(xv.channels()) + " channels, model expects " +
                     std::to_string(m.cfg.in_channels));
  const Dims3 sp = xv.spatial();
  if (sp.d % 32 || sp.h % 32 || sp.w % 32)
    throw ShapeError("forward: spatial dims " + shape_str(xv.shape()) + " must be divisible by 32");
  const std::size_t ng = m.cfg.norm_groups;
  const ops::ConvSpec same3{1, 1, 1}, point{1, 0, 1};

  auto conv_norm = [&](const Var<T>& in, const ConvNorm<T>& cn) {
    return nn::group_norm(tape, nn::conv3d(tape, in, cn.w, cn.b, same3), ng, cn.gain, cn.bias);
  };
  auto norm = [&](const Var<T>& in, const Norm<T>& n) { return nn::group_norm(tape, in, ng, n.gain, n.bias); };

  std::vector<Var<T>> t(5);
  t[0] = conv_norm(x, m.stem[0]);
  t[1] = conv_norm(nn::max_pool2(tape, t[0]), m.stem[1]);
  t[2] = conv_norm(nn::max_pool2(tape, t[1]), m.stem[2]);
  t[3] = norm(peu_forward(tape, nn::max_pool2(tape, t[2]), route, m.peu4, training, rng), m.gn4);
  t[4] = norm(peu_forward(tape, nn::max_pool2(tape, t[3]), route, m.peu5, training, rng), m.gn5);
  Var<T> b = peu_forward(tape, nn::max_pool2(tape, t[4]), route, m.peub, training, rng);

  std::vector<Var<T>> tt = bridge_forward(tape, t, m.bridge);
  for (std::size_t s = 0; s < 5; ++s)
    if (m.skip_proj[s]) tt[s] = nn::conv3d(tape, tt[s], m.skip_proj[s], Var<T>(), point);
  if (trace) {
    ++trace->bridge_calls;
    trace->skips = t;
    trace->bottleneck = b;
    trace->bridged = tt;
  }

  Var<T> y = b;
  for (int i = 0; i < 3; ++i) {
    y = norm(mixer_forward(tape, y, m.pom[i]), m.pom_gn[i]);
    if (trace) ++trace->decoder_pom_calls;
    y = nn::add(tape, nn::upsample2(tape, y), tt[4 - i]);
  }
  for (int i = 0; i < 2; ++i) y = nn::add(tape, nn::upsample2(tape, conv_norm(y, m.dec_conv[i])), tt[1 - i]);
  return nn::conv3d(tape, y, m.head_w, m.head_b, point);
}

/// Inference convenience: no tape, no dropout.
template <class T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& x, const Route& route, ForwardTrace<T>* trace = nullptr) {
  return forward<T>(nullptr, m, Var<T>(x), route, false, nullptr, trace).value();
}

/// Route for a batch given per-sample dataset ids.
template <class T>
Route route_for(const Model<T>& m, const std::vector<std::string>& ids) {
  return route_from_ids(ids, m.cfg.id_table, m.cfg.expert_count, m.cfg.top_k);
}

// ---------------------------------------------------------------------------
// Parameter report

struct ParamReport {
  std::size_t encoder = 0, decoder = 0, bridge = 0, head = 0, total = 0;
  std::size_t other() const { return bridge + head; }
  double pct(std::size_t n) const { return total ? 100.0 * static_cast<double>(n) / static_cast<double>(total) : 0.0; }
};

template <class T>
ParamReport param_report(const Model<T>& m) {
  ParamReport r;
  m.visit([&r](const std::string& name, const Var<T>& v) {
    const std::size_t n = v.value().size();
    r.total += n;
    if (name.rfind("encoder.", 0) == 0) r.encoder += n;
    else if (name.rfind("decoder.", 0) == 0) r.decoder += n;
    else if (name.rfind("bridge.", 0) == 0) r.bridge += n;
    else if (name.rfind("head.", 0) == 0) r.head += n;
    else throw Error("unbucketed parameter " + name);
  });
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: "M4FC", u8 version, u32 config length + config text, u64
// fingerprint, u32 tensor count, then per tensor a u32 name length, the name,
// and an M4FV record.

inline constexpr char kCheckpointMagic[4] = {'M', '4', 'F', 'C'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& os, const Model<float>& m) {
  const std::string text = to_text(m.cfg);
  os.write(kCheckpointMagic, 4);
  os.put(static_cast<char>(kCheckpointVersion));
  io::detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::uint64_t fp = fnv1a(text);
  io::detail::put_u32(os, static_cast<std::uint32_t>(fp));
  io::detail::put_u32(os, static_cast<std::uint32_t>(fp >> 32));
  const auto params = m.parameters();
  io::detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, v] : params) {
    io::detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_volume(os, v.value());
  }
  if (!os) throw IoError("checkpoint write failed");
}

inline Model<float> load_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IoError("bad checkpoint magic");
  if (is.get() != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  std::string text(io::detail::get_u32(is), '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(text.size()))) throw IoError("truncated checkpoint config");
  std::uint64_t fp = io::detail::get_u32(is);
  fp |= static_cast<std::uint64_t>(io::detail::get_u32(is)) << 32;
  if (fp != fnv1a(text)) throw IoError("checkpoint config fingerprint mismatch");
  Model<float> m = build<float>(parse_config(text).model);
  std::map<std::string, Var<float>> by_name;
  for (auto& [name, v] : m.parameters()) by_name.emplace(name, v);
  const std::uint32_t count = io::detail::get_u32(is);
  if (count != by_name.size())
    throw IoError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                  std::to_string(by_name.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(io::detail::get_u32(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw IoError("truncated tensor name");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint tensor '" + name + "' not in model");
    Tensor<float> t = io::read_volume(is);
    Var<float>& v = it->second;
    if (t.size() != v.value().size()) throw IoError("checkpoint tensor '" + name + "' has wrong size");
    v.mutable_value() = t.reshaped(v.shape());
  }
  return m;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  save_checkpoint(os, m);
}

inline Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return load_checkpoint(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

/// Copies parameter values between models of possibly different scalar type.
template <class To, class From>
Model<To> cast_model(const Model<From>& src) {
  Model<To> dst = build<To>(src.cfg);
  auto sp = src.parameters();
  auto dp = dst.parameters();
  for (std::size_t i = 0; i < sp.size(); ++i) dp[i].second.mutable_value() = sp[i].second.value().template cast<To>();
  return dst;
}

}  // namespace m4fuse
