#pragma once

// Model, training, and synthetic-data configuration plus the key = value
// text format used by the CLI.
//
//   # comment
//   seed = 0
//   [model]
//   variant = B
//   experts.count = 2        # dotted keys work inside or outside sections

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "m4fuse/bridge.hpp"
#include "m4fuse/errors.hpp"
#include "m4fuse/experts.hpp"
#include "m4fuse/mixer.hpp"

namespace m4fuse {

enum class ScheduleKind { calibrated, geometric };

struct NetworkConfig {
  std::string variant = "B";
  std::size_t max_channels = 256;
  std::vector<std::size_t> channels;  // explicit C1..C5; empty -> derived from schedule
  ScheduleKind schedule = ScheduleKind::calibrated;
  std::size_t groups = 4;  // mixer channel groups g
  std::size_t state_dim = 16;
  std::size_t norm_groups = 4;
  std::size_t in_channels = 4;
  std::size_t num_classes = 4;
  double decoder_width_multiplier = 1.0;
  MixerOptions mixer;
  std::size_t expert_count = 1;
  std::size_t top_k = 1;
  double dropout_p = 0.0;
  IdTable id_table;
  BridgeMode bridge_mode = BridgeMode::full;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 2;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double min_lr = 1e-6;
  std::size_t patience = 20;
};

struct SyntheticSpec {
  Dims3 shape{32, 32, 32};
  std::size_t count = 32;
  std::size_t sites = 2;
  double noise = 0.1;
  double site_shift = 0.5;
  // Ellipsoid semi-axes as fractions of the volume extent.
  double radius_wt = 0.30;
  double radius_tc = 0.18;
  double radius_et = 0.10;
  double et_shell = 0.5;  // inner fraction of the ET ellipsoid left as core
  std::uint64_t seed = 0;
};

struct Config {
  NetworkConfig model;
  TrainConfig train;
  SyntheticSpec synthetic;
  std::size_t val_count = 8;
};

inline std::size_t variant_max_channels(const std::string& v) {
  if (v == "T") return 128;
  if (v == "S") return 196;
  if (v == "B") return 256;
  if (v == "L") return 384;
  throw ConfigError("unknown variant '" + v + "' (expected T|S|B|L)");
}

inline std::size_t round_to_multiple(double x, std::size_t g) {
  const auto k = static_cast<std::size_t>(std::lround(x / static_cast<double>(g)));
  return std::max<std::size_t>(1, k) * g;
}

/// C1..C5 as fractions of Max(C) rounded to multiples of g.
inline std::vector<std::size_t> channel_schedule(std::size_t max_c, std::size_t g, ScheduleKind kind) {
  static constexpr std::array<double, 5> calibrated{1.0 / 8, 1.0 / 4, 1.0 / 3, 1.0 / 2, 1.0};
  static constexpr std::array<double, 5> geometric{1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2, 1.0};
  const auto& f = kind == ScheduleKind::calibrated ? calibrated : geometric;
  std::vector<std::size_t> c(5);
  for (std::size_t i = 0; i < 4; ++i) c[i] = round_to_multiple(f[i] * static_cast<double>(max_c), g);
  c[4] = max_c;
  return c;
}

inline std::vector<std::size_t> encoder_widths(const NetworkConfig& cfg) {
  return cfg.channels.empty() ? channel_schedule(cfg.max_channels, cfg.groups, cfg.schedule) : cfg.channels;
}

inline std::vector<std::size_t> decoder_widths(const NetworkConfig& cfg) {
  auto c = encoder_widths(cfg);
  if (cfg.decoder_width_multiplier == 1.0) return c;
  for (auto& w : c) w = round_to_multiple(cfg.decoder_width_multiplier * static_cast<double>(w), cfg.groups);
  return c;
}

inline void validate(const NetworkConfig& cfg) {
  const auto c = encoder_widths(cfg);
  if (c.size() != 5) throw ConfigError("model.channels needs five widths");
  if (c[4] != cfg.max_channels)
    throw ConfigError("C5 (" + std::to_string(c[4]) + ") must equal max_channels (" +
                      std::to_string(cfg.max_channels) + ")");
  for (std::size_t i = 1; i < 5; ++i)
    if (c[i] < c[i - 1]) throw ConfigError("encoder widths must be nondecreasing");
  if (cfg.groups == 0 || cfg.norm_groups == 0 || cfg.state_dim == 0) throw ConfigError("group counts must be positive");
  for (auto w : c) {
    if (w % cfg.groups != 0)
      throw ConfigError("width " + std::to_string(w) + " not divisible by g=" + std::to_string(cfg.groups));
    if (w % cfg.norm_groups != 0)
      throw ConfigError("width " + std::to_string(w) + " not divisible by norm_groups=" +
                        std::to_string(cfg.norm_groups));
  }
  if (!(cfg.decoder_width_multiplier > 0.0)) throw ConfigError("decoder_width_multiplier must be positive");
  for (auto w : decoder_widths(cfg))
    if (w % cfg.norm_groups != 0) throw ConfigError("decoder width not divisible by norm_groups");
  if (cfg.expert_count > 0 && (cfg.top_k < 1 || cfg.top_k > cfg.expert_count))
    throw ConfigError("experts.top_k must lie in [1, experts.count]");
  if (cfg.dropout_p < 0.0 || cfg.dropout_p >= 1.0) throw ConfigError("experts.dropout_p must lie in [0,1)");
  if (cfg.in_channels == 0 || cfg.num_classes < 2) throw ConfigError("bad in_channels/num_classes");
}

inline NetworkConfig variant_config(const std::string& v) {
  NetworkConfig cfg;
  cfg.variant = v;
  cfg.max_channels = variant_max_channels(v);
  return cfg;
}

// ---------------------------------------------------------------------------
// Text format

namespace detail {
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    const auto x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument("bad");
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

/// "A:1, B:2, C:1+2"
inline IdTable parse_id_table(const std::string& v) {
  IdTable t;
  for (const auto& entry : split(v, ',')) {
    const auto colon = entry.find(':');
    if (colon == std::string::npos) throw ConfigError("experts.id_table entry '" + entry + "' lacks ':'");
    const std::string id = trim(entry.substr(0, colon));
    std::vector<std::size_t> idx;
    for (const auto& n : split(entry.substr(colon + 1), '+')) idx.push_back(to_uint("experts.id_table", n));
    if (id.empty() || idx.empty()) throw ConfigError("experts.id_table entry '" + entry + "' is incomplete");
    t[id] = idx;
  }
  return t;
}

inline std::string format_id_table(const IdTable& t) {
  std::string s;
  for (const auto& [id, idx] : t) {
    if (!s.empty()) s += ", ";
    s += id + ":";
    for (std::size_t i = 0; i < idx.size(); ++i) s += (i ? "+" : "") + std::to_string(idx[i]);
  }
  return s;
}

inline Dims3 parse_dims(const std::string& key, const std::string& v) {
  const auto parts = split(v, 'x');
  if (parts.size() != 3) throw ConfigError(key + ": expected DxHxW, got '" + v + "'");
  return {to_uint(key, parts[0]), to_uint(key, parts[1]), to_uint(key, parts[2])};
}

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}
}  // namespace detail

/// Applies one fully qualified key. Unknown keys are errors.
inline void set_key(Config& c, const std::string& key, const std::string& v) {
  using namespace detail;
  auto& m = c.model;
  if (key == "seed") {
    m.seed = to_uint(key, v);
    c.synthetic.seed = m.seed;
  } else if (key == "model.variant") {
    m.variant = v;
    m.max_channels = variant_max_channels(v);
  } else if (key == "model.max_channels") {
    m.max_channels = to_uint(key, v);
    m.variant = "custom";
  } else if (key == "model.channels") {
    m.channels.clear();
    for (const auto& w : split(v, ',')) m.channels.push_back(to_uint(key, w));
  } else if (key == "model.schedule") {
    if (v == "calibrated") m.schedule = ScheduleKind::calibrated;
    else if (v == "geometric") m.schedule = ScheduleKind::geometric;
    else throw ConfigError(key + ": expected calibrated|geometric");
  } else if (key == "model.groups") {
    m.groups = to_uint(key, v);
  } else if (key == "model.state_dim") {
    m.state_dim = to_uint(key, v);
  } else if (key == "model.norm_groups") {
    m.norm_groups = to_uint(key, v);
  } else if (key == "model.in_channels") {
    m.in_channels = to_uint(key, v);
  } else if (key == "model.num_classes") {
    m.num_classes = to_uint(key, v);
  } else if (key == "model.decoder_width_multiplier") {
    m.decoder_width_multiplier = to_double(key, v);
  } else if (key == "mixer.ssm") {
    m.mixer.use_ssm = to_bool(key, v);
  } else if (key == "mixer.skip_scale") {
    m.mixer.use_skip_scale = to_bool(key, v);
  } else if (key == "mixer.projection") {
    m.mixer.use_projection = to_bool(key, v);
  } else if (key == "experts.count") {
    m.expert_count = to_uint(key, v);
  } else if (key == "experts.top_k") {
    m.top_k = to_uint(key, v);
  } else if (key == "experts.dropout_p") {
    m.dropout_p = to_double(key, v);
  } else if (key == "experts.id_table") {
    m.id_table = parse_id_table(v);
  } else if (key == "bridge.mode") {
    m.bridge_mode = parse_bridge_mode(v);
  } else if (key == "train.epochs") {
    c.train.epochs = to_uint(key, v);
  } else if (key == "train.batch_size") {
    c.train.batch_size = to_uint(key, v);
  } else if (key == "train.lr") {
    c.train.lr = to_double(key, v);
  } else if (key == "train.weight_decay") {
    c.train.weight_decay = to_double(key, v);
  } else if (key == "train.min_lr") {
    c.train.min_lr = to_double(key, v);
  } else if (key == "train.patience") {
    c.train.patience = to_uint(key, v);
  } else if (key == "train.val_count") {
    c.val_count = to_uint(key, v);
  } else if (key == "synthetic.shape") {
    c.synthetic.shape = parse_dims(key, v);
  } else if (key == "synthetic.count") {
    c.synthetic.count = to_uint(key, v);
  } else if (key == "synthetic.sites") {
    c.synthetic.sites = to_uint(key, v);
  } else if (key == "synthetic.noise") {
    c.synthetic.noise = to_double(key, v);
  } else if (key == "synthetic.site_shift") {
    c.synthetic.site_shift = to_double(key, v);
  } else if (key == "synthetic.radius_wt") {
    c.synthetic.radius_wt = to_double(key, v);
  } else if (key == "synthetic.radius_tc") {
    c.synthetic.radius_tc = to_double(key, v);
  } else if (key == "synthetic.radius_et") {
    c.synthetic.radius_et = to_double(key, v);
  } else if (key == "synthetic.et_shell") {
    c.synthetic.et_shell = to_double(key, v);
  } else if (key == "synthetic.seed") {
    c.synthetic.seed = to_uint(key, v);
  } else {
    throw ConfigError("unknown key '" + key + "'");
  }
}

inline Config parse_config(const std::string& text) {
  Config c;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    try {
      set_key(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate(c.model);
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text of the model section; rebuilding from it reproduces the
/// same parameter shapes.
inline std::string to_text(const NetworkConfig& m) {
  using detail::fmt;
  std::ostringstream os;
  const auto c = encoder_widths(m);
  os << "seed = " << m.seed << "\n[model]\n";
  if (m.variant == "custom")
    os << "max_channels = " << m.max_channels << "\n";
  else
    os << "variant = " << m.variant << "\n";
  os << "channels = " << c[0] << "," << c[1] << "," << c[2] << "," << c[3] << "," << c[4] << "\n";
  os << "groups = " << m.groups << "\nstate_dim = " << m.state_dim << "\nnorm_groups = " << m.norm_groups << "\n";
  os << "in_channels = " << m.in_channels << "\nnum_classes = " << m.num_classes << "\n";
  os << "decoder_width_multiplier = " << fmt(m.decoder_width_multiplier) << "\n";
  os << "[mixer]\nssm = " << (m.mixer.use_ssm ? "true" : "false")
     << "\nskip_scale = " << (m.mixer.use_skip_scale ? "true" : "false")
     << "\nprojection = " << (m.mixer.use_projection ? "true" : "false") << "\n";
  os << "[experts]\ncount = " << m.expert_count << "\ntop_k = " << m.top_k << "\ndropout_p = " << fmt(m.dropout_p)
     << "\n";
  if (!m.id_table.empty()) os << "id_table = " << detail::format_id_table(m.id_table) << "\n";
  os << "[bridge]\nmode = " << to_string(m.bridge_mode) << "\n";
  return os.str();
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fingerprint(const NetworkConfig& m) { return fnv1a(to_text(m)); }

}  // namespace m4fuse
