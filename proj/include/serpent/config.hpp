#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "serpent/model.hpp"
#include "serpent/train.hpp"

namespace serpent {

inline SnakeKind parse_conv_kind(const std::string& s) {
  if (s == "vanilla") return SnakeKind::kVanilla;
  if (s == "dsconv") return SnakeKind::kFixedSnake;
  if (s == "enhanced") return SnakeKind::kEnhanced;
  throw ConfigError("conv must be vanilla|dsconv|enhanced, got '" + s + "'");
}

inline std::string conv_kind_name(SnakeKind k) {
  switch (k) {
    case SnakeKind::kVanilla: return "vanilla";
    case SnakeKind::kFixedSnake: return "dsconv";
    case SnakeKind::kEnhanced: return "enhanced";
  }
  return "?";
}

inline ChannelAttentionKind parse_attention_kind(const std::string& s) {
  if (s == "none") return ChannelAttentionKind::kNone;
  if (s == "cam") return ChannelAttentionKind::kCam;
  if (s == "wcam") return ChannelAttentionKind::kWcam;
  throw ConfigError("channel_attention must be none|cam|wcam, got '" + s + "'");
}

inline std::string attention_kind_name(ChannelAttentionKind k) {
  switch (k) {
    case ChannelAttentionKind::kNone: return "none";
    case ChannelAttentionKind::kCam: return "cam";
    case ChannelAttentionKind::kWcam: return "wcam";
  }
  return "?";
}

struct RunConfig {
  std::string model = "tiny";  // tiny | default
  std::string conv = "enhanced";
  std::string channel_attention = "wcam";
  int ratio = 8;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int epochs = 30;
  int batch = 8;
  std::uint64_t seed = 0;
  bool augment = true;
  std::string manifest = "data/manifest.txt";
  std::string checkpoint = "model.ckpt";
  std::string log = "train_log.tsv";

  ModelConfig model_config() const {
    ModelConfig cfg;
    if (model == "tiny") cfg = tiny_config();
    else if (model != "default") throw ConfigError("model must be tiny|default, got '" + model + "'");
    cfg.snake = parse_conv_kind(conv);
    cfg.attention = parse_attention_kind(channel_attention);
    cfg.ratio = ratio;
    cfg.seed = seed;
    validate(cfg);
    return cfg;
  }

  TrainOptions train_options() const {
    TrainOptions o;
    o.epochs = epochs;
    o.batch = batch;
    o.adam.lr = lr;
    o.adam.weight_decay = weight_decay;
    o.seed = seed;
    o.augment = augment;
    o.checkpoint = checkpoint;
    return o;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename V>
V parse_value(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  V v{};
  in >> v;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad value for " + key + ": '" + text + "' (true|false)");
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

inline const std::map<std::string, Setter>& config_setters() {
  static const std::map<std::string, Setter> table = {
      {"model", [](RunConfig& c, const std::string& v) { c.model = v; }},
      {"conv", [](RunConfig& c, const std::string& v) { c.conv = conv_kind_name(parse_conv_kind(v)); }},
      {"channel_attention",
       [](RunConfig& c, const std::string& v) { c.channel_attention = attention_kind_name(parse_attention_kind(v)); }},
      {"ratio", [](RunConfig& c, const std::string& v) { c.ratio = parse_value<int>("ratio", v); }},
      {"lr", [](RunConfig& c, const std::string& v) { c.lr = parse_value<double>("lr", v); }},
      {"weight_decay", [](RunConfig& c, const std::string& v) { c.weight_decay = parse_value<double>("weight_decay", v); }},
      {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = parse_value<int>("epochs", v); }},
      {"batch", [](RunConfig& c, const std::string& v) { c.batch = parse_value<int>("batch", v); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_value<std::uint64_t>("seed", v); }},
      {"augment", [](RunConfig& c, const std::string& v) { c.augment = parse_bool("augment", v); }},
      {"manifest", [](RunConfig& c, const std::string& v) { c.manifest = v; }},
      {"checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = v; }},
      {"log", [](RunConfig& c, const std::string& v) { c.log = v; }},
  };
  return table;
}

}  // namespace detail

/// Sets one field by key. Unknown keys are errors.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::config_setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, value);
}

/// Flat "key = value" text; '#' starts a comment.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "<config>") {
  std::istringstream in(text);
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

/// SERPENT_SEED, when set, replaces the seed.
inline void apply_seed_env(RunConfig& cfg) {
  if (const char* env = std::getenv("SERPENT_SEED"); env && *env) cfg.seed = detail::parse_value<std::uint64_t>("SERPENT_SEED", env);
}

/// Effective config in the same "key = value" format it is read from.
inline std::string config_text(const RunConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "model = " << c.model << '\n'
      << "conv = " << c.conv << '\n'
      << "channel_attention = " << c.channel_attention << '\n'
      << "ratio = " << c.ratio << '\n'
      << "lr = " << c.lr << '\n'
      << "weight_decay = " << c.weight_decay << '\n'
      << "epochs = " << c.epochs << '\n'
      << "batch = " << c.batch << '\n'
      << "seed = " << c.seed << '\n'
      << "augment = " << (c.augment ? "true" : "false") << '\n'
      << "manifest = " << c.manifest << '\n'
      << "checkpoint = " << c.checkpoint << '\n'
      << "log = " << c.log << '\n';
  return out.str();
}

}  // namespace serpent
