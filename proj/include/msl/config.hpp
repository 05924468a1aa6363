#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "msl/channel.hpp"
#include "msl/conformal.hpp"
#include "msl/csv.hpp"
#include "msl/data.hpp"
#include "msl/meta.hpp"
#include "msl/splitnet.hpp"

namespace msl {

// ---------------------------------------------------------------------------
// Config file format: UTF-8 lines of key=value, grouped under [section]
// headers; '#' or ';' starts a comment; later duplicates win. Keys are
// reported as "section.key". CLI flags override file keys.
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3)
        throw config_error("config line " + std::to_string(lineno) + ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    if (key.empty())
      throw config_error("config line " + std::to_string(lineno) + ": empty key");
    out[section.empty() ? key : section + "." + key] = val;
  }
  return out;
}

inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  if (v == "inf" || v == "+inf") return std::numeric_limits<double>::infinity();
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw config_error("config: " + key + ": not a number: '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long u = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return u;
  } catch (const std::exception&) {
    throw config_error("config: " + key + ": not a nonnegative integer: '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw config_error("config: " + key + ": not a boolean: '" + v + "'");
}

}  // namespace detail

enum class RunMode { Dnn, Sl, Msl };
enum class DataSource { Synth, Omniglot };

inline const char* run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::Dnn: return "dnn";
    case RunMode::Sl: return "sl";
    case RunMode::Msl: return "msl";
  }
  return "?";
}

inline RunMode parse_run_mode(const std::string& v) {
  if (v == "dnn") return RunMode::Dnn;
  if (v == "sl") return RunMode::Sl;
  if (v == "msl") return RunMode::Msl;
  throw config_error("config: run.mode must be dnn, sl, or msl (got '" + v + "')");
}

/// Everything one experiment needs; a pure value whose echo() reproduces the
/// run bit for bit.
struct ExperimentConfig {
  RunMode mode = RunMode::Msl;
  std::uint64_t seed = 0;
  CutPoint cut{3};
  double zeta = 0;
  double meta_test_fraction = 0.2;
  std::size_t meta_test_steps = 30;
  std::size_t meta_test_episodes = 10;
  std::string out_dir = "out";

  MetaConfig meta;
  ChannelConfig channel;
  bool channel_in_meta_train = true;
  bool channel_in_meta_test = true;
  CPConfig cp;

  DataSource data = DataSource::Synth;
  std::string omniglot_root;
  GlyphGenConfig synth;

  std::size_t conv_channels = 64;
  std::size_t conv_blocks = 3;
  std::size_t fc_width = 64;

  ModelConfig model(std::size_t image_h, std::size_t image_w) const {
    ModelConfig m =
        ModelConfig::default_stack(meta.ways, conv_channels, conv_blocks, fc_width);
    m.input_shape = {1, image_h, image_w};
    return m;
  }

  void validate() const {
    meta.validate();
    channel.validate();
    cp.validate();
    synth.validate();
    if (meta_test_fraction < 0 || meta_test_fraction >= 1)
      throw config_error("config: run.meta_test_fraction must be in [0,1)");
    if (meta_test_episodes == 0)
      throw config_error("config: run.meta_test_episodes must be >= 1");
    if (data == DataSource::Omniglot && omniglot_root.empty())
      throw config_error("config: data.omniglot_root required for omniglot source");
    if (mode != RunMode::Dnn && cut.block_index < 1)
      throw config_error("config: run.cut must be >= 1");
  }
};

/// Applies one "section.key" assignment. Unknown keys are an error so typos
/// surface immediately.
inline void apply_key(ExperimentConfig& cfg, const std::string& key, const std::string& v) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_u64;
  if (key == "run.mode") cfg.mode = parse_run_mode(v);
  else if (key == "run.seed") cfg.seed = parse_u64(key, v);
  else if (key == "run.cut") cfg.cut.block_index = parse_u64(key, v);
  else if (key == "run.zeta") cfg.zeta = parse_double(key, v);
  else if (key == "run.meta_test_fraction") cfg.meta_test_fraction = parse_double(key, v);
  else if (key == "run.meta_test_steps") cfg.meta_test_steps = parse_u64(key, v);
  else if (key == "run.meta_test_episodes") cfg.meta_test_episodes = parse_u64(key, v);
  else if (key == "run.out_dir") cfg.out_dir = v;
  else if (key == "meta.tasks") cfg.meta.tasks_per_epoch = parse_u64(key, v);
  else if (key == "meta.ways") cfg.meta.ways = parse_u64(key, v);
  else if (key == "meta.shots") cfg.meta.shots = parse_u64(key, v);
  else if (key == "meta.query") cfg.meta.query = parse_u64(key, v);
  else if (key == "meta.inner_steps") cfg.meta.inner_steps = parse_u64(key, v);
  else if (key == "meta.eta") cfg.meta.eta = parse_double(key, v);
  else if (key == "meta.beta") cfg.meta.beta = parse_double(key, v);
  else if (key == "meta.epochs") cfg.meta.epochs = parse_u64(key, v);
  else if (key == "meta.first_order") cfg.meta.first_order = parse_bool(key, v);
  else if (key == "channel.snr_db") cfg.channel.snr_db = parse_double(key, v);
  else if (key == "channel.fading") cfg.channel.fading = parse_bool(key, v);
  else if (key == "channel.power") cfg.channel.power = parse_double(key, v);
  else if (key == "channel.quant_levels") cfg.channel.quant_levels = parse_u64(key, v);
  else if (key == "channel.apply_to_backward") cfg.channel.apply_to_backward = parse_bool(key, v);
  else if (key == "channel.channel_seed") cfg.channel.seed = parse_u64(key, v);
  else if (key == "channel.in_meta_train") cfg.channel_in_meta_train = parse_bool(key, v);
  else if (key == "channel.in_meta_test") cfg.channel_in_meta_test = parse_bool(key, v);
  else if (key == "conformal.alpha") cfg.cp.alpha = parse_double(key, v);
  else if (key == "conformal.cal_fraction") cfg.cp.cal_fraction = parse_double(key, v);
  else if (key == "data.source") {
    if (v == "synth") cfg.data = DataSource::Synth;
    else if (v == "omniglot") cfg.data = DataSource::Omniglot;
    else throw config_error("config: data.source must be synth or omniglot");
  } else if (key == "data.omniglot_root") cfg.omniglot_root = v;
  else if (key == "synth.num_classes") cfg.synth.num_classes = parse_u64(key, v);
  else if (key == "synth.per_class") cfg.synth.per_class = parse_u64(key, v);
  else if (key == "synth.image_size") cfg.synth.image_size = parse_u64(key, v);
  else if (key == "synth.strokes_min") cfg.synth.strokes_min = parse_u64(key, v);
  else if (key == "synth.strokes_max") cfg.synth.strokes_max = parse_u64(key, v);
  else if (key == "synth.points_min") cfg.synth.points_min = parse_u64(key, v);
  else if (key == "synth.points_max") cfg.synth.points_max = parse_u64(key, v);
  else if (key == "synth.jitter") cfg.synth.jitter = parse_double(key, v);
  else if (key == "synth.thickness") cfg.synth.thickness = parse_double(key, v);
  else if (key == "synth.seed") cfg.synth.seed = parse_u64(key, v);
  else if (key == "model.conv_channels") cfg.conv_channels = parse_u64(key, v);
  else if (key == "model.conv_blocks") cfg.conv_blocks = parse_u64(key, v);
  else if (key == "model.fc_width") cfg.fc_width = parse_u64(key, v);
  else throw config_error("config: unknown key '" + key + "'");
}

inline void apply_config(ExperimentConfig& cfg,
                         const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) apply_key(cfg, k, v);
}

/// Canonical echo of every semantic field; applying these lines reproduces
/// the configuration exactly.
inline std::vector<std::pair<std::string, std::string>> config_echo(
    const ExperimentConfig& c) {
  auto num = [](double v) { return csv_num(v); };
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("run.mode", run_mode_name(c.mode));
  kv.emplace_back("run.seed", std::to_string(c.seed));
  kv.emplace_back("run.cut", std::to_string(c.cut.block_index));
  kv.emplace_back("run.zeta", num(c.zeta));
  kv.emplace_back("run.meta_test_fraction", num(c.meta_test_fraction));
  kv.emplace_back("run.meta_test_steps", std::to_string(c.meta_test_steps));
  kv.emplace_back("run.meta_test_episodes", std::to_string(c.meta_test_episodes));
  kv.emplace_back("meta.tasks", std::to_string(c.meta.tasks_per_epoch));
  kv.emplace_back("meta.ways", std::to_string(c.meta.ways));
  kv.emplace_back("meta.shots", std::to_string(c.meta.shots));
  kv.emplace_back("meta.query", std::to_string(c.meta.query));
  kv.emplace_back("meta.inner_steps", std::to_string(c.meta.inner_steps));
  kv.emplace_back("meta.eta", num(c.meta.eta));
  kv.emplace_back("meta.beta", num(c.meta.beta));
  kv.emplace_back("meta.epochs", std::to_string(c.meta.epochs));
  kv.emplace_back("meta.first_order", c.meta.first_order ? "1" : "0");
  kv.emplace_back("channel.snr_db", num(c.channel.snr_db));
  kv.emplace_back("channel.fading", c.channel.fading ? "1" : "0");
  kv.emplace_back("channel.power", num(c.channel.power));
  kv.emplace_back("channel.quant_levels", std::to_string(c.channel.quant_levels));
  kv.emplace_back("channel.apply_to_backward", c.channel.apply_to_backward ? "1" : "0");
  kv.emplace_back("channel.channel_seed", std::to_string(c.channel.seed));
  kv.emplace_back("channel.in_meta_train", c.channel_in_meta_train ? "1" : "0");
  kv.emplace_back("channel.in_meta_test", c.channel_in_meta_test ? "1" : "0");
  kv.emplace_back("conformal.alpha", num(c.cp.alpha));
  kv.emplace_back("conformal.cal_fraction", num(c.cp.cal_fraction));
  kv.emplace_back("data.source", c.data == DataSource::Synth ? "synth" : "omniglot");
  if (c.data == DataSource::Omniglot) kv.emplace_back("data.omniglot_root", c.omniglot_root);
  kv.emplace_back("synth.num_classes", std::to_string(c.synth.num_classes));
  kv.emplace_back("synth.per_class", std::to_string(c.synth.per_class));
  kv.emplace_back("synth.image_size", std::to_string(c.synth.image_size));
  kv.emplace_back("synth.strokes_min", std::to_string(c.synth.strokes_min));
  kv.emplace_back("synth.strokes_max", std::to_string(c.synth.strokes_max));
  kv.emplace_back("synth.points_min", std::to_string(c.synth.points_min));
  kv.emplace_back("synth.points_max", std::to_string(c.synth.points_max));
  kv.emplace_back("synth.jitter", num(c.synth.jitter));
  kv.emplace_back("synth.thickness", num(c.synth.thickness));
  kv.emplace_back("synth.seed", std::to_string(c.synth.seed));
  kv.emplace_back("model.conv_channels", std::to_string(c.conv_channels));
  kv.emplace_back("model.conv_blocks", std::to_string(c.conv_blocks));
  kv.emplace_back("model.fc_width", std::to_string(c.fc_width));
  return kv;
}

}  // namespace msl
