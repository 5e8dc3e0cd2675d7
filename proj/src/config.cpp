#include "isg/config.hpp"

#include <zlib.h>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "isg/errors.hpp"

namespace isg {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && p == v.data() + v.size(), Err::InvalidConfig,
          key + ": not an integer: '" + v + "'");
  return out;
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && p == v.data() + v.size(), Err::InvalidConfig,
          key + ": not an unsigned integer: '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  require(!v.empty(), Err::InvalidConfig, key + ": empty number");
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  require(end == v.c_str() + v.size(), Err::InvalidConfig, key + ": not a number: '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(Err::InvalidConfig, key + ": expected true/false, got '" + v + "'");
}

std::vector<double> to_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  require(!out.empty(), Err::InvalidConfig, key + ": empty list");
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  require(ec == std::errc(), Err::NonFiniteValue, "unformattable double");
  return std::string(buf, p);
}

std::string fmt_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += fmt_double(v[i]);
  }
  return out;
}

const char* mode_name(ThresholdRule::Mode m) {
  return m == ThresholdRule::Mode::Adaptive ? "adaptive" : "fixed";
}

ThresholdRule::Mode parse_mode(const std::string& key, const std::string& v) {
  if (v == "adaptive") return ThresholdRule::Mode::Adaptive;
  if (v == "fixed") return ThresholdRule::Mode::Fixed;
  throw Error(Err::InvalidConfig, key + ": expected adaptive or fixed, got '" + v + "'");
}

}  // namespace

void ConfigMap::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries)
    if (k == key) {
      v = value;
      return;
    }
  entries.emplace_back(key, value);
}

const std::string* ConfigMap::find(const std::string& key) const {
  for (const auto& [k, v] : entries)
    if (k == key) return &v;
  return nullptr;
}

ConfigMap parse_config_text(const std::string& text, const std::string& origin) {
  ConfigMap map;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    require(eq != std::string::npos, Err::InvalidConfig,
            origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    require(!key.empty(), Err::InvalidConfig,
            origin + ":" + std::to_string(lineno) + ": empty key");
    require(!value.empty(), Err::InvalidConfig,
            origin + ":" + std::to_string(lineno) + ": empty value for " + key);
    map.set(key, value);
  }
  return map;
}

ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::FileNotFound, "cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

void apply_override(ConfigMap& map, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  require(eq != std::string::npos, Err::InvalidConfig,
          "override must be key=value: '" + assignment + "'");
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  require(!key.empty(), Err::InvalidConfig, "override has empty key: '" + assignment + "'");
  require(!value.empty(), Err::InvalidConfig, "override has empty value: '" + assignment + "'");
  map.set(key, value);
}

PipelineConfig config_from_map(const ConfigMap& map) {
  PipelineConfig cfg;
  for (const auto& [key, v] : map.entries) {
    if (key == "seed")
      cfg.seed = to_u64(key, v);
    else if (key == "paths.data_dir")
      cfg.data_dir = v;
    else if (key == "paths.work_dir")
      cfg.work_dir = v;
    else if (key == "synth.slides")
      cfg.synth_slides = to_int(key, v);
    else if (key == "synth.side")
      cfg.synth.side = to_int(key, v);
    else if (key == "synth.genes")
      cfg.synth.genes = to_int(key, v);
    else if (key == "synth.alpha")
      cfg.synth.alpha = to_double_list(key, v);
    else if (key == "synth.eps")
      cfg.synth.eps = to_double(key, v);
    else if (key == "synth.blob_min")
      cfg.synth.blob_min = to_int(key, v);
    else if (key == "synth.blob_max")
      cfg.synth.blob_max = to_int(key, v);
    else if (key == "synth.cell_cap_frac")
      cfg.synth.cell_cap_frac = to_double(key, v);
    else if (key == "tile.p")
      cfg.tile.p = to_int(key, v);
    else if (key == "tile.q")
      cfg.tile.q = to_int(key, v);
    else if (key == "select.method")
      cfg.method = parse_select_method(v);
    else if (key == "select.mode")
      cfg.rule.mode = parse_mode(key, v);
    else if (key == "select.fixed_bits")
      cfg.rule.fixed_bits = to_double(key, v);
    else if (key == "select.sigma_mult")
      cfg.rule.sigma_mult = to_double(key, v);
    else if (key == "select.effort")
      cfg.effort = to_int(key, v);
    else if (key == "extractor.d")
      cfg.d = to_int(key, v);
    else if (key == "extractor.steps")
      cfg.extractor.steps = to_int(key, v);
    else if (key == "extractor.batch")
      cfg.extractor.batch = to_int(key, v);
    else if (key == "extractor.lr")
      cfg.extractor.lr = to_double(key, v);
    else if (key == "extractor.momentum")
      cfg.extractor.momentum = to_double(key, v);
    else if (key == "extractor.adversarial")
      cfg.extractor.adversarial = to_bool(key, v);
    else if (key == "extractor.disc_lr")
      cfg.extractor.disc_lr = to_double(key, v);
    else if (key == "stack.blocks")
      cfg.stack.blocks = to_int(key, v);
    else if (key == "stack.fusion_every")
      cfg.stack.fusion_every = to_int(key, v);
    else if (key == "stack.expand_ratio")
      cfg.stack.expand_ratio = to_int(key, v);
    else if (key == "vit.layers")
      cfg.vit.layers = to_int(key, v);
    else if (key == "vit.heads")
      cfg.vit.heads = to_int(key, v);
    else if (key == "vit.mlp_ratio")
      cfg.vit.mlp_ratio = to_int(key, v);
    else if (key == "vit.token_cap")
      cfg.vit.token_cap = to_int(key, v);
    else if (key == "vit.positional")
      cfg.vit.positional = to_bool(key, v);
    else if (key == "predictor.epochs")
      cfg.predictor.epochs = to_int(key, v);
    else if (key == "predictor.lr")
      cfg.predictor.lr = to_double(key, v);
    else if (key == "predictor.momentum")
      cfg.predictor.momentum = to_double(key, v);
    else if (key == "predictor.cosine_decay")
      cfg.predictor.cosine_decay = to_bool(key, v);
    else if (key == "predictor.val_slides")
      cfg.val_slides = to_int(key, v);
    else if (key == "eval.folds")
      cfg.eval_folds = to_int(key, v);
    else
      throw Error(Err::InvalidConfig, "unknown config key: " + key);
  }
  // the synthetic mask lives on the coarse grid, so the generator cell side
  // always tracks the tiling
  cfg.synth.p = cfg.tile.p;
  return cfg;
}

void validate_pipeline_config(const PipelineConfig& cfg) {
  require(cfg.synth_slides >= 1, Err::InvalidConfig, "synth.slides: need at least 1");
  require(cfg.tile.p >= 1 && cfg.tile.q >= 1, Err::InvalidConfig, "tile.p/tile.q: must be positive");
  require(cfg.tile.p % cfg.tile.q == 0, Err::InvalidConfig,
          "tile.q: must divide tile.p (" + std::to_string(cfg.tile.q) + " vs " +
              std::to_string(cfg.tile.p) + ")");
  require(cfg.tile.p % 8 == 0 && cfg.tile.q % 8 == 0, Err::InvalidConfig,
          "tile.p/tile.q: extractor halves the side three times, sides must be multiples of 8");
  // named check runs before the generator's own validation so errors point at
  // the config key
  require(cfg.synth.side % cfg.tile.p == 0, Err::InvalidConfig,
          "synth.side: must be divisible by tile.p");
  validate_synth_config(cfg.synth);
  if (cfg.rule.mode == ThresholdRule::Mode::Fixed)
    require(cfg.rule.fixed_bits >= 0.0, Err::InvalidConfig, "select.fixed_bits: must be >= 0");
  require(cfg.rule.sigma_mult >= 0.0, Err::InvalidConfig, "select.sigma_mult: must be >= 0");
  require(cfg.effort >= 0 && cfg.effort <= 9, Err::InvalidConfig,
          "select.effort: deflate level must be in [0, 9]");
  require(cfg.d >= 1, Err::InvalidConfig, "extractor.d: must be positive");
  require(cfg.extractor.steps >= 1, Err::InvalidConfig, "extractor.steps: must be positive");
  require(cfg.extractor.batch >= 1, Err::InvalidConfig, "extractor.batch: must be positive");
  require(cfg.extractor.lr > 0.0, Err::InvalidConfig, "extractor.lr: must be positive");
  require(cfg.extractor.momentum >= 0.0 && cfg.extractor.momentum < 1.0, Err::InvalidConfig,
          "extractor.momentum: must be in [0, 1)");
  require(cfg.extractor.disc_lr > 0.0, Err::InvalidConfig, "extractor.disc_lr: must be positive");
  require(cfg.stack.blocks >= 1, Err::InvalidConfig, "stack.blocks: must be positive");
  require(cfg.stack.fusion_every >= 1 && cfg.stack.fusion_every <= cfg.stack.blocks,
          Err::InvalidConfig, "stack.fusion_every: must be in [1, stack.blocks]");
  require(cfg.stack.expand_ratio >= 1, Err::InvalidConfig, "stack.expand_ratio: must be positive");
  require(cfg.vit.layers >= 1, Err::InvalidConfig, "vit.layers: must be positive");
  require(cfg.vit.heads >= 1, Err::InvalidConfig, "vit.heads: must be positive");
  require(cfg.d % cfg.vit.heads == 0, Err::InvalidConfig,
          "vit.heads: must divide extractor.d (" + std::to_string(cfg.vit.heads) + " vs " +
              std::to_string(cfg.d) + ")");
  require(cfg.vit.mlp_ratio >= 1, Err::InvalidConfig, "vit.mlp_ratio: must be positive");
  require(cfg.vit.token_cap >= 1, Err::InvalidConfig, "vit.token_cap: must be positive");
  require(cfg.predictor.epochs >= 0, Err::InvalidConfig, "predictor.epochs: must be >= 0");
  require(cfg.predictor.lr > 0.0, Err::InvalidConfig, "predictor.lr: must be positive");
  require(cfg.predictor.momentum >= 0.0 && cfg.predictor.momentum < 1.0, Err::InvalidConfig,
          "predictor.momentum: must be in [0, 1)");
  require(cfg.val_slides >= 2, Err::InvalidConfig,
          "predictor.val_slides: held-out correlation needs at least 2 slides");
  require(cfg.synth_slides - cfg.val_slides >= 1, Err::InvalidConfig,
          "predictor.val_slides: must leave at least 1 training slide");
  require(cfg.eval_folds >= 2, Err::InvalidConfig, "eval.folds: must be at least 2");
  require(cfg.synth_slides >= 2 * cfg.eval_folds, Err::InvalidConfig,
          "eval.folds: probe needs at least 2 slides per fold");
}

std::string canonical_config(const PipelineConfig& cfg) {
  std::string out;
  auto put = [&](const std::string& key, const std::string& value) {
    out += key;
    out += '=';
    out += value;
    out += '\n';
  };
  put("seed", std::to_string(cfg.seed));
  put("paths.data_dir", cfg.data_dir);
  put("paths.work_dir", cfg.work_dir);
  put("synth.slides", std::to_string(cfg.synth_slides));
  put("synth.side", std::to_string(cfg.synth.side));
  put("synth.genes", std::to_string(cfg.synth.genes));
  put("synth.alpha", fmt_list(cfg.synth.alpha));
  put("synth.eps", fmt_double(cfg.synth.eps));
  put("synth.blob_min", std::to_string(cfg.synth.blob_min));
  put("synth.blob_max", std::to_string(cfg.synth.blob_max));
  put("synth.cell_cap_frac", fmt_double(cfg.synth.cell_cap_frac));
  put("tile.p", std::to_string(cfg.tile.p));
  put("tile.q", std::to_string(cfg.tile.q));
  put("select.method", select_method_name(cfg.method));
  put("select.mode", mode_name(cfg.rule.mode));
  put("select.fixed_bits", fmt_double(cfg.rule.fixed_bits));
  put("select.sigma_mult", fmt_double(cfg.rule.sigma_mult));
  put("select.effort", std::to_string(cfg.effort));
  put("extractor.d", std::to_string(cfg.d));
  put("extractor.steps", std::to_string(cfg.extractor.steps));
  put("extractor.batch", std::to_string(cfg.extractor.batch));
  put("extractor.lr", fmt_double(cfg.extractor.lr));
  put("extractor.momentum", fmt_double(cfg.extractor.momentum));
  put("extractor.adversarial", cfg.extractor.adversarial ? "true" : "false");
  put("extractor.disc_lr", fmt_double(cfg.extractor.disc_lr));
  put("stack.blocks", std::to_string(cfg.stack.blocks));
  put("stack.fusion_every", std::to_string(cfg.stack.fusion_every));
  put("stack.expand_ratio", std::to_string(cfg.stack.expand_ratio));
  put("vit.layers", std::to_string(cfg.vit.layers));
  put("vit.heads", std::to_string(cfg.vit.heads));
  put("vit.mlp_ratio", std::to_string(cfg.vit.mlp_ratio));
  put("vit.token_cap", std::to_string(cfg.vit.token_cap));
  put("vit.positional", cfg.vit.positional ? "true" : "false");
  put("predictor.epochs", std::to_string(cfg.predictor.epochs));
  put("predictor.lr", fmt_double(cfg.predictor.lr));
  put("predictor.momentum", fmt_double(cfg.predictor.momentum));
  put("predictor.cosine_decay", cfg.predictor.cosine_decay ? "true" : "false");
  put("predictor.val_slides", std::to_string(cfg.val_slides));
  put("eval.folds", std::to_string(cfg.eval_folds));
  return out;
}

std::string config_hash(const PipelineConfig& cfg) {
  const std::string text = canonical_config(cfg);
  const uLong crc =
      crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size()));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

}  // namespace isg
