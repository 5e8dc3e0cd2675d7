#pragma once

#include <string>
#include <utility>
#include <vector>

#include "isg/dual_attn.hpp"
#include "isg/feat_extract.hpp"
#include "isg/patch_select.hpp"
#include "isg/slide_io.hpp"
#include "isg/synth_gen.hpp"

namespace isg {

// Flat key=value settings file. '#' starts a comment, blank lines are
// skipped, later assignments win. Order of first assignment is preserved
// so overrides can be replayed deterministically.
struct ConfigMap {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(const std::string& key, const std::string& value);
  const std::string* find(const std::string& key) const;
};

ConfigMap parse_config_text(const std::string& text, const std::string& origin);
ConfigMap load_config_file(const std::string& path);

// key=value override, same syntax as a file line
void apply_override(ConfigMap& map, const std::string& assignment);

// Everything a pipeline run needs. Stage seeds are derived from the root
// seed, never set directly, so stages stay reproducible in isolation.
struct PipelineConfig {
  uint64_t seed = 1;

  std::string data_dir = "data";
  std::string work_dir = "work";

  int synth_slides = 25;
  SynthConfig synth;

  TileSpec tile{64, 16};

  SelectMethod method = SelectMethod::Shannon;
  ThresholdRule rule;
  int effort = 6;

  int d = 32;
  ExtractorTrainConfig extractor;

  StackConfig stack;
  VitConfig vit;

  PredictorTrainConfig predictor;
  int val_slides = 5;

  int eval_folds = 5;
};

// Rejects unknown keys and malformed values; the message names the key.
PipelineConfig config_from_map(const ConfigMap& map);

// Cross-field checks (divisibility, head count, fold sizes) applied before
// any stage runs.
void validate_pipeline_config(const PipelineConfig& cfg);

// Effective settings, one key=value per line in a fixed order. This is the
// text echoed into run manifests and the input of config_hash.
std::string canonical_config(const PipelineConfig& cfg);

// crc32 of canonical_config, lowercase hex
std::string config_hash(const PipelineConfig& cfg);

}  // namespace isg
