#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "isg/config.hpp"

namespace isg {

inline constexpr const char* kPipelineVersion = "0.1.0";

// labels.tsv: header "slide_id" + gene names, one row per slide, values are
// the log-normalized expressions. Row order fixes the slide order for every
// downstream stage.
struct LabelTable {
  std::vector<std::string> gene_names;
  std::vector<std::pair<std::string, std::vector<double>>> rows;

  const std::vector<double>* find(const std::string& slide_id) const;
};

LabelTable read_labels(const std::string& path);

// Provenance record written next to every stage's artifacts. Reruns with the
// same inputs and seed must reproduce it byte for byte, so it carries no
// timestamps, only the effective config and artifact checksums.
struct RunManifest {
  std::string stage;
  std::string version = kPipelineVersion;
  uint64_t seed = 0;
  std::string hash;
  std::vector<std::pair<std::string, std::string>> extra;      // stage facts, e.g. genes
  std::vector<std::pair<std::string, std::string>> artifacts;  // file name -> crc32 hex
};

std::string crc32_hex(const std::string& bytes);

void write_run_manifest(const std::string& dir, RunManifest manifest, const PipelineConfig& cfg);
RunManifest read_run_manifest(const std::string& dir);

// Confirms the stage ran and its artifacts still match the recorded
// checksums. MissingArtifact when the manifest or a file is absent,
// ChecksumMismatch when contents drifted.
void verify_stage_dir(const std::string& dir, const std::string& expect_stage);

// Stage entry points. Each validates its upstream dependencies, writes its
// artifacts under the configured directories, and finishes with a manifest.
void run_synth(const PipelineConfig& cfg, std::ostream& out);
void run_tile(const PipelineConfig& cfg, std::ostream& out);
void run_select(const PipelineConfig& cfg, std::ostream& out);
void run_train_extractor(const PipelineConfig& cfg, std::ostream& out);
void run_extract(const PipelineConfig& cfg, std::ostream& out);
void run_train_predictor(const PipelineConfig& cfg, std::ostream& out);

// Tiles, selects, and encodes one raster, then runs the trained predictor.
// Prints slide_id, gene, prediction, ground_truth ('-' when unlabeled).
void run_predict(const PipelineConfig& cfg, const std::string& slide_path, std::ostream& out);

// Held-out per-gene report for the trained predictor plus a linear-probe
// report over the global features.
void run_evaluate(const PipelineConfig& cfg, std::ostream& out);

// Finite-difference sweep over every differentiable op. Returns the number
// of ops whose worst relative error exceeds its tolerance.
int run_gradcheck(std::ostream& out);

}  // namespace isg
