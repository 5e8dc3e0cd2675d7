#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "isg/slide_io.hpp"

namespace isg {

enum class SelectMethod { Shannon, Ig, Canny, Dog, Log, Otsu };

SelectMethod parse_select_method(const std::string& name);
const char* select_method_name(SelectMethod method);

// Information content surrogate: 8 x DEFLATE-compressed byte length of the
// raw RGB buffer at the given effort level (0-9).
double shannon_bits(const uint8_t* data, std::size_t len, int effort = 6);
double shannon_bits(const GlobalPatch& patch, int effort = 6);

// Classical texture/edge scores on the grayscale patch. Kernel parameters
// follow the conventional defaults documented at the definition site.
double baseline_score(const GlobalPatch& patch, SelectMethod method);

// Between-class-variance maximizer over candidate levels 0..255, classes
// {v < t} and {v >= t}; a candidate with an empty class scores 0; ties go to
// the smallest level; a single-level histogram returns that level.
int otsu_threshold(const std::array<uint64_t, 256>& histogram);

struct ThresholdRule {
  enum class Mode { Fixed, Adaptive };
  Mode mode = Mode::Adaptive;
  double fixed_bits = 0.0;
  double sigma_mult = 1.0;
};

struct ScoredPatch {
  int patch_id;
  double score;
};

struct SelectionRecord {
  int patch_id;
  SelectMethod method;
  double score;
  bool kept;
};

// Fixed mode keeps score > fixed_bits; adaptive keeps score > mu + mult*sigma
// with population statistics accumulated in ascending patch_id order.
std::vector<SelectionRecord> select_patches(const std::vector<ScoredPatch>& records,
                                            SelectMethod method, const ThresholdRule& rule);

struct ManifestRow {
  int patch_id;
  int grid_row;
  int grid_col;
  SelectMethod method;
  double score;
  bool kept;
};

void write_selection_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_selection_manifest(const std::string& path);

}  // namespace isg
