#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "isg/slide_io.hpp"

namespace isg {

enum class PatchKind { Constant, Gradient, Noise, Checker };

PatchKind parse_patch_kind(const std::string& name);
const char* patch_kind_name(PatchKind kind);

// Deterministic procedural texture patch, side x side x 3.
std::vector<uint8_t> generate_patch(PatchKind kind, int side, uint64_t seed);

struct SynthConfig {
  int side = 1024;            // slide side in pixels, divisible by p
  int p = 64;                 // coarse cell side
  int genes = 4;
  std::vector<double> alpha = {1.0, 0.5, 2.0, 0.25};
  double eps = 6.0;           // gaussian noise on raw expression
  int blob_min = 2;           // blobs per slide, inclusive range
  int blob_max = 12;
  double cell_cap_frac = 0.33;  // textured cells capped at this fraction
};

void validate_synth_config(const SynthConfig& cfg);

struct SynthSlide {
  RasterImage image;
  std::vector<uint8_t> mask;  // grid x grid coarse cells, 1 = textured
  int grid = 0;
  double textured_frac = 0.0;
  std::vector<double> raw;    // clipped raw expression per gene
  std::vector<double> label;  // ln(1 + raw)
};

// Texture blobs are snapped to whole coarse cells, so the ground-truth mask
// is exact at patch granularity and the pixel fraction equals the cell
// fraction. Cell brightness encodes the textured fraction (plus per-cell
// jitter), which is the signal the expression rule is built on.
SynthSlide generate_slide(uint64_t seed, const SynthConfig& cfg);

}  // namespace isg
