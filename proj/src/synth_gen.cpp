#include "isg/synth_gen.hpp"

#include <algorithm>
#include <cmath>

#include "isg/rng.hpp"

namespace isg {

namespace {

// Slide texture constants. The three textured families share a common
// stochastic overlay so their compressed sizes land in one tight band,
// which keeps the adaptive mu+sigma cut between background and texture.
constexpr int kNoiseAmp = 40;        // noise family, gray overlay half-range
constexpr int kCheckerContrast = 30;
constexpr int kCheckerOverlay = 18;
constexpr int kGradientSpan = 40;
constexpr int kGradientOverlay = 18;
constexpr int kCheckerCell = 8;
constexpr int kBrightJitter = 20;

uint8_t clamp_byte(int v) { return static_cast<uint8_t>(std::clamp(v, 0, 255)); }

void set_gray(std::vector<uint8_t>& buf, std::size_t px, int v) {
  const uint8_t b = clamp_byte(v);
  buf[px * 3] = b;
  buf[px * 3 + 1] = b;
  buf[px * 3 + 2] = b;
}

// Textured-cell painters. (x0, y0) is the cell origin inside the slide;
// all draw gray values so the overlay is one rng draw per pixel.
void paint_noise_cell(RasterImage& img, int x0, int y0, int side, int base, Rng& rng) {
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const std::size_t px = static_cast<std::size_t>(y0 + y) * img.width + (x0 + x);
      set_gray(img.data, px, base + static_cast<int>(rng.uniform_int(-kNoiseAmp, kNoiseAmp)));
    }
}

void paint_checker_cell(RasterImage& img, int x0, int y0, int side, int base, Rng& rng) {
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const int tile = ((x / kCheckerCell) + (y / kCheckerCell)) & 1;
      const int level = base + (tile ? kCheckerContrast : -kCheckerContrast);
      const std::size_t px = static_cast<std::size_t>(y0 + y) * img.width + (x0 + x);
      set_gray(img.data, px,
               level + static_cast<int>(rng.uniform_int(-kCheckerOverlay, kCheckerOverlay)));
    }
}

void paint_gradient_cell(RasterImage& img, int x0, int y0, int side, int base, Rng& rng) {
  const double theta = rng.uniform() * 6.283185307179586;
  const double cx = std::cos(theta), sy = std::sin(theta);
  const double span = static_cast<double>(side - 1);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      // projection onto the gradient axis, normalized to [0, 1]
      const double t = ((x * cx + y * sy) / span + 1.0) * 0.5;
      const int level = base - kGradientSpan + static_cast<int>(2.0 * kGradientSpan * t);
      const std::size_t px = static_cast<std::size_t>(y0 + y) * img.width + (x0 + x);
      set_gray(img.data, px,
               level + static_cast<int>(rng.uniform_int(-kGradientOverlay, kGradientOverlay)));
    }
}

}  // namespace

PatchKind parse_patch_kind(const std::string& name) {
  if (name == "constant") return PatchKind::Constant;
  if (name == "gradient") return PatchKind::Gradient;
  if (name == "noise") return PatchKind::Noise;
  if (name == "checker") return PatchKind::Checker;
  fail(Err::UnknownKind, "unknown patch kind: " + name);
}

const char* patch_kind_name(PatchKind kind) {
  switch (kind) {
    case PatchKind::Constant: return "constant";
    case PatchKind::Gradient: return "gradient";
    case PatchKind::Noise: return "noise";
    case PatchKind::Checker: return "checker";
  }
  return "unknown";
}

std::vector<uint8_t> generate_patch(PatchKind kind, int side, uint64_t seed) {
  require(side >= 1, Err::InvalidConfig, "patch side must be >= 1");
  std::vector<uint8_t> buf(static_cast<std::size_t>(side) * side * 3);
  Rng rng(seed);
  switch (kind) {
    case PatchKind::Constant: {
      const uint8_t r = static_cast<uint8_t>(rng.uniform_int(0, 255));
      const uint8_t g = static_cast<uint8_t>(rng.uniform_int(0, 255));
      const uint8_t b = static_cast<uint8_t>(rng.uniform_int(0, 255));
      for (std::size_t i = 0; i < buf.size(); i += 3) {
        buf[i] = r;
        buf[i + 1] = g;
        buf[i + 2] = b;
      }
      break;
    }
    case PatchKind::Gradient: {
      // gray ramp with a guaranteed span so it never degenerates to constant
      const int lo = static_cast<int>(rng.uniform_int(0, 127));
      const int hi = lo + 64 + static_cast<int>(rng.uniform_int(0, 255 - lo - 64));
      const double theta = rng.uniform() * 6.283185307179586;
      const double cx = std::cos(theta), sy = std::sin(theta);
      const double span = side > 1 ? static_cast<double>(side - 1) : 1.0;
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          const double t = ((x * cx + y * sy) / span + 1.0) * 0.5;
          set_gray(buf, static_cast<std::size_t>(y) * side + x,
                   lo + static_cast<int>((hi - lo) * t));
        }
      break;
    }
    case PatchKind::Noise: {
      for (auto& b : buf) b = static_cast<uint8_t>(rng.uniform_int(0, 255));
      break;
    }
    case PatchKind::Checker: {
      const int dark = static_cast<int>(rng.uniform_int(0, 95));
      const int light = static_cast<int>(rng.uniform_int(160, 255));
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          const int tile = ((x / kCheckerCell) + (y / kCheckerCell)) & 1;
          set_gray(buf, static_cast<std::size_t>(y) * side + x, tile ? light : dark);
        }
      break;
    }
  }
  return buf;
}

void validate_synth_config(const SynthConfig& cfg) {
  require(cfg.p >= 1, Err::InvalidConfig, "coarse side must be >= 1");
  require(cfg.side >= cfg.p && cfg.side % cfg.p == 0, Err::InvalidConfig,
          "slide side must be a positive multiple of the coarse side");
  require(cfg.genes >= 1, Err::InvalidConfig, "gene count must be >= 1");
  require(cfg.alpha.size() == static_cast<std::size_t>(cfg.genes), Err::InvalidConfig,
          "alpha length must equal gene count");
  require(cfg.eps >= 0.0, Err::InvalidConfig, "noise scale must be >= 0");
  require(cfg.blob_min >= 0 && cfg.blob_max >= cfg.blob_min, Err::InvalidConfig,
          "blob count range is invalid");
  require(cfg.cell_cap_frac > 0.0 && cfg.cell_cap_frac <= 1.0, Err::InvalidConfig,
          "cell cap fraction must be in (0, 1]");
}

SynthSlide generate_slide(uint64_t seed, const SynthConfig& cfg) {
  validate_synth_config(cfg);
  Rng rng(seed);

  SynthSlide out;
  out.grid = cfg.side / cfg.p;
  const int grid = out.grid;
  const int total_cells = grid * grid;

  out.image.width = cfg.side;
  out.image.height = cfg.side;
  out.image.data.resize(out.image.expected_bytes());
  const int background = static_cast<int>(rng.uniform_int(150, 230));
  for (std::size_t px = 0; px < static_cast<std::size_t>(cfg.side) * cfg.side; ++px)
    set_gray(out.image.data, px, background);

  // Blob placement on the coarse grid. Each blob is a rectangle of whole
  // cells with one texture family; overlaps resolve to the later blob. A
  // blob is skipped if it would push the textured fraction past the cap.
  out.mask.assign(static_cast<std::size_t>(total_cells), 0);
  std::vector<int8_t> family(static_cast<std::size_t>(total_cells), -1);
  const int cap_cells = static_cast<int>(cfg.cell_cap_frac * total_cells);
  const int max_dim = std::max(1, grid / 3);
  const int blob_count = static_cast<int>(rng.uniform_int(cfg.blob_min, cfg.blob_max));
  int textured = 0;
  for (int i = 0; i < blob_count; ++i) {
    const int bw = static_cast<int>(rng.uniform_int(1, max_dim));
    const int bh = static_cast<int>(rng.uniform_int(1, max_dim));
    const int r0 = static_cast<int>(rng.uniform_int(0, grid - bh));
    const int c0 = static_cast<int>(rng.uniform_int(0, grid - bw));
    const int8_t fam = static_cast<int8_t>(rng.uniform_int(0, 2));
    int fresh = 0;
    for (int r = r0; r < r0 + bh; ++r)
      for (int c = c0; c < c0 + bw; ++c)
        if (!out.mask[static_cast<std::size_t>(r) * grid + c]) ++fresh;
    if (textured + fresh > cap_cells) continue;
    textured += fresh;
    for (int r = r0; r < r0 + bh; ++r)
      for (int c = c0; c < c0 + bw; ++c) {
        out.mask[static_cast<std::size_t>(r) * grid + c] = 1;
        family[static_cast<std::size_t>(r) * grid + c] = fam;
      }
  }
  out.textured_frac = static_cast<double>(textured) / total_cells;

  // Render textured cells in row-major order so the draw sequence is a
  // function of the final mask alone. Cell brightness carries the fraction
  // signal; the jitter forces aggregation over many cells to recover it.
  const int bright = 65 + static_cast<int>(170.0 * out.textured_frac);
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      const std::size_t cell = static_cast<std::size_t>(r) * grid + c;
      if (!out.mask[cell]) continue;
      const int base = bright + static_cast<int>(rng.uniform_int(-kBrightJitter, kBrightJitter));
      const int x0 = c * cfg.p, y0 = r * cfg.p;
      switch (family[cell]) {
        case 0: paint_noise_cell(out.image, x0, y0, cfg.p, base, rng); break;
        case 1: paint_checker_cell(out.image, x0, y0, cfg.p, base, rng); break;
        default: paint_gradient_cell(out.image, x0, y0, cfg.p, base, rng); break;
      }
    }

  out.raw.resize(cfg.genes);
  out.label.resize(cfg.genes);
  for (int g = 0; g < cfg.genes; ++g) {
    const double raw = cfg.alpha[static_cast<std::size_t>(g)] * out.textured_frac * 1000.0 +
                       rng.normal(0.0, cfg.eps);
    out.raw[static_cast<std::size_t>(g)] = std::max(raw, 0.0);
    out.label[static_cast<std::size_t>(g)] = std::log1p(out.raw[static_cast<std::size_t>(g)]);
  }
  return out;
}

}  // namespace isg
