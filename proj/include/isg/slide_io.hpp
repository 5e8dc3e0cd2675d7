#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "isg/errors.hpp"

namespace isg {

// 8-bit RGB raster, rows top to bottom, samples interleaved R,G,B.
struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;

  std::size_t expected_bytes() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3;
  }
};

struct TileSpec {
  int p;  // coarse patch side
  int q;  // fine patch side; must divide p
};

struct GlobalPatch {
  int id = 0;
  int grid_row = 0;
  int grid_col = 0;
  int side = 0;
  std::vector<uint8_t> pixels;  // side x side x 3
};

struct LocalPatchGrid {
  int parent_id = 0;
  int grid = 0;  // patches per axis (p/q)
  int side = 0;  // fine patch side q
  std::vector<std::vector<uint8_t>> patches;  // grid x grid, row-major
};

// Dispatches on the file's leading bytes: PNG (8-bit RGB, no alpha, no
// interlace) or the ISGR raw container.
RasterImage load_raster(const std::string& path);

RasterImage decode_png(const std::vector<uint8_t>& bytes, const std::string& origin);
std::string encode_png(const RasterImage& img);

RasterImage decode_isgr(const std::vector<uint8_t>& bytes, const std::string& origin);
std::string encode_isgr(const RasterImage& img);
void save_isgr(const std::string& path, const RasterImage& img);

std::vector<GlobalPatch> tile_coarse(const RasterImage& img, const TileSpec& spec);
LocalPatchGrid tile_fine(const GlobalPatch& patch, const TileSpec& spec);

}  // namespace isg
