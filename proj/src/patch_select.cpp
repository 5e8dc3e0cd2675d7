#include "isg/patch_select.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>

namespace isg {

namespace {

// conventional kernel defaults; the paper states none
constexpr double kCannySigma = 1.4;
constexpr double kCannyLow = 0.1;   // of max gradient magnitude
constexpr double kCannyHigh = 0.3;
constexpr double kDogSigma = 1.0;
constexpr double kDogK = 1.6;
constexpr double kLogSigma = 2.0;

std::vector<double> to_gray(const GlobalPatch& patch) {
  const int n = patch.side * patch.side;
  std::vector<double> gray(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const uint8_t* px = &patch.pixels[static_cast<std::size_t>(i) * 3];
    gray[static_cast<std::size_t>(i)] = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
  }
  return gray;
}

int clamp_idx(int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); }

// separable gaussian with replicated borders, radius 3*sigma
std::vector<double> gaussian_blur(const std::vector<double>& src, int side, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= sum;

  std::vector<double> tmp(src.size()), out(src.size());
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] *
               src[static_cast<std::size_t>(y) * side + clamp_idx(x + i, side - 1)];
      tmp[static_cast<std::size_t>(y) * side + x] = acc;
    }
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] *
               tmp[static_cast<std::size_t>(clamp_idx(y + i, side - 1)) * side + x];
      out[static_cast<std::size_t>(y) * side + x] = acc;
    }
  return out;
}

double mean_central_gradient(const std::vector<double>& gray, int side) {
  double acc = 0.0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double gx = (gray[static_cast<std::size_t>(y) * side + clamp_idx(x + 1, side - 1)] -
                         gray[static_cast<std::size_t>(y) * side + clamp_idx(x - 1, side - 1)]) /
                        2.0;
      const double gy =
          (gray[static_cast<std::size_t>(clamp_idx(y + 1, side - 1)) * side + x] -
           gray[static_cast<std::size_t>(clamp_idx(y - 1, side - 1)) * side + x]) /
          2.0;
      acc += std::sqrt(gx * gx + gy * gy);
    }
  return acc / (static_cast<double>(side) * side);
}

double canny_edge_fraction(const std::vector<double>& gray, int side) {
  const auto smooth = gaussian_blur(gray, side, kCannySigma);

  std::vector<double> mag(gray.size()), dir_gx(gray.size()), dir_gy(gray.size());
  double max_mag = 0.0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      auto at = [&](int yy, int xx) {
        return smooth[static_cast<std::size_t>(clamp_idx(yy, side - 1)) * side +
                      clamp_idx(xx, side - 1)];
      };
      // Sobel
      const double gx = at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1) -
                        at(y - 1, x - 1) - 2 * at(y, x - 1) - at(y + 1, x - 1);
      const double gy = at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1) -
                        at(y - 1, x - 1) - 2 * at(y - 1, x) - at(y - 1, x + 1);
      const std::size_t i = static_cast<std::size_t>(y) * side + x;
      mag[i] = std::sqrt(gx * gx + gy * gy);
      dir_gx[i] = gx;
      dir_gy[i] = gy;
      max_mag = std::max(max_mag, mag[i]);
    }
  if (max_mag == 0.0) return 0.0;

  // non-maximum suppression along the quantized gradient direction
  std::vector<uint8_t> state(gray.size(), 0);  // 0 none, 1 weak, 2 strong
  const double high = kCannyHigh * max_mag, low = kCannyLow * max_mag;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * side + x;
      if (mag[i] < low) continue;
      const double angle = std::atan2(dir_gy[i], dir_gx[i]);
      // quantize to 0, 45, 90, 135 degrees
      const int sector = static_cast<int>(std::lround(angle / (M_PI / 4.0))) & 3;
      static const int dy[4] = {0, 1, 1, 1};
      static const int dx[4] = {1, 1, 0, -1};
      const double n1 = mag[static_cast<std::size_t>(clamp_idx(y + dy[sector], side - 1)) * side +
                            clamp_idx(x + dx[sector], side - 1)];
      const double n2 = mag[static_cast<std::size_t>(clamp_idx(y - dy[sector], side - 1)) * side +
                            clamp_idx(x - dx[sector], side - 1)];
      if (mag[i] < n1 || mag[i] < n2) continue;
      state[i] = mag[i] >= high ? 2 : 1;
    }

  // hysteresis: weak pixels survive only when connected to a strong one
  std::vector<uint8_t> edge(gray.size(), 0);
  std::deque<std::size_t> frontier;
  for (std::size_t i = 0; i < state.size(); ++i)
    if (state[i] == 2) {
      edge[i] = 1;
      frontier.push_back(i);
    }
  while (!frontier.empty()) {
    const std::size_t i = frontier.front();
    frontier.pop_front();
    const int y = static_cast<int>(i) / side, x = static_cast<int>(i) % side;
    for (int oy = -1; oy <= 1; ++oy)
      for (int ox = -1; ox <= 1; ++ox) {
        const int ny = y + oy, nx = x + ox;
        if (ny < 0 || ny >= side || nx < 0 || nx >= side) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * side + nx;
        if (state[j] == 1 && !edge[j]) {
          edge[j] = 1;
          frontier.push_back(j);
        }
      }
  }
  const double edges = static_cast<double>(std::accumulate(edge.begin(), edge.end(), 0L));
  return edges / (static_cast<double>(side) * side);
}

double mean_abs_dog(const std::vector<double>& gray, int side) {
  const auto narrow = gaussian_blur(gray, side, kDogSigma);
  const auto wide = gaussian_blur(gray, side, kDogSigma * kDogK);
  double acc = 0.0;
  for (std::size_t i = 0; i < gray.size(); ++i) acc += std::abs(narrow[i] - wide[i]);
  return acc / static_cast<double>(gray.size());
}

double mean_abs_log(const std::vector<double>& gray, int side) {
  const auto smooth = gaussian_blur(gray, side, kLogSigma);
  double acc = 0.0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      auto at = [&](int yy, int xx) {
        return smooth[static_cast<std::size_t>(clamp_idx(yy, side - 1)) * side +
                      clamp_idx(xx, side - 1)];
      };
      const double lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4 * at(y, x);
      acc += std::abs(lap);
    }
  return acc / (static_cast<double>(side) * side);
}

double otsu_dark_fraction(const std::vector<double>& gray) {
  std::array<uint64_t, 256> hist{};
  for (double v : gray) {
    const int level = std::clamp(static_cast<int>(std::lround(v)), 0, 255);
    ++hist[static_cast<std::size_t>(level)];
  }
  const int t = otsu_threshold(hist);
  uint64_t below = 0;
  for (int v = 0; v < t; ++v) below += hist[static_cast<std::size_t>(v)];
  return static_cast<double>(below) / static_cast<double>(gray.size());
}

}  // namespace

SelectMethod parse_select_method(const std::string& name) {
  if (name == "shannon") return SelectMethod::Shannon;
  if (name == "ig") return SelectMethod::Ig;
  if (name == "canny") return SelectMethod::Canny;
  if (name == "dog") return SelectMethod::Dog;
  if (name == "log") return SelectMethod::Log;
  if (name == "otsu") return SelectMethod::Otsu;
  fail(Err::UnknownMethod, "unknown selection method: " + name);
}

const char* select_method_name(SelectMethod method) {
  switch (method) {
    case SelectMethod::Shannon: return "shannon";
    case SelectMethod::Ig: return "ig";
    case SelectMethod::Canny: return "canny";
    case SelectMethod::Dog: return "dog";
    case SelectMethod::Log: return "log";
    case SelectMethod::Otsu: return "otsu";
  }
  return "unknown";
}

double shannon_bits(const uint8_t* data, std::size_t len, int effort) {
  require(len > 0, Err::EmptyPatch, "cannot score an empty buffer");
  require(effort >= 0 && effort <= 9, Err::InvalidConfig,
          "compressor effort must be in 0..9, got " + std::to_string(effort));
  uLongf bound = compressBound(len);
  std::vector<uint8_t> packed(bound);
  const int rc = compress2(packed.data(), &bound, data, len, effort);
  require(rc == Z_OK, Err::CorruptData, "deflate failed (zlib " + std::to_string(rc) + ")");
  return 8.0 * static_cast<double>(bound);
}

double shannon_bits(const GlobalPatch& patch, int effort) {
  return shannon_bits(patch.pixels.data(), patch.pixels.size(), effort);
}

double baseline_score(const GlobalPatch& patch, SelectMethod method) {
  require(!patch.pixels.empty(), Err::EmptyPatch, "cannot score an empty patch");
  const auto gray = to_gray(patch);
  switch (method) {
    case SelectMethod::Ig: return mean_central_gradient(gray, patch.side);
    case SelectMethod::Canny: return canny_edge_fraction(gray, patch.side);
    case SelectMethod::Dog: return mean_abs_dog(gray, patch.side);
    case SelectMethod::Log: return mean_abs_log(gray, patch.side);
    case SelectMethod::Otsu: return otsu_dark_fraction(gray);
    case SelectMethod::Shannon: break;
  }
  fail(Err::UnknownMethod, "baseline_score expects one of ig/canny/dog/log/otsu");
}

int otsu_threshold(const std::array<uint64_t, 256>& histogram) {
  uint64_t total = 0;
  double grand_sum = 0.0;
  int lowest = -1;
  for (int v = 0; v < 256; ++v) {
    total += histogram[static_cast<std::size_t>(v)];
    grand_sum += static_cast<double>(v) * histogram[static_cast<std::size_t>(v)];
    if (lowest < 0 && histogram[static_cast<std::size_t>(v)] > 0) lowest = v;
  }
  require(total > 0, Err::EmptyHistogram, "histogram has no mass");

  double best_var = 0.0;
  int best_t = -1;
  uint64_t count_below = 0;
  double sum_below = 0.0;
  for (int t = 0; t < 256; ++t) {
    // classes {v < t} and {v >= t}
    if (t > 0) {
      count_below += histogram[static_cast<std::size_t>(t - 1)];
      sum_below += static_cast<double>(t - 1) * histogram[static_cast<std::size_t>(t - 1)];
    }
    const uint64_t count_above = total - count_below;
    if (count_below == 0 || count_above == 0) continue;
    const double w0 = static_cast<double>(count_below) / total;
    const double w1 = static_cast<double>(count_above) / total;
    const double mu0 = sum_below / count_below;
    const double mu1 = (grand_sum - sum_below) / count_above;
    const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }
  // all mass at one level: no split separates anything; report that level
  return best_t < 0 ? lowest : best_t;
}

std::vector<SelectionRecord> select_patches(const std::vector<ScoredPatch>& records,
                                            SelectMethod method, const ThresholdRule& rule) {
  require(!records.empty(), Err::NoRecords, "no patches to select from");
  require(rule.fixed_bits >= 0.0, Err::InvalidConfig, "fixed threshold must be >= 0");

  double cut = rule.fixed_bits;
  if (rule.mode == ThresholdRule::Mode::Adaptive) {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return records[a].patch_id < records[b].patch_id;
    });
    double mean = 0.0;
    for (std::size_t i : order) mean += records[i].score;
    mean /= static_cast<double>(records.size());
    double var = 0.0;
    for (std::size_t i : order) {
      const double d = records[i].score - mean;
      var += d * d;
    }
    var /= static_cast<double>(records.size());
    cut = mean + rule.sigma_mult * std::sqrt(var);
  }

  std::vector<SelectionRecord> out;
  out.reserve(records.size());
  for (const auto& r : records)
    out.push_back({r.patch_id, method, r.score, r.score > cut});
  return out;
}

void write_selection_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Err::FileNotFound, "cannot create " + path);
  out << "# patch_id\tgrid_row\tgrid_col\tmethod\tscore\tkept\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", r.score);
    out << r.patch_id << '\t' << r.grid_row << '\t' << r.grid_col << '\t'
        << select_method_name(r.method) << '\t' << buf << '\t' << (r.kept ? 1 : 0) << '\n';
  }
  out.flush();
  require(out.good(), Err::CorruptData, "short write to " + path);
}

std::vector<ManifestRow> read_selection_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::FileNotFound, "cannot open " + path);
  std::vector<ManifestRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    ManifestRow r;
    std::string method;
    int kept = -1;
    if (!(fields >> r.patch_id >> r.grid_row >> r.grid_col >> method >> r.score >> kept) ||
        (kept != 0 && kept != 1))
      fail(Err::CorruptData, path + ": bad manifest line " + std::to_string(lineno));
    r.method = parse_select_method(method);
    r.kept = kept == 1;
    rows.push_back(r);
  }
  return rows;
}

}  // namespace isg
