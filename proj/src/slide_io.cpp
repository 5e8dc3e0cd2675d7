#include "isg/slide_io.hpp"

#include <zlib.h>

#include <cstring>

#include "isg/binio.hpp"

namespace isg {

namespace {

constexpr uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
constexpr uint32_t kIsgrVersion = 1;

uint32_t be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void put_u32be(std::string& out, uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

// Reverses one scanline's filter in place. prev is the reconstructed line
// above (all zeros for the first line). bpp = 3 for RGB8.
void unfilter_line(uint8_t filter, uint8_t* line, const uint8_t* prev, std::size_t len,
                   const std::string& origin) {
  constexpr int bpp = 3;
  switch (filter) {
    case 0:
      break;
    case 1:
      for (std::size_t i = bpp; i < len; ++i) line[i] = static_cast<uint8_t>(line[i] + line[i - bpp]);
      break;
    case 2:
      for (std::size_t i = 0; i < len; ++i) line[i] = static_cast<uint8_t>(line[i] + prev[i]);
      break;
    case 3:
      for (std::size_t i = 0; i < len; ++i) {
        const int left = i >= bpp ? line[i - bpp] : 0;
        line[i] = static_cast<uint8_t>(line[i] + ((left + prev[i]) >> 1));
      }
      break;
    case 4:
      for (std::size_t i = 0; i < len; ++i) {
        const int left = i >= bpp ? line[i - bpp] : 0;
        const int ul = i >= bpp ? prev[i - bpp] : 0;
        line[i] = static_cast<uint8_t>(line[i] + paeth(left, prev[i], ul));
      }
      break;
    default:
      fail(Err::CorruptImage, origin + ": unknown scanline filter " + std::to_string(filter));
  }
}

}  // namespace

RasterImage decode_png(const std::vector<uint8_t>& bytes, const std::string& origin) {
  require(bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0, Err::UnsupportedFormat,
          origin + ": not a PNG file");

  std::size_t pos = 8;
  bool saw_ihdr = false, saw_iend = false;
  uint32_t width = 0, height = 0;
  std::vector<uint8_t> idat;

  while (!saw_iend) {
    require(bytes.size() - pos >= 12, Err::CorruptImage, origin + ": truncated chunk stream");
    const uint32_t len = be32(&bytes[pos]);
    require(bytes.size() - pos - 12 >= len, Err::CorruptImage, origin + ": chunk overruns file");
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const uint8_t* data = &bytes[pos + 8];
    const uint32_t stored_crc = be32(&bytes[pos + 8 + len]);
    uLong crc = crc32(0L, &bytes[pos + 4], 4);
    if (len) crc = crc32(crc, data, len);
    require(static_cast<uint32_t>(crc) == stored_crc, Err::CorruptImage,
            origin + ": chunk CRC mismatch");

    if (std::memcmp(type, "IHDR", 4) == 0) {
      require(!saw_ihdr, Err::CorruptImage, origin + ": duplicate IHDR");
      require(len == 13, Err::CorruptImage, origin + ": bad IHDR length");
      width = be32(data);
      height = be32(data + 4);
      require(width >= 1 && height >= 1, Err::CorruptImage, origin + ": zero dimension");
      const uint8_t bit_depth = data[8], color_type = data[9];
      const uint8_t compression = data[10], filter = data[11], interlace = data[12];
      require(bit_depth == 8 && color_type == 2, Err::UnsupportedFormat,
              origin + ": only 8-bit RGB (color type 2) is supported");
      require(compression == 0 && filter == 0, Err::CorruptImage, origin + ": bad IHDR methods");
      require(interlace == 0, Err::UnsupportedFormat, origin + ": interlaced PNG not supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      require(saw_ihdr, Err::CorruptImage, origin + ": IDAT before IHDR");
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    // ancillary chunks are skipped
    pos += 12 + len;
  }
  require(saw_ihdr, Err::CorruptImage, origin + ": missing IHDR");
  require(!idat.empty(), Err::CorruptImage, origin + ": missing IDAT");

  const std::size_t stride = static_cast<std::size_t>(width) * 3;
  const std::size_t raw_len = (stride + 1) * height;
  std::vector<uint8_t> raw(raw_len);
  uLongf out_len = raw_len;
  const int rc = uncompress(raw.data(), &out_len, idat.data(), idat.size());
  require(rc == Z_OK && out_len == raw_len, Err::CorruptImage,
          origin + ": IDAT inflate failed (zlib " + std::to_string(rc) + ")");

  RasterImage img;
  img.width = static_cast<int>(width);
  img.height = static_cast<int>(height);
  img.data.resize(img.expected_bytes());
  std::vector<uint8_t> zero_line(stride, 0);
  const uint8_t* prev = zero_line.data();
  for (uint32_t y = 0; y < height; ++y) {
    const uint8_t filter = raw[y * (stride + 1)];
    uint8_t* line = &raw[y * (stride + 1) + 1];
    unfilter_line(filter, line, prev, stride, origin);
    std::memcpy(&img.data[y * stride], line, stride);
    prev = line;
  }
  return img;
}

std::string encode_png(const RasterImage& img) {
  require(img.width >= 1 && img.height >= 1, Err::CorruptImage, "empty image");
  require(img.data.size() == img.expected_bytes(), Err::CorruptImage, "pixel buffer size mismatch");

  const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
  std::vector<uint8_t> raw((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw[y * (stride + 1)] = 0;  // filter: none
    std::memcpy(&raw[y * (stride + 1) + 1], &img.data[y * stride], stride);
  }
  uLongf bound = compressBound(raw.size());
  std::vector<uint8_t> packed(bound);
  const int rc = compress2(packed.data(), &bound, raw.data(), raw.size(), 6);
  require(rc == Z_OK, Err::CorruptImage, "deflate failed (zlib " + std::to_string(rc) + ")");
  packed.resize(bound);

  auto chunk = [](std::string& out, const char* type, const uint8_t* data, std::size_t len) {
    put_u32be(out, static_cast<uint32_t>(len));
    const std::size_t type_at = out.size();
    out.append(type, 4);
    if (len) out.append(reinterpret_cast<const char*>(data), len);
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(out.data() + type_at), 4 + len));
    put_u32be(out, crc);
  };

  std::string out(reinterpret_cast<const char*>(kPngSig), 8);
  std::string ihdr_be;
  put_u32be(ihdr_be, static_cast<uint32_t>(img.width));
  put_u32be(ihdr_be, static_cast<uint32_t>(img.height));
  const uint8_t tail[5] = {8, 2, 0, 0, 0};  // depth, color, compression, filter, interlace
  ihdr_be.append(reinterpret_cast<const char*>(tail), 5);
  chunk(out, "IHDR", reinterpret_cast<const uint8_t*>(ihdr_be.data()), ihdr_be.size());
  chunk(out, "IDAT", packed.data(), packed.size());
  chunk(out, "IEND", nullptr, 0);
  return out;
}

RasterImage decode_isgr(const std::vector<uint8_t>& bytes, const std::string& origin) {
  ByteReader r(bytes.data(), bytes.size(), origin);
  require(r.bytes(4) == "ISGR", Err::UnsupportedFormat, origin + ": bad ISGR magic");
  const uint32_t ver = r.u32le();
  require(ver == kIsgrVersion, Err::CorruptImage,
          origin + ": unsupported ISGR version " + std::to_string(ver));
  const uint32_t w = r.u32le(), h = r.u32le();
  require(w >= 1 && h >= 1 && w <= 0x7fffffffu && h <= 0x7fffffffu, Err::CorruptImage,
          origin + ": bad dimensions");
  RasterImage img;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  const std::size_t want = img.expected_bytes();
  require(r.remaining() == want, Err::CorruptImage,
          origin + ": payload is " + std::to_string(r.remaining()) + " bytes, expected " +
              std::to_string(want));
  const uint8_t* p = r.take(want);
  img.data.assign(p, p + want);
  return img;
}

std::string encode_isgr(const RasterImage& img) {
  require(img.width >= 1 && img.height >= 1, Err::CorruptImage, "empty image");
  require(img.data.size() == img.expected_bytes(), Err::CorruptImage, "pixel buffer size mismatch");
  std::string out = "ISGR";
  put_u32le(out, kIsgrVersion);
  put_u32le(out, static_cast<uint32_t>(img.width));
  put_u32le(out, static_cast<uint32_t>(img.height));
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  return out;
}

void save_isgr(const std::string& path, const RasterImage& img) {
  write_file_bytes(path, encode_isgr(img));
}

RasterImage load_raster(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0)
    return decode_png(bytes, path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "ISGR", 4) == 0)
    return decode_isgr(bytes, path);
  fail(Err::UnsupportedFormat, path + ": not a PNG or ISGR file");
}

std::vector<GlobalPatch> tile_coarse(const RasterImage& img, const TileSpec& spec) {
  require(spec.p >= 1, Err::PatchLargerThanImage, "patch side must be >= 1");
  require(spec.p <= img.width && spec.p <= img.height, Err::PatchLargerThanImage,
          "patch side " + std::to_string(spec.p) + " exceeds image " + std::to_string(img.width) +
              "x" + std::to_string(img.height));
  const int rows = img.height / spec.p;
  const int cols = img.width / spec.p;
  const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
  std::vector<GlobalPatch> out;
  out.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      GlobalPatch p;
      p.id = r * cols + c;
      p.grid_row = r;
      p.grid_col = c;
      p.side = spec.p;
      p.pixels.resize(static_cast<std::size_t>(spec.p) * spec.p * 3);
      for (int y = 0; y < spec.p; ++y) {
        const std::size_t src = (static_cast<std::size_t>(r) * spec.p + y) * stride +
                                static_cast<std::size_t>(c) * spec.p * 3;
        std::memcpy(&p.pixels[static_cast<std::size_t>(y) * spec.p * 3], &img.data[src],
                    static_cast<std::size_t>(spec.p) * 3);
      }
      out.push_back(std::move(p));
    }
  return out;
}

LocalPatchGrid tile_fine(const GlobalPatch& patch, const TileSpec& spec) {
  require(spec.q >= 1 && spec.p % spec.q == 0, Err::NonDivisibleSpec,
          "fine side " + std::to_string(spec.q) + " does not divide coarse side " +
              std::to_string(spec.p));
  require(patch.side == spec.p, Err::WrongPatchSize, "patch side does not match tile spec");
  const int grid = spec.p / spec.q;
  LocalPatchGrid out;
  out.parent_id = patch.id;
  out.grid = grid;
  out.side = spec.q;
  out.patches.resize(static_cast<std::size_t>(grid) * grid);
  const std::size_t parent_stride = static_cast<std::size_t>(spec.p) * 3;
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      auto& buf = out.patches[static_cast<std::size_t>(r) * grid + c];
      buf.resize(static_cast<std::size_t>(spec.q) * spec.q * 3);
      for (int y = 0; y < spec.q; ++y) {
        const std::size_t src = (static_cast<std::size_t>(r) * spec.q + y) * parent_stride +
                                static_cast<std::size_t>(c) * spec.q * 3;
        std::memcpy(&buf[static_cast<std::size_t>(y) * spec.q * 3], &patch.pixels[src],
                    static_cast<std::size_t>(spec.q) * 3);
      }
    }
  return out;
}

}  // namespace isg
