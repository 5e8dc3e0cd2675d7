#pragma once

#include <string>
#include <utility>
#include <vector>

#include "isg/binio.hpp"
#include "isg/params.hpp"
#include "isg/tensor.hpp"

namespace isg {

// Weight container. Layout, all little-endian:
//   "ISGW"  u32 version=1  u32 tensor_count
//   per tensor: u16 name_len, name bytes, u8 rank, rank x u32 extents,
//               prod(extents) x f32 values
// Values are stored as f32 regardless of the in-memory scalar type.

inline constexpr uint32_t kCheckpointVersion = 1;

template <class S>
std::string encode_checkpoint(const std::vector<std::pair<std::string, TensorT<S>>>& tensors) {
  std::string out;
  out += "ISGW";
  put_u32le(out, kCheckpointVersion);
  put_u32le(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    require(name.size() <= 0xffff, Err::InvalidConfig, "tensor name too long: " + name);
    require(t.rank() >= 1 && t.rank() <= 255, Err::ShapeMismatch, "tensor rank out of range");
    put_u16le(out, static_cast<uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (int r = 0; r < t.rank(); ++r) put_u32le(out, static_cast<uint32_t>(t.extent(r)));
    for (const S v : t.data) put_f32le(out, static_cast<float>(v));
  }
  return out;
}

template <class S>
std::vector<std::pair<std::string, TensorT<S>>> decode_checkpoint(const std::vector<uint8_t>& bytes,
                                                                  const std::string& origin) {
  ByteReader r(bytes.data(), bytes.size(), origin);
  require(r.bytes(4) == "ISGW", Err::CorruptData, origin + ": bad checkpoint magic");
  const uint32_t ver = r.u32le();
  require(ver == kCheckpointVersion, Err::CorruptData,
          origin + ": unsupported checkpoint version " + std::to_string(ver));
  const uint32_t count = r.u32le();
  std::vector<std::pair<std::string, TensorT<S>>> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.u16le();
    std::string name = r.bytes(name_len);
    const uint8_t rank = r.u8();
    require(rank >= 1, Err::CorruptData, origin + ": zero-rank tensor " + name);
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const uint32_t e = r.u32le();
      require(e >= 1 && e <= 0x7fffffffu, Err::CorruptData, origin + ": bad extent in " + name);
      shape[d] = static_cast<int>(e);
      numel *= e;
    }
    TensorT<S> t(shape);
    for (std::size_t j = 0; j < numel; ++j) t.data[j] = static_cast<S>(r.f32le());
    out.emplace_back(std::move(name), std::move(t));
  }
  require(r.remaining() == 0, Err::CorruptData, origin + ": trailing bytes after last tensor");
  return out;
}

template <class S>
void save_checkpoint(const std::string& path, const ParamStoreT<S>& params) {
  std::vector<std::pair<std::string, TensorT<S>>> tensors;
  tensors.reserve(params.items.size());
  for (const auto& [name, v] : params.items) tensors.emplace_back(name, v->value);
  write_file_bytes(path, encode_checkpoint(tensors));
}

// Every stored tensor must match an existing parameter in name and shape;
// the store may not contain extras and none may be missing.
template <class S>
void load_checkpoint(const std::string& path, ParamStoreT<S>& params) {
  const auto tensors = decode_checkpoint<S>(read_file_bytes(path), path);
  require(tensors.size() == params.size(), Err::CorruptData,
          path + ": tensor count " + std::to_string(tensors.size()) + " does not match model (" +
              std::to_string(params.size()) + ")");
  for (const auto& [name, t] : tensors) {
    auto v = params.get(name);
    require(same_shape(v->value, t), Err::ShapeMismatch,
            path + ": shape mismatch for " + name + " (" + t.shape_str() + " vs " +
                v->value.shape_str() + ")");
    v->value.data = t.data;
  }
}

}  // namespace isg
