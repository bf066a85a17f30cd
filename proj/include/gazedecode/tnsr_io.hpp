#pragma once

// TNSR tensor container.
//
//   bytes 0-3   magic "TNSR"
//   byte  4     version (1)
//   byte  5     dtype: 0 = f32 little-endian, 1 = u8
//   bytes 6-7   ndim, u16 little-endian
//   then        ndim x u32 little-endian dims
//   then        raw row-major payload
//
// A checkpoint is a sequence of records [u32 name length][UTF-8 name][TNSR].
// u8 payloads decode to floats in [0,1] as byte/255.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "gazedecode/errors.hpp"
#include "gazedecode/optim.hpp"
#include "gazedecode/tensor.hpp"

namespace gazedecode {

static_assert(std::endian::native == std::endian::little,
              "TNSR serialization assumes a little-endian host");

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

using Bytes = std::vector<std::uint8_t>;

namespace detail {

inline void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  const std::uint8_t* take(std::size_t n) {
    if (size_ - pos_ < n) throw FormatError("truncated TNSR data");
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint16_t u16() {
    const std::uint8_t* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    const std::uint8_t* p = take(4);
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint8_t quantize_u8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::floor(c * 255.0f + 0.5f));
}

inline Tensor decode_tnsr(Reader& r) {
  const std::uint8_t* magic = r.take(4);
  if (std::memcmp(magic, "TNSR", 4) != 0) throw FormatError("bad TNSR magic");
  const std::uint8_t version = r.u8();
  if (version != 1) throw FormatError("unsupported TNSR version " + std::to_string(version));
  const std::uint8_t dtype = r.u8();
  if (dtype > 1) throw FormatError("unknown TNSR dtype " + std::to_string(dtype));
  const std::uint16_t ndim = r.u16();
  Shape shape(ndim);
  for (auto& d : shape) d = r.u32();
  const std::size_t count = shape_size(shape);
  std::vector<float> data(count);
  if (static_cast<DType>(dtype) == DType::f32) {
    const std::uint8_t* p = r.take(count * 4);
    std::memcpy(data.data(), p, count * 4);
  } else {
    const std::uint8_t* p = r.take(count);
    for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<float>(p[i]) / 255.0f;
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace detail

inline Bytes encode_tnsr(const Tensor& t, DType dtype = DType::f32) {
  if (t.rank() > 0xFFFF) throw DimensionError("too many dimensions for TNSR");
  Bytes out{'T', 'N', 'S', 'R', 1, static_cast<std::uint8_t>(dtype)};
  detail::put_u16(out, static_cast<std::uint16_t>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw DimensionError("dimension exceeds u32");
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  if (dtype == DType::f32) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.ptr());
    out.insert(out.end(), p, p + t.size() * sizeof(float));
  } else {
    for (float v : t.data()) out.push_back(detail::quantize_u8(v));
  }
  return out;
}

inline Tensor decode_tnsr(const Bytes& bytes) {
  detail::Reader r(bytes.data(), bytes.size());
  Tensor t = detail::decode_tnsr(r);
  if (r.remaining() != 0) throw FormatError("trailing bytes after TNSR payload");
  return t;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  write_file(path, Bytes(text.begin(), text.end()));
}

inline void save_tnsr(const std::filesystem::path& path, const Tensor& t,
                      DType dtype = DType::f32) {
  write_file(path, encode_tnsr(t, dtype));
}

inline Tensor load_tnsr(const std::filesystem::path& path) { return decode_tnsr(read_file(path)); }

// Records are written in name order (std::map iteration), so identical
// parameters always produce identical bytes.
inline Bytes encode_checkpoint(const TensorMap<float>& tensors) {
  Bytes out;
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const Bytes blob = encode_tnsr(t);
    out.insert(out.end(), blob.begin(), blob.end());
  }
  return out;
}

inline TensorMap<float> decode_checkpoint(const Bytes& bytes) {
  TensorMap<float> out;
  detail::Reader r(bytes.data(), bytes.size());
  while (r.remaining() > 0) {
    const std::uint32_t len = r.u32();
    const std::uint8_t* p = r.take(len);
    std::string name(reinterpret_cast<const char*>(p), len);
    Tensor t = detail::decode_tnsr(r);
    if (!out.emplace(std::move(name), std::move(t)).second)
      throw FormatError("duplicate checkpoint record");
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const TensorMap<float>& tensors) {
  write_file(path, encode_checkpoint(tensors));
}

inline TensorMap<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace gazedecode
