#pragma once

// DPT tensor container.
//
//   offset  size  field
//   0       4     magic "DPTF"
//   4       4     version, u32 LE (= 1)
//   8       1     dtype, u8 (1 = float32)
//   9       1     ndim, u8
//   10      4*nd  extents, u32 LE
//   ...     4*n   payload, row-major float32 LE
//   ...     4     CRC-32 (zlib polynomial) of the payload bytes, u32 LE
//
// Records can be concatenated; model files are a sequence of records.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "dualpert/tensor.hpp"

namespace dualpert {

class FormatError : public Error {
 public:
  enum class Kind {
    io,
    truncated,
    bad_magic,
    unsupported_version,
    unsupported_dtype,
    length_mismatch,
    checksum,
    architecture_mismatch,
    inconsistent,
  };

  FormatError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kDptMagic[4] = {'D', 'P', 'T', 'F'};
inline constexpr std::uint32_t kDptVersion = 1;
inline constexpr std::uint8_t kDptFloat32 = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

inline std::uint32_t crc32_bytes(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

/// Appends one DPT record for `t` to `out`.
inline void encode_tensor(const Tensor& t, std::vector<std::uint8_t>& out) {
  if (t.rank() > 255) throw ArgumentError("DPT supports at most 255 dimensions");
  out.insert(out.end(), kDptMagic, kDptMagic + 4);
  detail::put_u32(out, kDptVersion);
  out.push_back(kDptFloat32);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > 0xFFFFFFFFu) throw ArgumentError("DPT extent exceeds u32");
    detail::put_u32(out, static_cast<std::uint32_t>(e));
  }
  const std::size_t payload_start = out.size();
  for (float v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  const std::uint32_t crc =
      detail::crc32_bytes(std::span<const std::uint8_t>(out.data() + payload_start, out.size() - payload_start));
  detail::put_u32(out, crc);
}

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  std::vector<std::uint8_t> out;
  encode_tensor(t, out);
  return out;
}

/// Decodes the record starting at `offset` and advances `offset` past it.
inline Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  using K = FormatError::Kind;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() < offset || bytes.size() - offset < n) {
      throw FormatError(K::truncated, std::string("DPT: truncated while reading ") + what);
    }
  };
  need(4, "magic");
  if (!std::equal(kDptMagic, kDptMagic + 4, bytes.begin() + offset)) {
    throw FormatError(K::bad_magic, "DPT: bad magic bytes");
  }
  offset += 4;
  need(4, "version");
  const std::uint32_t version = detail::get_u32(bytes, offset);
  if (version != kDptVersion) {
    throw FormatError(K::unsupported_version, "DPT: unsupported version " + std::to_string(version));
  }
  offset += 4;
  need(2, "dtype/ndim");
  const std::uint8_t dtype = bytes[offset];
  if (dtype != kDptFloat32) {
    throw FormatError(K::unsupported_dtype, "DPT: unsupported dtype " + std::to_string(dtype));
  }
  const std::size_t ndim = bytes[offset + 1];
  offset += 2;
  need(4 * ndim, "extents");
  Shape shape(ndim);
  std::uint64_t count = 1;
  const std::uint64_t remaining = bytes.size() - offset - 4 * ndim;
  for (std::size_t i = 0; i < ndim; ++i) shape[i] = detail::get_u32(bytes, offset + 4 * i);
  const bool empty = std::find(shape.begin(), shape.end(), std::size_t{0}) != shape.end();
  for (std::size_t i = 0; i < ndim && !empty; ++i) {
    count *= shape[i];
    if (count * 4 > remaining) {
      throw FormatError(K::length_mismatch, "DPT: extents " + shape_string(shape) + " exceed the available payload");
    }
  }
  if (empty) count = 0;
  offset += 4 * ndim;
  const std::size_t payload_bytes = static_cast<std::size_t>(count) * 4;
  if (bytes.size() - offset < payload_bytes + 4) {
    throw FormatError(K::length_mismatch, "DPT: payload shorter than extents " + shape_string(shape));
  }
  const auto payload = bytes.subspan(offset, payload_bytes);
  std::vector<float> data(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<float>(detail::get_u32(payload, 4 * i));
  offset += payload_bytes;
  const std::uint32_t stored = detail::get_u32(bytes, offset);
  offset += 4;
  if (stored != detail::crc32_bytes(payload)) throw FormatError(K::checksum, "DPT: payload CRC mismatch");
  return Tensor(std::move(shape), std::move(data));
}

/// Decodes a buffer that must hold exactly one record.
inline Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  std::size_t offset = 0;
  Tensor t = decode_tensor(bytes, offset);
  if (offset != bytes.size()) {
    throw FormatError(FormatError::Kind::length_mismatch, "DPT: trailing bytes after payload");
  }
  return t;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string() + " for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::io, "write failed for " + path.string());
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file_bytes(path, encode_tensor(t));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_tensor(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), path.string() + ": " + e.what());
  }
}

}  // namespace dualpert
