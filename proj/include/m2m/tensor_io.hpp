#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "m2m/errors.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

// TensorFile layout, all integers little-endian:
//   "M2MT" | u32 version (1) | u8 dtype (0 = float32) | u8 ndim | u32 dims[ndim] | float32 payload
inline constexpr char kTensorMagic[4] = {'M', '2', 'M', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace io_detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>(v >> (8 * b)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace io_detail

inline std::vector<unsigned char> encode_tensor(const Tensor& t) {
  using io_detail::put_u32;
  std::vector<unsigned char> out(kTensorMagic, kTensorMagic + 4);
  put_u32(out, kTensorVersion);
  out.push_back(0);
  out.push_back(static_cast<unsigned char>(t.rank()));
  for (std::size_t d : t.dims()) put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * t.size());
  for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline Tensor decode_tensor(const std::vector<unsigned char>& bytes, const std::string& origin = "buffer") {
  using Kind = IoError::Kind;
  using io_detail::get_u32;
  if (bytes.size() < 4 || !std::equal(kTensorMagic, kTensorMagic + 4, bytes.begin()))
    throw IoError(Kind::kBadMagic, origin + ": bad magic");
  if (bytes.size() < 10) throw IoError(Kind::kTruncated, origin + ": truncated header");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kTensorVersion)
    throw IoError(Kind::kBadVersion, origin + ": unsupported version " + std::to_string(version));
  if (bytes[8] != 0) throw IoError(Kind::kBadDtype, origin + ": unsupported dtype " + std::to_string(bytes[8]));
  const std::size_t ndim = bytes[9];
  std::size_t pos = 10;
  if (bytes.size() < pos + 4 * ndim) throw IoError(Kind::kTruncated, origin + ": truncated dims");
  Shape dims(ndim);
  for (std::size_t a = 0; a < ndim; ++a, pos += 4) dims[a] = get_u32(bytes.data() + pos);
  const std::size_t n = shape_size(dims);
  if (bytes.size() != pos + 4 * n)
    throw IoError(Kind::kTruncated, origin + ": payload holds " + std::to_string(bytes.size() - pos) +
                                        " bytes, expected " + std::to_string(4 * n));
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i, pos += 4)
    values[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes.data() + pos)));
  return Tensor(std::move(dims), std::move(values));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  const std::vector<unsigned char> bytes = encode_tensor(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(IoError::Kind::kOpen, "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(IoError::Kind::kWrite, "write failed: " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoError::Kind::kOpen, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes, path.string());
}

}  // namespace m2m
