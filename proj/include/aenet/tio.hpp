#pragma once

// File formats.
//
// FTNS tensor container, little-endian regardless of host:
//   bytes 0..3   magic "FTNS"
//   byte  4      version (1)
//   byte  5      dtype code (0 = f32, 1 = f64)
//   byte  6      ndim
//   then         ndim × u32 dims
//   then         row-major payload
//
// Masks are written as binary PGM (P5, maxval 255), pixel = round-half-up(255·v).

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "aenet/tensor.hpp"

namespace aenet::tio {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::array<char, 4> kMagic{'F', 'T', 'N', 'S'};
inline constexpr std::uint8_t kVersion = 1;

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

namespace detail {

template <typename U>
void put_le(std::vector<char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void dump(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace detail

template <typename T>
std::vector<char> encode_tensor(const Tensor<T>& t) {
  if (t.ndim() > 255) throw FormatError("ftns: too many dimensions");
  std::vector<char> out(kMagic.begin(), kMagic.end());
  out.push_back(static_cast<char>(kVersion));
  out.push_back(static_cast<char>(dtype_of<T>()));
  out.push_back(static_cast<char>(t.ndim()));
  for (std::size_t d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw FormatError("ftns: dimension exceeds u32");
    detail::put_le(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.values()) {
    if constexpr (std::is_same_v<T, float>)
      detail::put_le(out, std::bit_cast<std::uint32_t>(v));
    else
      detail::put_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

struct DecodedTensor {
  DType dtype;
  Tensor<double> data;  // f32 payloads widen exactly
};

inline DecodedTensor decode_tensor(const std::vector<unsigned char>& bytes) {
  constexpr std::size_t header = 7;
  if (bytes.size() < header) throw FormatError("ftns: truncated header");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw FormatError("ftns: bad magic");
  if (bytes[4] != kVersion) throw FormatError("ftns: unsupported version " + std::to_string(bytes[4]));
  if (bytes[5] > 1) throw FormatError("ftns: unknown dtype code " + std::to_string(bytes[5]));
  const auto dtype = static_cast<DType>(bytes[5]);
  const std::size_t ndim = bytes[6];
  if (bytes.size() < header + 4 * ndim) throw FormatError("ftns: truncated dims");
  Shape shape(ndim);
  for (std::size_t i = 0; i < ndim; ++i)
    shape[i] = detail::get_le<std::uint32_t>(bytes.data() + header + 4 * i);
  const std::size_t elem = dtype == DType::F32 ? 4 : 8;
  const std::size_t n = shape_numel(shape);
  const std::size_t off = header + 4 * ndim;
  if (bytes.size() != off + n * elem)
    throw FormatError("ftns: payload is " + std::to_string(bytes.size() - off) + " bytes, expected " +
                      std::to_string(n * elem));
  Tensor<double> t(shape);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* p = bytes.data() + off + i * elem;
    t[i] = dtype == DType::F32 ? static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(p)))
                               : std::bit_cast<double>(detail::get_le<std::uint64_t>(p));
  }
  return {dtype, std::move(t)};
}

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  detail::dump(path, encode_tensor(t));
}

inline DecodedTensor read_tensor_file(const std::filesystem::path& path) {
  try {
    return decode_tensor(detail::slurp(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  return read_tensor_file(path).data.template cast<T>();
}

// ---------------------------------------------------------------------------
// PGM masks
// ---------------------------------------------------------------------------

template <typename T>
std::uint8_t mask_byte(T v) {
  if (!(v >= T{0} && v <= T{1}))
    throw ContractError("mask value " + std::to_string(static_cast<double>(v)) + " outside [0,1]");
  return static_cast<std::uint8_t>(std::floor(255.0 * static_cast<double>(v) + 0.5));
}

// Accepts H×W or 1×H×W.
template <typename T>
std::vector<char> encode_mask_pgm(const Tensor<T>& m) {
  if (!(m.ndim() == 2 || (m.ndim() == 3 && m.dim(0) == 1)))
    throw DimensionError("pgm: expected H×W mask, got " + shape_str(m.shape()));
  const std::size_t h = m.dim(m.ndim() - 2), w = m.dim(m.ndim() - 1);
  const std::string head = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<char> out(head.begin(), head.end());
  for (T v : m.values()) out.push_back(static_cast<char>(mask_byte(v)));
  return out;
}

template <typename T>
void write_mask_pgm(const std::filesystem::path& path, const Tensor<T>& m) {
  detail::dump(path, encode_mask_pgm(m));
}

// Returns an H×W mask with values byte/maxval.
template <typename T>
Tensor<T> read_mask_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  std::size_t pos = 0;
  auto next_token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    return tok;
  };
  if (next_token() != "P5") throw FormatError(path.string() + ": not a binary PGM (P5)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token());
    h = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PGM header");
  }
  if (maxval == 0 || maxval > 255) throw FormatError(path.string() + ": unsupported PGM maxval");
  ++pos;  // single whitespace byte before the raster
  if (bytes.size() != pos + w * h) throw FormatError(path.string() + ": PGM raster size mismatch");
  Tensor<T> m({h, w});
  for (std::size_t i = 0; i < w * h; ++i)
    m[i] = static_cast<T>(bytes[pos + i]) / static_cast<T>(maxval);
  return m;
}

}  // namespace aenet::tio
