#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "upsearch/errors.hpp"

namespace upsearch {

// Little-endian primitives for the binary file formats (weights, controller
// checkpoints, sparse tensors). Doubles are stored as their IEEE-754 bit
// pattern, so round trips are bit exact.

static_assert(sizeof(double) == 8, "IEEE-754 binary64 expected");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_i32(std::ostream& os, std::int32_t v) {
  write_u32(os, static_cast<std::uint32_t>(v));
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

inline void write_f64_vec(std::ostream& os, const std::vector<double>& v) {
  write_u64(os, v.size());
  for (double x : v) write_f64(os, x);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("unexpected end of stream reading u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("unexpected end of stream reading u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::int32_t read_i32(std::istream& is) {
  return static_cast<std::int32_t>(read_u32(is));
}

inline double read_f64(std::istream& is) {
  std::uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::vector<double> read_f64_vec(std::istream& is) {
  std::uint64_t n = read_u64(is);
  std::vector<double> v(n);
  for (std::uint64_t i = 0; i < n; ++i) v[i] = read_f64(is);
  return v;
}

inline void write_magic(std::ostream& os, const char magic[4], std::uint32_t version) {
  os.write(magic, 4);
  write_u32(os, version);
}

inline std::uint32_t read_magic(std::istream& is, const char magic[4]) {
  char got[4];
  is.read(got, 4);
  if (!is || std::memcmp(got, magic, 4) != 0)
    throw IoError(std::string("bad file magic, expected ") + std::string(magic, 4));
  return read_u32(is);
}

}  // namespace upsearch
