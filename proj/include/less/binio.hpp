#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "less/mat.hpp"

// Little-endian binary helpers shared by the checkpoint and trace formats.
namespace less::binio {

static_assert(std::endian::native == std::endian::little, "formats assume a little-endian host");

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& is, std::string_view magic, const std::string& what) {
  std::string buf(magic.size(), '\0');
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!is || buf != magic) throw std::runtime_error(what + ": bad magic, expected " + std::string(magic));
}

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_f32(std::ostream& os, double v) {
  const float f = static_cast<float>(v);
  os.write(reinterpret_cast<const char*>(&f), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("unexpected end of file");
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  if (!is) throw std::runtime_error("unexpected end of file");
  return v;
}
inline double read_f32(std::istream& is) {
  float f = 0;
  is.read(reinterpret_cast<char*>(&f), 4);
  if (!is) throw std::runtime_error("unexpected end of file");
  return static_cast<double>(f);
}

inline void write_mat(std::ostream& os, const Mat& m) {
  for (double v : m.data()) write_f32(os, v);
}

inline Mat read_mat(std::istream& is, std::size_t rows, std::size_t cols) {
  Mat m(rows, cols);
  for (auto& v : m.data()) v = read_f32(is);
  return m;
}

}  // namespace less::binio
