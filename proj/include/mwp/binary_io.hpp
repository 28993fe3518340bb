#pragma once

// Little-endian binary containers for the index, embedder and checkpoint files.

#include "mwp/error.hpp"

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mwp::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("unexpected end of binary file");
  return v;
}

inline void write_string(std::ostream& out, std::string_view s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::uint32_t max_len = 1u << 26) {
  const auto n = read_pod<std::uint32_t>(in);
  if (n > max_len) throw DataError("string length " + std::to_string(n) + " out of range");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw DataError("unexpected end of binary file");
  return s;
}

inline void write_doubles(std::ostream& out, std::span<const double> values) {
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

inline void read_doubles(std::istream& in, std::span<double> values) {
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  if (!in) throw DataError("unexpected end of binary file");
}

inline void write_magic(std::ostream& out, std::string_view magic) {
  std::string m(magic);
  m.resize(8, '\0');
  out.write(m.data(), 8);
}

inline void expect_magic(std::istream& in, std::string_view magic, std::string_view what) {
  std::string m(8, '\0');
  in.read(m.data(), 8);
  std::string want(magic);
  want.resize(8, '\0');
  if (!in || m != want) throw DataError("not a " + std::string(what) + " file");
}

}  // namespace mwp::io
