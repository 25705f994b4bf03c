#pragma once

// Little helpers for the versioned binary formats (segment cache, bundle cache,
// checkpoints). Host byte order; files are not meant to move across endianness.

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "har/common.hpp"

namespace har::io {

template <typename T>
  requires std::is_trivially_copyable_v<T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error("truncated binary file");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > (1u << 24)) throw Error("corrupt string length in binary file");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw Error("truncated binary file");
  return s;
}

template <typename T>
void write_array(std::ostream& out, std::span<const T> values) {
  write_pod<std::uint64_t>(out, values.size());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

template <typename T>
std::vector<T> read_array(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > (std::uint64_t{1} << 34) / sizeof(T)) throw Error("corrupt array length in binary file");
  std::vector<T> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) throw Error("truncated binary file");
  return v;
}

}  // namespace har::io
