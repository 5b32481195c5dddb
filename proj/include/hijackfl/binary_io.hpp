#pragma once

// Little-endian binary primitives shared by the checkpoint, dataset and
// cloak file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "hijackfl/errors.hpp"

namespace hijackfl::binary {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

template <class T>
void write_pod(std::ostream& os, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw FormatError(std::string("truncated file reading ") + what);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_pod(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_pod(os, v); }
inline void write_i64(std::ostream& os, std::int64_t v) { write_pod(os, v); }
inline void write_f64(std::ostream& os, double v) { write_pod(os, v); }
inline std::uint32_t read_u32(std::istream& is, const char* what) { return read_pod<std::uint32_t>(is, what); }
inline std::uint64_t read_u64(std::istream& is, const char* what) { return read_pod<std::uint64_t>(is, what); }
inline std::int64_t read_i64(std::istream& is, const char* what) { return read_pod<std::int64_t>(is, what); }
inline double read_f64(std::istream& is, const char* what) { return read_pod<double>(is, what); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
  const auto n = read_u32(is, what);
  if (n > (1u << 20)) throw FormatError(std::string("implausible string length in ") + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError(std::string("truncated file reading ") + what);
  return s;
}

inline void write_f64_array(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_f64_array(std::istream& is, std::size_t n, const char* what) {
  std::vector<double> v(n);
  if (n && !is.read(reinterpret_cast<char*>(v.data()),
                    static_cast<std::streamsize>(n * sizeof(double)))) {
    throw FormatError(std::string("truncated file reading ") + what);
  }
  return v;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4];
  if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
}

}  // namespace hijackfl::binary
