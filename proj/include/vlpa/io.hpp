#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "vlpa/error.hpp"

namespace vlpa::io {

namespace fs = std::filesystem;

// 64-bit FNV-1a, used for content hashes of specs and corpora.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001B3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <class T>
  void update_value(const T& v) {
    update(&v, sizeof(T));
  }
  std::uint64_t digest() const { return h_; }
  std::string hex() const {
    static const char* k = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) s[15 - i] = k[(h_ >> (4 * i)) & 0xF];
    return s;
  }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

inline std::string hash_hex(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.hex();
}

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(std::string_view in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ConfigError("binary read past end of data");
  unsigned char b[sizeof(T)];
  std::memcpy(b, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  pos += sizeof(T);
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const fs::path& p, std::string_view data) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + p.string());
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
}

// Raw little-endian f64 array file.
inline void write_f64(const fs::path& p, std::span<const double> values) {
  std::string buf;
  buf.reserve(values.size() * 8);
  for (double v : values) put_le(buf, v);
  write_file(p, buf);
}

inline std::vector<double> read_f64(const fs::path& p, std::size_t expected) {
  std::string buf = read_file(p);
  if (buf.size() != expected * 8)
    throw ConfigError(p.string() + ": expected " + std::to_string(expected) + " f64 values, found " +
                      std::to_string(buf.size()) + " bytes");
  std::vector<double> out(expected);
  std::size_t pos = 0;
  for (auto& v : out) v = get_le<double>(buf, pos);
  return out;
}

}  // namespace vlpa::io
