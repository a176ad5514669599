#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lbsac {

// Little-endian binary file helpers. All on-disk formats in this project
// (LBD1 datasets, LBN1 networks, LBO1 optimizer state) are little-endian;
// big-endian hosts are rejected up front rather than silently corrupted.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

inline void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little) {
    throw IoError("big-endian hosts are not supported by the binary formats");
  }
}

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    require_little_endian();
    if (!out_) throw IoError("cannot open for writing: " + path);
  }
  void magic(const char m[4]) { raw(m, 4); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void bytes(const void* p, size_t n) { raw(p, n); }
  void f32_blob(const std::vector<float>& v) { raw(v.data(), v.size() * 4); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void close() {
    out_.close();
    if (!out_) throw IoError("write failed: " + path_);
  }

 private:
  void raw(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed: " + path_);
  }
  std::string path_;
  std::ofstream out_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    require_little_endian();
    if (!in_) throw IoError("cannot open for reading: " + path);
  }
  void expect_magic(const char m[4]) {
    char got[4];
    raw(got, 4, "magic");
    if (std::memcmp(got, m, 4) != 0) {
      throw IoError(path_ + ": bad magic at byte 0, expected \"" +
                    std::string(m, 4) + "\"");
    }
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    raw(&v, 4, what);
    return v;
  }
  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    raw(&v, 8, what);
    return v;
  }
  float f32(const char* what) {
    float v;
    raw(&v, 4, what);
    return v;
  }
  double f64(const char* what) {
    double v;
    raw(&v, 8, what);
    return v;
  }
  std::string str(const char* what, std::uint32_t max_len = 1u << 24) {
    const std::uint32_t n = u32(what);
    if (n > max_len) throw IoError(path_ + ": unreasonable string length for " + what);
    std::string s(n, '\0');
    raw(s.data(), n, what);
    return s;
  }
  std::vector<float> f32_blob(size_t count, const char* what) {
    std::vector<float> v(count);
    raw(v.data(), count * 4, what);
    return v;
  }
  void bytes(void* p, size_t n, const char* what) { raw(p, n, what); }
  std::uint64_t offset() const { return offset_; }
  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

 private:
  void raw(void* p, size_t n, const char* what) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) {
      throw IoError(path_ + ": truncated while reading " + std::string(what) +
                    " at byte offset " + std::to_string(offset_));
    }
    offset_ += n;
  }
  std::string path_;
  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

}  // namespace lbsac
