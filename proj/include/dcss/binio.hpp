#pragma once

#include "dcss/common.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

namespace dcss::io {

// Little-endian binary checkpoint/dataset encoding. Matrices are written
// row-major as float32 after a u32 rows / u32 cols pair.

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path)
      : out_(path, std::ios::binary) {
    if (!out_) throw StateError("cannot open for writing: " + path.string());
  }

  void magic(const char tag[4]) { out_.write(tag, 4); }
  void u16(std::uint16_t v) { raw(&v, sizeof(v)); }
  void u32(std::uint32_t v) { raw(&v, sizeof(v)); }
  void u64(std::uint64_t v) { raw(&v, sizeof(v)); }
  void f32(float v) { raw(&v, sizeof(v)); }
  void f64(double v) { raw(&v, sizeof(v)); }

  void mat_f32(const Mat& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        f32(static_cast<float>(m(i, j)));
  }

  void vec_f32(const Vec& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i)
      f32(static_cast<float>(v(i)));
  }

  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw StateError("cannot open for reading: " + path_);
  }

  void expect_magic(const char tag[4]) {
    char buf[4];
    raw(buf, 4);
    if (std::memcmp(buf, tag, 4) != 0)
      throw ValidationError("bad magic in " + path_ + ", expected " +
                            std::string(tag, 4));
  }

  std::uint16_t u16() {
    std::uint16_t v;
    raw(&v, sizeof(v));
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof(v));
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof(v));
    return v;
  }
  float f32() {
    float v;
    raw(&v, sizeof(v));
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof(v));
    return v;
  }

  Mat mat_f32() {
    const auto rows = u32();
    const auto cols = u32();
    Mat m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j)
        m(i, j) = static_cast<double>(f32());
    return m;
  }

  Vec vec_f32() {
    const auto n = u32();
    Vec v(n);
    for (std::uint32_t i = 0; i < n; ++i) v(i) = static_cast<double>(f32());
    return v;
  }

  std::string str() {
    const auto n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw ValidationError("truncated file: " + path_);
  }
  std::ifstream in_;
  std::string path_;
};

}  // namespace dcss::io
