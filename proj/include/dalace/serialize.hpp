#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dalace/error.hpp"

// Little-endian binary IO. The on-disk formats are defined as
// little-endian; this build targets little-endian hosts only.
static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts unsupported");

namespace dalace {

struct BinWriter {
  std::ofstream out;

  explicit BinWriter(const std::string& path) : out(path, std::ios::binary) {
    require(out.good(), ErrorCode::IoError, "cannot open for write: " + path);
  }

  void bytes(const void* p, size_t n) { out.write(reinterpret_cast<const char*>(p), long(n)); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void i64(int64_t v) { bytes(&v, 8); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void f32(float v) { bytes(&v, 4); }
  void f32s(const float* p, size_t n) { bytes(p, n * 4); }
  void str(const std::string& s) {
    u32(uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
};

struct BinReader {
  std::ifstream in;
  std::string path;

  explicit BinReader(const std::string& p) : in(p, std::ios::binary), path(p) {
    require(in.good(), ErrorCode::IoError, "cannot open for read: " + p);
  }

  void bytes(void* p, size_t n) {
    in.read(reinterpret_cast<char*>(p), long(n));
    require(in.gcount() == long(n), ErrorCode::IoError, "truncated file: " + path);
  }
  uint32_t u32() {
    uint32_t v;
    bytes(&v, 4);
    return v;
  }
  int64_t i64() {
    int64_t v;
    bytes(&v, 8);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    bytes(&v, 8);
    return v;
  }
  float f32() {
    float v;
    bytes(&v, 4);
    return v;
  }
  void f32s(float* p, size_t n) { bytes(p, n * 4); }
  std::string str() {
    const uint32_t n = u32();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
};

}  // namespace dalace
