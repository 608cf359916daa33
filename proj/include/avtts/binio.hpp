#ifndef AVTTS_BINIO_HPP
#define AVTTS_BINIO_HPP

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "avtts/common.hpp"

namespace avtts {

// Explicit little-endian binary IO used by every on-disk format.

class BinWriter {
 public:
  explicit BinWriter(std::ostream& out) : out_(out) {}

  void bytes(const void* p, size_t n) { out_.write(static_cast<const char*>(p), std::streamsize(n)); }
  void u8(uint8_t x) { bytes(&x, 1); }
  void u16(uint16_t x) { put_le(x); }
  void u32(uint32_t x) { put_le(x); }
  void u64(uint64_t x) { put_le(x); }
  void i32(int32_t x) { put_le(uint32_t(x)); }
  void f32(float x) {
    uint32_t b;
    std::memcpy(&b, &x, 4);
    put_le(b);
  }
  void f64(double x) {
    uint64_t b;
    std::memcpy(&b, &x, 8);
    put_le(b);
  }
  void str(const std::string& s) {
    u32(uint32_t(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  template <typename T>
  void put_le(T x) {
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(x >> (8 * i));
    bytes(buf, sizeof(T));
  }
  std::ostream& out_;
};

class BinReader {
 public:
  explicit BinReader(std::istream& in) : in_(in) {}

  void bytes(void* p, size_t n) {
    in_.read(static_cast<char*>(p), std::streamsize(n));
    if (in_.gcount() != std::streamsize(n)) fail(ErrorCode::io_error, "unexpected end of file");
  }
  uint8_t u8() {
    uint8_t x;
    bytes(&x, 1);
    return x;
  }
  uint16_t u16() { return get_le<uint16_t>(); }
  uint32_t u32() { return get_le<uint32_t>(); }
  uint64_t u64() { return get_le<uint64_t>(); }
  int32_t i32() { return int32_t(get_le<uint32_t>()); }
  float f32() {
    uint32_t b = get_le<uint32_t>();
    float x;
    std::memcpy(&x, &b, 4);
    return x;
  }
  double f64() {
    uint64_t b = get_le<uint64_t>();
    double x;
    std::memcpy(&x, &b, 8);
    return x;
  }
  std::string str(uint32_t max_len = (1u << 24)) {
    uint32_t n = u32();
    if (n > max_len) fail(ErrorCode::io_error, "implausible string length");
    std::string s(n, '\0');
    if (n) bytes(s.data(), n);
    return s;
  }

 private:
  template <typename T>
  T get_le() {
    unsigned char buf[sizeof(T)];
    bytes(buf, sizeof(T));
    T x = 0;
    for (size_t i = 0; i < sizeof(T); ++i) x |= T(buf[i]) << (8 * i);
    return x;
  }
  std::istream& in_;
};

}  // namespace avtts

#endif  // AVTTS_BINIO_HPP
