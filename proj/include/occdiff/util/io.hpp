// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Byte-level IO helpers. All on-disk multi-byte values are little-endian.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "occdiff/util/error.hpp"

namespace occdiff {

std::vector<uint8_t> read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, const uint8_t* data, size_t n);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// Sequential reader over an in-memory buffer.
class ByteReader {
 public:
  ByteReader(const uint8_t* data, size_t n) : data_(data), n_(n) {}
  explicit ByteReader(const std::vector<uint8_t>& buf) : ByteReader(buf.data(), buf.size()) {}

  size_t remaining() const { return n_ - pos_; }

  void bytes(void* out, size_t n) {
    require(remaining() >= n, Errc::truncated, "unexpected end of data");
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }

  template <typename T>
  T le() {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    bytes(&v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    return v;
  }

  uint32_t u32() { return le<uint32_t>(); }
  uint64_t u64() { return le<uint64_t>(); }
  float f32() {
    uint32_t b = u32();
    float v;
    std::memcpy(&v, &b, 4);
    return v;
  }
  std::string str(size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  template <typename T>
  static T byteswap(T v) {
    uint8_t* p = reinterpret_cast<uint8_t*>(&v);
    for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
    return v;
  }
  const uint8_t* data_;
  size_t n_;
  size_t pos_ = 0;
};

// Append-only byte buffer with little-endian scalar writes.
class ByteWriter {
 public:
  const std::vector<uint8_t>& buffer() const { return buf_; }
  std::vector<uint8_t>& buffer() { return buf_; }

  void bytes(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }

  template <typename T>
  void le(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::endian::native == std::endian::big) {
      uint8_t* p = reinterpret_cast<uint8_t*>(&v);
      for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
    }
    bytes(&v, sizeof(T));
  }

  void u32(uint32_t v) { le(v); }
  void u64(uint64_t v) { le(v); }
  void f32(float v) {
    uint32_t b;
    std::memcpy(&b, &v, 4);
    u32(b);
  }
  void str(const std::string& s) { bytes(s.data(), s.size()); }

 private:
  std::vector<uint8_t> buf_;
};

}  // namespace occdiff
