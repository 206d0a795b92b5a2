// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/util/io.hpp"

#include <cstdio>

namespace occdiff {

std::vector<uint8_t> read_binary_file(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.string().c_str(), "rb");
  require(f != nullptr, Errc::io, "cannot open for reading: " + path.string());
  std::fseek(f, 0, SEEK_END);
  const long size = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<uint8_t> buf(static_cast<size_t>(size));
  const size_t got = size > 0 ? std::fread(buf.data(), 1, buf.size(), f) : 0;
  std::fclose(f);
  require(got == buf.size(), Errc::io, "short read: " + path.string());
  return buf;
}

void write_binary_file(const std::filesystem::path& path, const uint8_t* data, size_t n) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  require(f != nullptr, Errc::io, "cannot open for writing: " + path.string());
  const size_t put = n > 0 ? std::fwrite(data, 1, n, f) : 0;
  const int rc = std::fclose(f);
  require(put == n && rc == 0, Errc::io, "short write: " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  auto buf = read_binary_file(path);
  return std::string(buf.begin(), buf.end());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_binary_file(path, reinterpret_cast<const uint8_t*>(text.data()), text.size());
}

}  // namespace occdiff
