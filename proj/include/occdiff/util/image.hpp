// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal 8-bit RGB raster with a PNG writer (zlib-backed). Byte-identical
// output for identical pixels: fixed filter (none) and compression level.

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace occdiff::img {

struct Image {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> rgb;  // height*width*3, row-major

  static Image filled(int height, int width, uint8_t r, uint8_t g, uint8_t b);
  void set(int y, int x, uint8_t r, uint8_t g, uint8_t b);
};

void save_png(const Image& image, const std::filesystem::path& path);

}  // namespace occdiff::img
