// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/util/image.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "occdiff/util/error.hpp"

namespace occdiff::img {

Image Image::filled(int height, int width, uint8_t r, uint8_t g, uint8_t b) {
  require(height > 0 && width > 0, Errc::invalid_argument, "image dims must be positive");
  Image im;
  im.height = height;
  im.width = width;
  im.rgb.resize(static_cast<size_t>(height) * width * 3);
  for (size_t i = 0; i < im.rgb.size(); i += 3) {
    im.rgb[i] = r;
    im.rgb[i + 1] = g;
    im.rgb[i + 2] = b;
  }
  return im;
}

void Image::set(int y, int x, uint8_t r, uint8_t g, uint8_t b) {
  require(y >= 0 && y < height && x >= 0 && x < width, Errc::invalid_argument,
          "pixel out of bounds");
  const size_t i = (static_cast<size_t>(y) * width + x) * 3;
  rgb[i] = r;
  rgb[i + 1] = g;
  rgb[i + 2] = b;
}

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
  put_u32(out, static_cast<uint32_t>(data.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_u32(out, crc);
}

}  // namespace

void save_png(const Image& image, const std::filesystem::path& path) {
  require(image.height > 0 && image.width > 0, Errc::invalid_argument, "empty image");
  require(image.rgb.size() == static_cast<size_t>(image.height) * image.width * 3,
          Errc::shape_mismatch, "pixel buffer does not match dims");

  // Raw scanlines, filter byte 0 per row.
  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(image.height) * (static_cast<size_t>(image.width) * 3 + 1));
  for (int y = 0; y < image.height; ++y) {
    raw.push_back(0);
    const uint8_t* row = image.rgb.data() + static_cast<size_t>(y) * image.width * 3;
    raw.insert(raw.end(), row, row + static_cast<size_t>(image.width) * 3);
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> deflated(bound);
  require(compress2(deflated.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) ==
              Z_OK,
          Errc::io, "png deflate failed");
  deflated.resize(bound);

  std::vector<uint8_t> ihdr;
  put_u32(ihdr, static_cast<uint32_t>(image.width));
  put_u32(ihdr, static_cast<uint32_t>(image.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter
  ihdr.push_back(0);  // interlace

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", deflated);
  put_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), Errc::io, "cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  require(f.good(), Errc::io, "short write to " + path.string());
}

}  // namespace occdiff::img
