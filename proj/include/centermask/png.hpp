#pragma once

// Minimal PNG reader/writer over zlib: 8-bit grayscale and RGB, no interlace.
// Covers the dataset formats (0/255 mask PNGs, RGB scene images) with
// bit-exact round trips.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "centermask/common.hpp"

namespace centermask {

struct PngImage {
  int h = 0;
  int w = 0;
  int channels = 0;  // 1 = gray, 3 = rgb
  std::vector<std::uint8_t> pixels;  // row-major, interleaved

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
};

namespace detail {

inline void png_u32be(std::vector<std::uint8_t>* out, std::uint32_t v) {
  out->push_back(static_cast<std::uint8_t>(v >> 24));
  out->push_back(static_cast<std::uint8_t>(v >> 16));
  out->push_back(static_cast<std::uint8_t>(v >> 8));
  out->push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t png_read_u32be(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

inline void png_chunk(std::vector<std::uint8_t>* out, const char type[4],
                      const std::vector<std::uint8_t>& payload) {
  png_u32be(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t crc_start = out->size();
  out->insert(out->end(), type, type + 4);
  out->insert(out->end(), payload.begin(), payload.end());
  std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0, out->data() + crc_start, static_cast<uInt>(out->size() - crc_start)));
  png_u32be(out, crc);
}

inline int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const PngImage& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw IoError("encode_png: only grayscale and RGB images are supported");
  }
  if (img.h < 1 || img.w < 1) throw IoError("encode_png: empty image");

  static const std::uint8_t signature[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<std::uint8_t> out(signature, signature + 8);

  std::vector<std::uint8_t> ihdr;
  detail::png_u32be(&ihdr, static_cast<std::uint32_t>(img.w));
  detail::png_u32be(&ihdr, static_cast<std::uint32_t>(img.h));
  ihdr.push_back(8);                                    // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : 2);            // color type
  ihdr.push_back(0);                                    // compression
  ihdr.push_back(0);                                    // filter method
  ihdr.push_back(0);                                    // no interlace
  detail::png_chunk(&out, "IHDR", ihdr);

  // Filter type 0 (none) on every row.
  const std::size_t row_bytes = static_cast<std::size_t>(img.w) * img.channels;
  std::vector<std::uint8_t> raw;
  raw.reserve((row_bytes + 1) * img.h);
  for (int y = 0; y < img.h; ++y) {
    raw.push_back(0);
    const std::uint8_t* row = img.pixels.data() + y * row_bytes;
    raw.insert(raw.end(), row, row + row_bytes);
  }

  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (::compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw IoError("encode_png: deflate failed");
  }
  compressed.resize(bound);
  detail::png_chunk(&out, "IDAT", compressed);
  detail::png_chunk(&out, "IEND", {});
  return out;
}

inline PngImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name = "png") {
  static const std::uint8_t signature[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), signature, 8) != 0) {
    throw IoError(detail::cat(name, ": not a PNG file"));
  }

  PngImage img;
  int bit_depth = 0, color_type = -1, interlace = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  bool saw_end = false;
  while (pos + 8 <= bytes.size()) {
    std::uint32_t len = detail::png_read_u32be(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) throw IoError(detail::cat(name, ": truncated chunk"));
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const std::uint8_t* payload = bytes.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw IoError(detail::cat(name, ": bad IHDR"));
      img.w = static_cast<int>(detail::png_read_u32be(payload));
      img.h = static_cast<int>(detail::png_read_u32be(payload + 4));
      bit_depth = payload[8];
      color_type = payload[9];
      interlace = payload[12];
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
      break;
    }
    pos += 12 + len;
  }
  if (!saw_end) throw IoError(detail::cat(name, ": missing IEND"));
  if (bit_depth != 8 || (color_type != 0 && color_type != 2) || interlace != 0) {
    throw IoError(detail::cat(name, ": unsupported PNG variant (need 8-bit gray or RGB, no interlace)"));
  }
  img.channels = color_type == 0 ? 1 : 3;
  if (img.w < 1 || img.h < 1) throw IoError(detail::cat(name, ": empty image"));

  const std::size_t row_bytes = static_cast<std::size_t>(img.w) * img.channels;
  std::vector<std::uint8_t> raw((row_bytes + 1) * img.h);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (::uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size()) {
    throw IoError(detail::cat(name, ": inflate failed"));
  }

  img.pixels.resize(row_bytes * img.h);
  const int bpp = img.channels;  // bytes per pixel at 8-bit depth
  for (int y = 0; y < img.h; ++y) {
    const std::uint8_t filter = raw[y * (row_bytes + 1)];
    const std::uint8_t* src = raw.data() + y * (row_bytes + 1) + 1;
    std::uint8_t* cur = img.pixels.data() + y * row_bytes;
    const std::uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * row_bytes : nullptr;
    for (std::size_t i = 0; i < row_bytes; ++i) {
      int a = i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0;
      int b = up ? up[i] : 0;
      int c = (up && i >= static_cast<std::size_t>(bpp)) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default: throw IoError(detail::cat(name, ": unknown row filter ", int(filter)));
      }
      cur[i] = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  return img;
}

inline void write_png_file(const std::string& path, const PngImage& img) {
  auto bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(detail::cat("cannot open for writing: ", path));
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(detail::cat("write failed: ", path));
}

inline PngImage read_png_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(detail::cat("cannot open: ", path));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_png(bytes, path);
}

}  // namespace centermask
