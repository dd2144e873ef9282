#pragma once

// Detection overlays: mask tint, box outline, and a small bitmap label with
// class id and score.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "centermask/data.hpp"
#include "centermask/decode.hpp"
#include "centermask/png.hpp"

namespace centermask {

namespace detail {

// 5x7 glyphs for "0123456789.c ", one row per byte, 5 low bits used.
inline const std::uint8_t* glyph5x7(char ch) {
  static const std::uint8_t digits[13][7] = {
      {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e},  // 0
      {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e},  // 1
      {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f},  // 2
      {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e},  // 3
      {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02},  // 4
      {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e},  // 5
      {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e},  // 6
      {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},  // 7
      {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e},  // 8
      {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c},  // 9
      {0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c},  // .
      {0x00, 0x00, 0x0e, 0x10, 0x10, 0x11, 0x0e},  // c
      {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00},  // space
  };
  if (ch >= '0' && ch <= '9') return digits[ch - '0'];
  if (ch == '.') return digits[10];
  if (ch == 'c') return digits[11];
  return digits[12];
}

inline void draw_text(PngImage* img, int y0, int x0, const std::string& text,
                      std::array<float, 3> rgb) {
  for (std::size_t k = 0; k < text.size(); ++k) {
    const std::uint8_t* glyph = glyph5x7(text[k]);
    int gx = x0 + static_cast<int>(k) * 6;
    for (int row = 0; row < 7; ++row) {
      for (int col = 0; col < 5; ++col) {
        if (!(glyph[row] & (1 << (4 - col)))) continue;
        int y = y0 + row, x = gx + col;
        if (y < 0 || y >= img->h || x < 0 || x >= img->w) continue;
        for (int c = 0; c < 3; ++c) {
          img->at(y, x, c) = static_cast<std::uint8_t>(rgb[static_cast<std::size_t>(c)] * 255);
        }
      }
    }
  }
}

}  // namespace detail

inline PngImage render_overlay(const ImageRgb& image, const std::vector<Detection>& detections) {
  PngImage out = detail::image_to_png(image);
  for (const auto& det : detections) {
    auto color = detail::class_color(det.class_id);
    // Mask tint.
    for (int y = 0; y < out.h; ++y) {
      for (int x = 0; x < out.w; ++x) {
        if (!det.mask.at(y, x)) continue;
        for (int c = 0; c < 3; ++c) {
          float base = out.at(y, x, c) / 255.f;
          float v = 0.5f * base + 0.5f * color[static_cast<std::size_t>(c)];
          out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.f));
        }
      }
    }
    // Box outline.
    int x0 = std::max(0, static_cast<int>(std::floor(det.box.x)));
    int y0 = std::max(0, static_cast<int>(std::floor(det.box.y)));
    int x1 = std::min(out.w - 1, static_cast<int>(std::ceil(det.box.x2())) - 1);
    int y1 = std::min(out.h - 1, static_cast<int>(std::ceil(det.box.y2())) - 1);
    auto put = [&](int y, int x) {
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = static_cast<std::uint8_t>(color[static_cast<std::size_t>(c)] * 255);
      }
    };
    for (int x = x0; x <= x1; ++x) {
      put(y0, x);
      put(y1, x);
    }
    for (int y = y0; y <= y1; ++y) {
      put(y, x0);
      put(y, x1);
    }
    // Label: class id and score (two decimals).
    char label[24];
    std::snprintf(label, sizeof(label), "c%d %.2f", det.class_id, det.score);
    detail::draw_text(&out, std::max(0, y0 - 8), x0 + 1, label, {1.f, 1.f, 1.f});
  }
  return out;
}

}  // namespace centermask
