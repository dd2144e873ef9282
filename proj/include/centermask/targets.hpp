#pragma once

// Training-target encoders: the center-point Gaussian heatmap, sub-cell
// offsets, box sizes, and per-object mask crops at the feature-stride box grid.

#include <algorithm>
#include <cmath>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/tensor.hpp"

namespace centermask {

// One annotated object. The box is the tight bounding box of the visible
// mask; the center is the box center, in input pixels.
struct GroundTruthInstance {
  int class_id = 0;
  BinaryMask mask;
  Box box;
  double center_x = 0;
  double center_y = 0;
};

inline GroundTruthInstance make_instance(int class_id, BinaryMask mask) {
  GroundTruthInstance gt;
  gt.class_id = class_id;
  gt.mask = std::move(mask);
  if (!tight_box(gt.mask, &gt.box)) {
    throw std::invalid_argument("instance mask has no foreground pixels");
  }
  gt.center_x = gt.box.x + gt.box.w / 2.0;
  gt.center_y = gt.box.y + gt.box.h / 2.0;
  return gt;
}

// Largest Gaussian radius such that a box perturbed by r in each of three
// ways (translated diagonally, grown by r per side, shrunk by r per side)
// still overlaps the original with IoU >= min_overlap. radius -> 0 as
// min_overlap -> 1.
inline double gaussian_radius(double box_h, double box_w, double min_overlap = 0.7) {
  const double o = min_overlap;
  const double s = box_h + box_w;
  const double a = box_h * box_w;

  // translated: (w-r)(h-r) / (2wh - (w-r)(h-r)) >= o
  double c1 = a * (1 - o) / (1 + o);
  double r1 = (s - std::sqrt(std::max(0.0, s * s - 4 * c1))) / 2;

  // grown: wh / (w+2r)(h+2r) >= o
  double c2 = a * (o - 1) / o;
  double r2 = (-2 * s + std::sqrt(std::max(0.0, 4 * s * s - 16 * c2))) / 8;

  // shrunk: (w-2r)(h-2r) / wh >= o
  double c3 = a * (1 - o);
  double r3 = (2 * s - std::sqrt(std::max(0.0, 4 * s * s - 16 * c3))) / 8;

  return std::max(0.0, std::min({r1, r2, r3}));
}

// Per-object targets for the offset, size, and mask losses.
struct ObjectTargets {
  int class_id = 0;
  int cell_x = 0;  // integer center cell on the stride-R map
  int cell_y = 0;
  double offset_x = 0;  // fractional part of center / R, in [0, 1)
  double offset_y = 0;
  double size_h = 0;  // box size in input pixels
  double size_w = 0;
  Box box;                // tight box in input pixels
  BinaryMask mask_target;  // GT mask on the ceil(h/R) x ceil(w/R) box grid
};

// Rows, columns of the feature-stride grid spanning a box.
inline void box_grid_dims(const Box& box, int stride, int* gh, int* gw) {
  *gh = std::max(1, static_cast<int>(std::ceil(box.h / stride)));
  *gw = std::max(1, static_cast<int>(std::ceil(box.w / stride)));
}

// GT mask cropped to its tight box and downsampled to the feature-stride box
// grid by area-majority vote (cell is foreground iff >= 50% of its pixels are).
inline BinaryMask encode_mask_target(const GroundTruthInstance& gt, int stride) {
  int gh, gw;
  box_grid_dims(gt.box, stride, &gh, &gw);
  const int bx = static_cast<int>(gt.box.x);
  const int by = static_cast<int>(gt.box.y);
  const int bh = static_cast<int>(gt.box.h);
  const int bw = static_cast<int>(gt.box.w);
  BinaryMask out(gh, gw);
  for (int i = 0; i < gh; ++i) {
    int y_begin = by + static_cast<int>(static_cast<std::int64_t>(i) * bh / gh);
    int y_end = by + static_cast<int>(static_cast<std::int64_t>(i + 1) * bh / gh);
    for (int j = 0; j < gw; ++j) {
      int x_begin = bx + static_cast<int>(static_cast<std::int64_t>(j) * bw / gw);
      int x_end = bx + static_cast<int>(static_cast<std::int64_t>(j + 1) * bw / gw);
      int fg = 0, total = 0;
      for (int y = y_begin; y < y_end; ++y) {
        for (int x = x_begin; x < x_end; ++x) {
          ++total;
          fg += gt.mask.at(y, x) != 0;
        }
      }
      out.at(i, j) = (total > 0 && 2 * fg >= total) ? 1 : 0;
    }
  }
  return out;
}

// Offset and size targets at output stride R. The integer center cell is
// floor(center / R); the offset is the fractional remainder.
inline std::vector<ObjectTargets> encode_offsets_sizes(
    const std::vector<GroundTruthInstance>& instances, int stride) {
  std::vector<ObjectTargets> out;
  out.reserve(instances.size());
  for (const auto& gt : instances) {
    ObjectTargets t;
    t.class_id = gt.class_id;
    t.box = gt.box;
    double fx = gt.center_x / stride;
    double fy = gt.center_y / stride;
    t.cell_x = static_cast<int>(std::floor(fx));
    t.cell_y = static_cast<int>(std::floor(fy));
    t.offset_x = fx - t.cell_x;
    t.offset_y = fy - t.cell_y;
    t.size_h = gt.box.h;
    t.size_w = gt.box.w;
    out.push_back(std::move(t));
  }
  return out;
}

// Ground-truth center heatmap, one channel per class. Each object splats an
// unnormalized Gaussian exp(-(dx^2+dy^2)/(2 sigma^2)) with sigma = radius/3 on
// its class channel (radius measured in feature cells); overlapping splats
// combine by elementwise max, so the peak cell is exactly 1.
template <typename T>
Tensor<T> render_heatmap(const std::vector<GroundTruthInstance>& instances, int num_classes,
                         int map_h, int map_w, int stride) {
  std::vector<T> cells(static_cast<std::size_t>(num_classes) * map_h * map_w, T(0));
  for (const auto& gt : instances) {
    int cx = static_cast<int>(std::floor(gt.center_x / stride));
    int cy = static_cast<int>(std::floor(gt.center_y / stride));
    if (cx < 0 || cx >= map_w || cy < 0 || cy >= map_h) {
      throw std::runtime_error(detail::cat("render_heatmap: center cell (", cx, ",", cy,
                                           ") outside ", map_h, "x", map_w, " map"));
    }
    if (gt.class_id < 0 || gt.class_id >= num_classes) {
      throw std::runtime_error(detail::cat("render_heatmap: class ", gt.class_id,
                                           " out of range [0,", num_classes, ")"));
    }
    double radius = gaussian_radius(gt.box.h / stride, gt.box.w / stride);
    double sigma = radius / 3.0;
    T* plane = cells.data() + static_cast<std::size_t>(gt.class_id) * map_h * map_w;
    for (int iy = 0; iy < map_h; ++iy) {
      for (int ix = 0; ix < map_w; ++ix) {
        double d2 = static_cast<double>(ix - cx) * (ix - cx) +
                    static_cast<double>(iy - cy) * (iy - cy);
        double v;
        if (sigma <= 0) {
          v = d2 == 0 ? 1.0 : 0.0;
        } else {
          v = std::exp(-d2 / (2 * sigma * sigma));
        }
        T& cell = plane[iy * map_w + ix];
        if (static_cast<T>(v) > cell) cell = static_cast<T>(v);
      }
    }
    plane[cy * map_w + cx] = T(1);
  }
  return Tensor<T>::from_data({num_classes, map_h, map_w}, std::move(cells));
}

// Everything the four losses consume for one image.
template <typename T>
struct TargetEncoding {
  Tensor<T> heatmap;  // (C, H, W), values in [0, 1]
  std::vector<ObjectTargets> objects;
};

template <typename T>
TargetEncoding<T> encode_targets(const std::vector<GroundTruthInstance>& instances,
                                 int num_classes, int map_h, int map_w, int stride) {
  TargetEncoding<T> enc;
  enc.heatmap = render_heatmap<T>(instances, num_classes, map_h, map_w, stride);
  enc.objects = encode_offsets_sizes(instances, stride);
  for (std::size_t k = 0; k < instances.size(); ++k) {
    enc.objects[k].mask_target = encode_mask_target(instances[k], stride);
  }
  return enc;
}

// Per-class union of GT masks rasterized to the stride-R grid by area-majority
// vote; target for the optional direct saliency supervision.
template <typename T>
Tensor<T> rasterize_class_masks(const std::vector<GroundTruthInstance>& instances,
                                int num_channels, int map_h, int map_w, int stride,
                                bool class_specific) {
  std::vector<T> cells(static_cast<std::size_t>(num_channels) * map_h * map_w, T(0));
  for (const auto& gt : instances) {
    int channel = class_specific ? gt.class_id : 0;
    T* plane = cells.data() + static_cast<std::size_t>(channel) * map_h * map_w;
    for (int i = 0; i < map_h; ++i) {
      for (int j = 0; j < map_w; ++j) {
        int fg = 0, total = 0;
        for (int y = i * stride; y < (i + 1) * stride && y < gt.mask.h; ++y) {
          for (int x = j * stride; x < (j + 1) * stride && x < gt.mask.w; ++x) {
            ++total;
            fg += gt.mask.at(y, x) != 0;
          }
        }
        if (total > 0 && 2 * fg >= total) plane[i * map_w + j] = T(1);
      }
    }
  }
  return Tensor<T>::from_data({num_channels, map_h, map_w}, std::move(cells));
}

}  // namespace centermask
