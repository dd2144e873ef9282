#pragma once

// Inference: windowed local maxima of the center heatmap, offset-refined
// centers, local shape + cropped saliency assembly, and thresholded pasting
// into full-image masks. No NMS anywhere; at most top_k detections.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/losses.hpp"
#include "centermask/model.hpp"
#include "centermask/targets.hpp"
#include "centermask/tensor.hpp"

namespace centermask {

struct DecodeConfig {
  int top_k = 100;
  int window = 3;  // odd, >= 1
  double mask_threshold = 0.4;
  double score_threshold = 0.0;
  AblationMode ablation = AblationMode::kFull;

  void validate() const {
    if (top_k < 1) throw ShapeError("decode config: top_k must be >= 1");
    if (window < 1 || window % 2 == 0) throw ShapeError("decode config: window must be odd and >= 1");
    if (!(mask_threshold > 0 && mask_threshold < 1)) {
      throw ShapeError("decode config: mask_threshold must be in (0, 1)");
    }
  }
};

struct Peak {
  int class_id = 0;
  int cell_y = 0;
  int cell_x = 0;
  double score = 0;  // sigmoid of the heatmap logit
};

struct Detection {
  int class_id = 0;
  double score = 0;
  double center_x = 0;  // input pixels, offset-refined
  double center_y = 0;
  Box box;          // input pixels, may extend past the image; mask is clipped
  BinaryMask mask;  // full-image canvas
};

// A cell is a peak iff its score is >= every in-bounds neighbor in the
// window x window neighborhood on its own channel. Peaks from all channels are
// sorted by score descending (ties toward the lower flat index), filtered by
// score_threshold, and truncated to top_k.
template <typename T>
std::vector<Peak> extract_peaks(const Tensor<T>& heatmap_logits, const DecodeConfig& cfg) {
  cfg.validate();
  if (heatmap_logits.ndim() != 3) {
    throw ShapeError(detail::cat("extract_peaks: expected (C,H,W) logits, got ",
                                 detail::shape_str(heatmap_logits.shape())));
  }
  const int ch = heatmap_logits.dim(0), h = heatmap_logits.dim(1), w = heatmap_logits.dim(2);
  const int r = cfg.window / 2;
  const T* d = heatmap_logits.data();

  struct Candidate {
    T logit;
    std::int64_t flat;  // channel-major flat index; the deterministic tie order
  };
  std::vector<Candidate> candidates;
  for (int c = 0; c < ch; ++c) {
    const T* plane = d + static_cast<std::int64_t>(c) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const T v = plane[y * w + x];
        bool is_peak = true;
        for (int dy = -r; dy <= r && is_peak; ++dy) {
          const int ny = y + dy;
          if (ny < 0 || ny >= h) continue;
          for (int dx = -r; dx <= r; ++dx) {
            const int nx = x + dx;
            if (nx < 0 || nx >= w) continue;
            if (plane[ny * w + nx] > v) {
              is_peak = false;
              break;
            }
          }
        }
        if (is_peak) {
          candidates.push_back({v, (static_cast<std::int64_t>(c) * h + y) * w + x});
        }
      }
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.logit != b.logit) return a.logit > b.logit;
    return a.flat < b.flat;
  });

  std::vector<Peak> peaks;
  peaks.reserve(std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(cfg.top_k)));
  for (const auto& cand : candidates) {
    if (static_cast<int>(peaks.size()) >= cfg.top_k) break;
    double score = detail::stable_sigmoid(static_cast<double>(cand.logit));
    if (score < cfg.score_threshold) break;  // sorted, so the rest are lower
    Peak p;
    p.class_id = static_cast<int>(cand.flat / (static_cast<std::int64_t>(h) * w));
    std::int64_t rem = cand.flat % (static_cast<std::int64_t>(h) * w);
    p.cell_y = static_cast<int>(rem / w);
    p.cell_x = static_cast<int>(rem % w);
    p.score = score;
    peaks.push_back(p);
  }
  return peaks;
}

// Center in input pixels: (cell + predicted sub-cell offset) * stride.
template <typename T>
std::pair<double, double> refine_center(const Peak& peak, const Tensor<T>& offset_map, int stride) {
  const int h = offset_map.dim(1), w = offset_map.dim(2);
  if (peak.cell_x < 0 || peak.cell_x >= w || peak.cell_y < 0 || peak.cell_y >= h) {
    throw ShapeError(detail::cat("refine_center: peak cell (", peak.cell_x, ",", peak.cell_y,
                                 ") outside ", h, "x", w, " map"));
  }
  const T* d = offset_map.data();
  double ox = static_cast<double>(d[static_cast<std::int64_t>(peak.cell_y) * w + peak.cell_x]);
  double oy = static_cast<double>(
      d[static_cast<std::int64_t>(h) * w + static_cast<std::int64_t>(peak.cell_y) * w + peak.cell_x]);
  return {(peak.cell_x + ox) * stride, (peak.cell_y + oy) * stride};
}

// Predicted box size at the peak cell, clamped to >= 1 pixel per side.
template <typename T>
std::pair<double, double> size_at_peak(const Peak& peak, const Tensor<T>& size_map) {
  const int h = size_map.dim(1), w = size_map.dim(2);
  const T* d = size_map.data();
  double bh = static_cast<double>(d[static_cast<std::int64_t>(peak.cell_y) * w + peak.cell_x]);
  double bw = static_cast<double>(
      d[static_cast<std::int64_t>(h) * w + static_cast<std::int64_t>(peak.cell_y) * w + peak.cell_x]);
  return {std::max(1.0, bh), std::max(1.0, bw)};
}

// The S*S shape vector at the peak, as row-major S x S logits resized to the
// object's feature-stride box grid.
template <typename T>
Tensor<T> build_local_shape(const Tensor<T>& shape_map, const Peak& peak, int shape_size, int gh,
                            int gw) {
  return detail::local_shape_at(shape_map, peak.cell_y, peak.cell_x, shape_size, gh, gw);
}

// Saliency logits for the box on the same grid as the local shape. In the
// class-specific setting the channel of the predicted category is cropped;
// cells outside the image come back as hard-off logits.
template <typename T>
Tensor<T> crop_saliency(const Tensor<T>& saliency_map, const Box& box_px, int class_id,
                        SaliencyMode mode, int stride, int gh, int gw) {
  int channel = mode == SaliencyMode::kClassSpecific ? class_id : 0;
  return detail::saliency_on_box_grid(saliency_map, box_px, channel, stride, gh, gw);
}

namespace detail {

template <typename T>
Tensor<T> assembled_probability(const Tensor<T>& local, const Tensor<T>& saliency_grid,
                                AblationMode ablation) {
  switch (ablation) {
    case AblationMode::kShapeOnly:
      return sigmoid(local);
    case AblationMode::kSaliencyOnly:
      return sigmoid(saliency_grid);
    case AblationMode::kFull:
    default:
      return mul(sigmoid(local), sigmoid(saliency_grid));
  }
}

}  // namespace detail

// Thresholds a probability grid at mask_threshold and pastes it into an
// all-zero canvas, nearest-neighbor, covering the pixels whose centers fall
// inside the (image-clipped) box.
template <typename T>
BinaryMask paste_mask(const Tensor<T>& prob_grid, const Box& box, double mask_threshold,
                      int canvas_h, int canvas_w) {
  const int gh = prob_grid.dim(0), gw = prob_grid.dim(1);
  BinaryMask out(canvas_h, canvas_w);
  const T* p = prob_grid.data();
  int y_begin = std::max(0, static_cast<int>(std::floor(box.y)));
  int y_end = std::min(canvas_h, static_cast<int>(std::ceil(box.y2())));
  int x_begin = std::max(0, static_cast<int>(std::floor(box.x)));
  int x_end = std::min(canvas_w, static_cast<int>(std::ceil(box.x2())));
  for (int y = y_begin; y < y_end; ++y) {
    double cy = y + 0.5;
    if (cy < box.y || cy >= box.y2()) continue;
    int gi = std::min(gh - 1, static_cast<int>((cy - box.y) / box.h * gh));
    for (int x = x_begin; x < x_end; ++x) {
      double cx = x + 0.5;
      if (cx < box.x || cx >= box.x2()) continue;
      int gj = std::min(gw - 1, static_cast<int>((cx - box.x) / box.w * gw));
      if (static_cast<double>(p[gi * gw + gj]) >= mask_threshold) out.at(y, x) = 1;
    }
  }
  return out;
}

// sigmoid(L) ⊙ sigmoid(G) (or a single branch, per the ablation mode),
// thresholded and pasted onto the full canvas.
template <typename T>
BinaryMask assemble(const Tensor<T>& local, const Tensor<T>& saliency_grid,
                    const DecodeConfig& cfg, const Box& box, int canvas_h, int canvas_w) {
  Tensor<T> prob = detail::assembled_probability(local, saliency_grid, cfg.ablation);
  return paste_mask(prob, box, cfg.mask_threshold, canvas_h, canvas_w);
}

// Full decode for one image's head outputs: a pure function of the maps and
// config, emitting at most top_k detections sorted by score descending.
template <typename T>
std::vector<Detection> decode_instances(const HeadOutputs<T>& outputs, const ModelConfig& config,
                                        const DecodeConfig& cfg) {
  cfg.validate();
  const int stride = config.output_stride;
  const int canvas_h = config.input_h;
  const int canvas_w = config.input_w;

  std::vector<Peak> peaks = extract_peaks(outputs.heatmap, cfg);
  std::vector<Detection> detections;
  detections.reserve(peaks.size());
  for (const Peak& peak : peaks) {
    auto [cx, cy] = refine_center(peak, outputs.offset, stride);
    auto [bh, bw] = size_at_peak(peak, outputs.size);
    Box box{cx - bw / 2, cy - bh / 2, bh, bw};
    if (box.x2() <= 0 || box.y2() <= 0 || box.x >= canvas_w || box.y >= canvas_h) {
      continue;  // no image intersection
    }
    int gh, gw;
    box_grid_dims(box, stride, &gh, &gw);

    Tensor<T> prob;
    if (cfg.ablation == AblationMode::kShapeOnly) {
      prob = sigmoid(build_local_shape(outputs.shape, peak, config.shape_size, gh, gw));
    } else if (cfg.ablation == AblationMode::kSaliencyOnly) {
      prob = sigmoid(crop_saliency(outputs.saliency, box, peak.class_id, config.saliency_mode,
                                   stride, gh, gw));
    } else {
      Tensor<T> local = build_local_shape(outputs.shape, peak, config.shape_size, gh, gw);
      Tensor<T> sal =
          crop_saliency(outputs.saliency, box, peak.class_id, config.saliency_mode, stride, gh, gw);
      prob = mul(sigmoid(local), sigmoid(sal));
    }

    Detection det;
    det.class_id = peak.class_id;
    det.score = peak.score;
    det.center_x = cx;
    det.center_y = cy;
    det.box = box;
    det.mask = paste_mask(prob, box, cfg.mask_threshold, canvas_h, canvas_w);
    detections.push_back(std::move(det));
  }
  return detections;
}

// ---------------------------------------------------------------------------
// Run-length mask encoding for detection records: uncompressed counts,
// row-major scan, starting with the run of zeros.
// ---------------------------------------------------------------------------

inline std::vector<std::int64_t> rle_encode(const BinaryMask& mask) {
  std::vector<std::int64_t> counts;
  std::uint8_t current = 0;
  std::int64_t run = 0;
  for (std::uint8_t v : mask.data) {
    std::uint8_t bit = v ? 1 : 0;
    if (bit == current) {
      ++run;
    } else {
      counts.push_back(run);
      current = bit;
      run = 1;
    }
  }
  counts.push_back(run);
  return counts;
}

inline BinaryMask rle_decode(int h, int w, const std::vector<std::int64_t>& counts) {
  BinaryMask mask(h, w);
  std::int64_t total = static_cast<std::int64_t>(h) * w;
  std::int64_t pos = 0;
  std::uint8_t bit = 0;
  for (std::int64_t run : counts) {
    if (run < 0 || pos + run > total) throw IoError("rle_decode: counts exceed mask size");
    if (bit) std::fill(mask.data.begin() + pos, mask.data.begin() + pos + run, std::uint8_t(1));
    pos += run;
    bit ^= 1;
  }
  if (pos != total) throw IoError("rle_decode: counts do not cover the mask");
  return mask;
}

}  // namespace centermask
