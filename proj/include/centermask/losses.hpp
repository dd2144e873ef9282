#pragma once

// The training objective: penalty-reduced focal loss on the center heatmap,
// L1 offset and size losses at center cells, binary cross entropy on the
// assembled instance masks, and optional direct saliency supervision. All BCE
// terms are computed from logits in fused log-sum-exp-stable form.

#include <cmath>
#include <string>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/model.hpp"
#include "centermask/targets.hpp"
#include "centermask/tensor.hpp"

namespace centermask {

enum class AblationMode { kFull, kShapeOnly, kSaliencyOnly };

struct LossConfig {
  double focal_alpha = 2.0;
  double focal_beta = 4.0;
  double weight_heatmap = 1.0;
  double weight_offset = 1.0;
  double weight_size = 0.1;
  double weight_mask = 1.0;
  bool aux_saliency = true;  // applied only with class-specific saliency
  double aux_weight = 1.0;
  AblationMode ablation = AblationMode::kFull;
};

struct LossBreakdown {
  double heatmap = 0;
  double offset = 0;
  double size = 0;
  double mask = 0;
  double aux = 0;
  double total = 0;
  int skipped_objects = 0;
};

// ---------------------------------------------------------------------------
// Fused BCE kernels (tape ops)
// ---------------------------------------------------------------------------

// Mean over elements of BCE(sigmoid(logits), target), target in [0, 1].
// Per element: softplus(x) - x * t; gradient: (sigmoid(x) - t) / n.
template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError(detail::cat("bce_with_logits_mean: logits ", detail::shape_str(logits.shape()),
                                 " vs target ", detail::shape_str(target.shape())));
  }
  const T* x = logits.data();
  const T* t = target.data();
  const std::int64_t n = logits.numel();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) acc += detail::stable_softplus(x[i]) - x[i] * t[i];
  auto out = detail::alloc_node<T>({1});
  out->data[0] = acc / static_cast<T>(n);
  return detail::finish_op<T>("bce_with_logits_mean", out, {&logits, &target},
                              [xn = logits.node(), tn = target.node(), on = out, n]() {
                                if (on->grad.empty() || !xn->requires_grad) return;
                                xn->ensure_grad();
                                const T g = on->grad[0] / static_cast<T>(n);
                                for (std::int64_t i = 0; i < n; ++i) {
                                  xn->grad[i] += g * (detail::stable_sigmoid(xn->data[i]) - tn->data[i]);
                                }
                              });
}

namespace detail {

// log(exp(u) + exp(v) + exp(u + v)) without overflow.
template <typename T>
T log_sum_exp3(T u, T v) {
  T m = std::max(std::max(u, v), u + v);
  return m + std::log(std::exp(u - m) + std::exp(v - m) + std::exp(u + v - m));
}

}  // namespace detail

// Mean over elements of BCE(sigmoid(a) * sigmoid(b), target). The product of
// sigmoids never reaches 0 or 1, so both log terms are expanded analytically:
//   log m       = -softplus(-a) - softplus(-b)
//   log (1 - m) = lse3(-a, -b) - softplus(-a) - softplus(-b)
// with lse3(u, v) = log(e^u + e^v + e^{u+v}). The gradient of the second term
// uses r_a = exp(-softplus(a) - lse3(-a, -b)), stable for any logit.
template <typename T>
Tensor<T> bce_sigmoid_product_mean(const Tensor<T>& a, const Tensor<T>& b,
                                   const Tensor<T>& target) {
  if (a.shape() != b.shape() || a.shape() != target.shape()) {
    throw ShapeError(detail::cat("bce_sigmoid_product_mean: shapes ", detail::shape_str(a.shape()),
                                 ", ", detail::shape_str(b.shape()), ", ",
                                 detail::shape_str(target.shape()), " must match"));
  }
  const T* ad = a.data();
  const T* bd = b.data();
  const T* td = target.data();
  const std::int64_t n = a.numel();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    T spa = detail::stable_softplus(-ad[i]);
    T spb = detail::stable_softplus(-bd[i]);
    T log_m = -(spa + spb);
    T log_1m = detail::log_sum_exp3(-ad[i], -bd[i]) + log_m;
    acc += -(td[i] * log_m + (T(1) - td[i]) * log_1m);
  }
  auto out = detail::alloc_node<T>({1});
  out->data[0] = acc / static_cast<T>(n);
  return detail::finish_op<T>(
      "bce_sigmoid_product_mean", out, {&a, &b, &target},
      [an = a.node(), bn = b.node(), tn = target.node(), on = out, n]() {
        if (on->grad.empty()) return;
        const T g = on->grad[0] / static_cast<T>(n);
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) {
          T av = an->data[i];
          T bv = bn->data[i];
          T t = tn->data[i];
          T lse = detail::log_sum_exp3(-av, -bv);
          if (an->requires_grad) {
            T r = std::exp(-detail::stable_softplus(av) - lse);
            an->grad[i] += g * (-t * detail::stable_sigmoid(-av) + (T(1) - t) * r);
          }
          if (bn->requires_grad) {
            T r = std::exp(-detail::stable_softplus(bv) - lse);
            bn->grad[i] += g * (-t * detail::stable_sigmoid(-bv) + (T(1) - t) * r);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Center heatmap focal loss
// ---------------------------------------------------------------------------

// Pixel-wise logistic regression with focal modulation:
//   y == 1:  -(1 - p)^alpha * log p
//   else:    -(1 - y)^beta * p^alpha * log(1 - p)
// summed over all cells and divided by max(num_objects, 1).
template <typename T>
Tensor<T> focal_center_loss(const Tensor<T>& heatmap_logits, const Tensor<T>& target,
                            int num_objects, double alpha = 2.0, double beta = 4.0) {
  if (heatmap_logits.shape() != target.shape()) {
    throw ShapeError(detail::cat("focal_center_loss: logits ",
                                 detail::shape_str(heatmap_logits.shape()), " vs target ",
                                 detail::shape_str(target.shape())));
  }
  const T* x = heatmap_logits.data();
  const T* y = target.data();
  const std::int64_t n = heatmap_logits.numel();
  const T norm = static_cast<T>(std::max(num_objects, 1));
  const T a = static_cast<T>(alpha);
  const T b = static_cast<T>(beta);

  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (y[i] == T(1)) {
      // -log p = softplus(-x); (1-p) = sigmoid(-x)
      acc += std::pow(detail::stable_sigmoid(-x[i]), a) * detail::stable_softplus(-x[i]);
    } else {
      acc += std::pow(T(1) - y[i], b) * std::pow(detail::stable_sigmoid(x[i]), a) *
             detail::stable_softplus(x[i]);
    }
  }
  auto out = detail::alloc_node<T>({1});
  out->data[0] = acc / norm;
  return detail::finish_op<T>(
      "focal_center_loss", out, {&heatmap_logits, &target},
      [xn = heatmap_logits.node(), yn = target.node(), on = out, n, norm, a, b]() {
        if (on->grad.empty() || !xn->requires_grad) return;
        xn->ensure_grad();
        const T g = on->grad[0] / norm;
        for (std::int64_t i = 0; i < n; ++i) {
          T x = xn->data[i];
          T p = detail::stable_sigmoid(x);
          T q = detail::stable_sigmoid(-x);  // 1 - p
          T d;
          if (yn->data[i] == T(1)) {
            d = -a * p * std::pow(q, a) * detail::stable_softplus(-x) - std::pow(q, a + T(1));
          } else {
            d = std::pow(T(1) - yn->data[i], b) * std::pow(p, a) *
                (a * q * detail::stable_softplus(x) + p);
          }
          xn->grad[i] += g * d;
        }
      });
}

// ---------------------------------------------------------------------------
// Offset and size losses (L1 at center cells)
// ---------------------------------------------------------------------------

namespace detail {

// Mean over objects of the L1 distance between the 2-channel map value at each
// object's center cell and a per-object 2-vector target.
template <typename T, typename TargetFn>
Tensor<T> center_cell_l1(const char* op, const Tensor<T>& map,
                         const std::vector<ObjectTargets>& objects, TargetFn target_of) {
  if (map.ndim() != 3 || map.dim(0) != 2) {
    throw ShapeError(cat(op, ": expected a (2,H,W) map, got ", shape_str(map.shape())));
  }
  if (objects.empty()) return Tensor<T>::scalar(T(0));
  const int h = map.dim(1), w = map.dim(2);
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (const auto& obj : objects) {
    if (obj.cell_x < 0 || obj.cell_x >= w || obj.cell_y < 0 || obj.cell_y >= h) {
      throw ShapeError(cat(op, ": center cell (", obj.cell_x, ",", obj.cell_y,
                           ") outside ", h, "x", w, " map"));
    }
    Tensor<T> pred = crop(map, obj.cell_y, obj.cell_x, 1, 1);  // (2,1,1)
    auto [t0, t1] = target_of(obj);
    Tensor<T> target = Tensor<T>::from_data({2, 1, 1}, {static_cast<T>(t0), static_cast<T>(t1)});
    total = add(total, sum(abs(sub(pred, target))));
  }
  return scale(total, T(1) / static_cast<T>(objects.size()));
}

}  // namespace detail

// L1 between the predicted sub-cell offsets at each center cell and the
// fractional center remainders; only center cells contribute.
template <typename T>
Tensor<T> offset_loss(const Tensor<T>& offset_map, const std::vector<ObjectTargets>& objects) {
  return detail::center_cell_l1<T>("offset_loss", offset_map, objects, [](const ObjectTargets& o) {
    return std::pair<double, double>(o.offset_x, o.offset_y);
  });
}

// L1 between the predicted box size (h, w) at each center cell and the true
// box size in input pixels.
template <typename T>
Tensor<T> size_loss(const Tensor<T>& size_map, const std::vector<ObjectTargets>& objects) {
  return detail::center_cell_l1<T>("size_loss", size_map, objects, [](const ObjectTargets& o) {
    return std::pair<double, double>(o.size_h, o.size_w);
  });
}

// ---------------------------------------------------------------------------
// Mask loss (assembled masks vs ground truth crops)
// ---------------------------------------------------------------------------

template <typename T>
struct MaskLossResult {
  Tensor<T> loss;
  int skipped = 0;
};

namespace detail {

template <typename T>
Tensor<T> mask_target_tensor(const BinaryMask& m) {
  std::vector<T> v(m.data.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.data[i] ? T(1) : T(0);
  return Tensor<T>::from_data({m.h, m.w}, std::move(v));
}

// Local shape logits for the object at (cell_y, cell_x): the S*S vector at
// that cell reshaped row-major to S x S and bilinearly resized to the box grid.
template <typename T>
Tensor<T> local_shape_at(const Tensor<T>& shape_map, int cell_y, int cell_x, int shape_size,
                         int gh, int gw) {
  Tensor<T> vec = crop(shape_map, cell_y, cell_x, 1, 1);  // (S*S, 1, 1)
  Tensor<T> grid = reshape(vec, {1, shape_size, shape_size});
  grid = bilinear_resize(grid, gh, gw);
  return reshape(grid, {gh, gw});
}

// Saliency logits for a box (given in input pixels) resampled onto the box
// grid; cells outside the map read a logit whose sigmoid is exactly 0.
template <typename T>
Tensor<T> saliency_on_box_grid(const Tensor<T>& saliency_map, const Box& box_px, int channel,
                               int stride, int gh, int gw) {
  Box feat;
  feat.x = box_px.x / stride;
  feat.y = box_px.y / stride;
  feat.h = box_px.h / stride;
  feat.w = box_px.w / stride;
  return sample_box_grid(saliency_map, channel, feat, gh, gw);
}

}  // namespace detail

// Eq-style mask supervision: per object, assemble the mask prediction on the
// ground-truth box grid (teacher forcing) and take BCE against the mask
// target; mean over objects. The ablation mode selects which branches feed
// the assembled mask.
template <typename T>
MaskLossResult<T> mask_loss(const Tensor<T>& shape_map, const Tensor<T>& saliency_map,
                            const std::vector<ObjectTargets>& objects, const ModelConfig& config,
                            AblationMode ablation) {
  MaskLossResult<T> result;
  result.loss = Tensor<T>::scalar(T(0));
  if (objects.empty()) return result;

  const int S = config.shape_size;
  const int stride = config.output_stride;
  const bool class_specific = config.saliency_mode == SaliencyMode::kClassSpecific;

  Tensor<T> total = Tensor<T>::scalar(T(0));
  int used = 0;
  for (const auto& obj : objects) {
    if (obj.box.h <= 0 || obj.box.w <= 0 || obj.mask_target.h < 1 || obj.mask_target.w < 1) {
      ++result.skipped;
      continue;
    }
    const int gh = obj.mask_target.h;
    const int gw = obj.mask_target.w;
    Tensor<T> target = detail::mask_target_tensor<T>(obj.mask_target);

    Tensor<T> per_object;
    if (ablation == AblationMode::kShapeOnly) {
      Tensor<T> local = detail::local_shape_at(shape_map, obj.cell_y, obj.cell_x, S, gh, gw);
      per_object = bce_with_logits_mean(local, target);
    } else if (ablation == AblationMode::kSaliencyOnly) {
      int channel = class_specific ? obj.class_id : 0;
      Tensor<T> sal = detail::saliency_on_box_grid(saliency_map, obj.box, channel, stride, gh, gw);
      per_object = bce_with_logits_mean(sal, target);
    } else {
      Tensor<T> local = detail::local_shape_at(shape_map, obj.cell_y, obj.cell_x, S, gh, gw);
      int channel = class_specific ? obj.class_id : 0;
      Tensor<T> sal = detail::saliency_on_box_grid(saliency_map, obj.box, channel, stride, gh, gw);
      per_object = bce_sigmoid_product_mean(local, sal, target);
    }
    total = add(total, per_object);
    ++used;
  }
  if (used == 0) return result;
  result.loss = scale(total, T(1) / static_cast<T>(used));
  return result;
}

// Direct saliency supervision: pixel-wise BCE between the saliency logits and
// the per-class union of GT masks rasterized at feature stride (Table 1f
// style; the paper applies it to the class-specific branch).
template <typename T>
Tensor<T> aux_saliency_loss(const Tensor<T>& saliency_logits,
                            const std::vector<GroundTruthInstance>& instances,
                            const ModelConfig& config) {
  Tensor<T> target =
      rasterize_class_masks<T>(instances, saliency_logits.dim(0), saliency_logits.dim(1),
                               saliency_logits.dim(2), config.output_stride,
                               config.saliency_mode == SaliencyMode::kClassSpecific);
  return bce_with_logits_mean(saliency_logits, target);
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

template <typename T>
struct TotalLoss {
  Tensor<T> value;  // scalar on the tape
  LossBreakdown parts;
};

namespace detail {

inline void check_loss_finite(const char* part, double v) {
  if (!std::isfinite(v)) {
    throw std::runtime_error(cat("training aborted: ", part, " loss is not finite"));
  }
}

}  // namespace detail

// Weighted sum of the four losses plus optional direct saliency supervision.
// The aux term is added only in class-specific mode, per its contract.
template <typename T>
TotalLoss<T> total_loss(const HeadOutputs<T>& outputs, const TargetEncoding<T>& targets,
                        const std::vector<GroundTruthInstance>& instances,
                        const ModelConfig& model_config, const LossConfig& loss_config) {
  const int num_objects = static_cast<int>(targets.objects.size());

  Tensor<T> l_heat = focal_center_loss(outputs.heatmap, targets.heatmap, num_objects,
                                       loss_config.focal_alpha, loss_config.focal_beta);
  Tensor<T> l_off = offset_loss(outputs.offset, targets.objects);
  Tensor<T> l_size = size_loss(outputs.size, targets.objects);
  MaskLossResult<T> l_mask =
      mask_loss(outputs.shape, outputs.saliency, targets.objects, model_config, loss_config.ablation);

  TotalLoss<T> result;
  result.parts.heatmap = static_cast<double>(l_heat.item());
  result.parts.offset = static_cast<double>(l_off.item());
  result.parts.size = static_cast<double>(l_size.item());
  result.parts.mask = static_cast<double>(l_mask.loss.item());
  result.parts.skipped_objects = l_mask.skipped;
  detail::check_loss_finite("heatmap", result.parts.heatmap);
  detail::check_loss_finite("offset", result.parts.offset);
  detail::check_loss_finite("size", result.parts.size);
  detail::check_loss_finite("mask", result.parts.mask);

  Tensor<T> total = scale(l_heat, static_cast<T>(loss_config.weight_heatmap));
  total = add(total, scale(l_off, static_cast<T>(loss_config.weight_offset)));
  total = add(total, scale(l_size, static_cast<T>(loss_config.weight_size)));
  total = add(total, scale(l_mask.loss, static_cast<T>(loss_config.weight_mask)));

  const bool aux_enabled = loss_config.aux_saliency &&
                           model_config.saliency_mode == SaliencyMode::kClassSpecific;
  if (aux_enabled) {
    Tensor<T> l_aux = aux_saliency_loss(outputs.saliency, instances, model_config);
    result.parts.aux = static_cast<double>(l_aux.item());
    detail::check_loss_finite("aux_saliency", result.parts.aux);
    total = add(total, scale(l_aux, static_cast<T>(loss_config.aux_weight)));
  }

  result.value = total;
  result.parts.total = static_cast<double>(total.item());
  detail::check_loss_finite("total", result.parts.total);
  return result;
}

}  // namespace centermask
