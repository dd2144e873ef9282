#pragma once

// Small fully convolutional backbone plus the five prediction heads. All
// heads share the stride-R output resolution; heatmap and saliency emit
// logits, offset and size emit raw values.

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/tensor.hpp"

namespace centermask {

enum class SaliencyMode { kClassAgnostic, kClassSpecific };

struct ModelConfig {
  int num_classes = 3;
  int shape_size = 32;   // S: the local shape vector is S*S long
  int output_stride = 4;  // R
  SaliencyMode saliency_mode = SaliencyMode::kClassSpecific;
  std::vector<int> backbone_channels = {16, 32, 48, 64};  // one per stride-2 stage
  int head_channels = 32;
  int input_h = 128;
  int input_w = 128;

  int map_h() const { return input_h / output_stride; }
  int map_w() const { return input_w / output_stride; }
  int saliency_channels() const {
    return saliency_mode == SaliencyMode::kClassSpecific ? num_classes : 1;
  }

  void validate() const {
    if (num_classes < 1) throw ShapeError("model config: num_classes must be >= 1");
    if (shape_size < 2) throw ShapeError("model config: shape_size must be >= 2");
    if (backbone_channels.size() != 4) {
      throw ShapeError("model config: backbone_channels must list 4 stage widths");
    }
    if (head_channels < 1) throw ShapeError("model config: head_channels must be >= 1");
    bool stride_ok = output_stride == 2 || output_stride == 4 || output_stride == 8 ||
                     output_stride == 16;
    if (!stride_ok) throw ShapeError("model config: output_stride must be one of 2, 4, 8, 16");
    if (input_h % output_stride != 0 || input_w % output_stride != 0) {
      throw ShapeError(detail::cat("model config: output_stride ", output_stride,
                                   " must divide input size ", input_h, "x", input_w));
    }
    if (input_h < output_stride * 4 || input_w < output_stride * 4) {
      throw ShapeError("model config: input too small for the 4-stage backbone");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct HeadOutputs {
  Tensor<T> heatmap;   // (C, H, W) logits
  Tensor<T> offset;    // (2, H, W): channel 0 = x offset, 1 = y offset
  Tensor<T> shape;     // (S*S, H, W)
  Tensor<T> size;      // (2, H, W): channel 0 = box h, 1 = box w, input pixels
  Tensor<T> saliency;  // (1 or C, H, W) logits
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;  // (out, in, k, k)
  Tensor<T> bias;    // (out)
};

template <typename T>
struct HeadLayers {
  ConvLayer<T> hidden;  // 3x3
  ConvLayer<T> out;     // 1x1
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  std::array<ConvLayer<T>, 4> stages;  // 3x3 stride-2 convs
  ConvLayer<T> up;                     // 3x3 conv applied after upsampling to stride R
  ConvLayer<T> lateral;                // 1x1 skip conv from the stride-R stage
  HeadLayers<T> heatmap_head, offset_head, shape_head, size_head, saliency_head;

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto add = [&out](const std::string& name, const ConvLayer<T>& layer) {
      out.emplace_back(name + ".weight", layer.weight);
      out.emplace_back(name + ".bias", layer.bias);
    };
    for (std::size_t i = 0; i < stages.size(); ++i) add("stage" + std::to_string(i), stages[i]);
    add("up", up);
    add("lateral", lateral);
    auto add_head = [&add](const std::string& name, const HeadLayers<T>& head) {
      add(name + ".hidden", head.hidden);
      add(name + ".out", head.out);
    };
    add_head("heatmap", heatmap_head);
    add_head("offset", offset_head);
    add_head("shape", shape_head);
    add_head("size", size_head);
    add_head("saliency", saliency_head);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }
};

namespace detail {

template <typename T>
ConvLayer<T> init_conv(Rng* rng, int out_ch, int in_ch, int k) {
  std::vector<T> w(static_cast<std::size_t>(out_ch) * in_ch * k * k);
  double std_dev = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
  for (auto& v : w) v = static_cast<T>(rng->normal() * std_dev);
  ConvLayer<T> layer;
  layer.weight = Tensor<T>::param({out_ch, in_ch, k, k}, std::move(w));
  layer.bias = Tensor<T>::param({out_ch}, std::vector<T>(static_cast<std::size_t>(out_ch), T(0)));
  return layer;
}

}  // namespace detail

// Builds deterministically initialized parameters. The heatmap output bias
// starts at logit(0.01) = -log(99) so the initial heatmap is near-empty.
template <typename T>
ModelParams<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0x6d6f64656cull));
  ModelParams<T> p;
  p.config = config;

  const auto& ch = config.backbone_channels;
  int in_ch = 3;
  for (int i = 0; i < 4; ++i) {
    p.stages[static_cast<std::size_t>(i)] = detail::init_conv<T>(&rng, ch[static_cast<std::size_t>(i)], in_ch, 3);
    in_ch = ch[static_cast<std::size_t>(i)];
  }
  // The skip connection taps the stage whose stride equals the output stride.
  int tap = 0;
  for (int s = config.output_stride; s > 2; s /= 2) ++tap;
  int fuse_ch = ch[static_cast<std::size_t>(tap)];
  p.up = detail::init_conv<T>(&rng, fuse_ch, ch[3], 3);
  p.lateral = detail::init_conv<T>(&rng, fuse_ch, fuse_ch, 1);

  auto make_head = [&rng, &config, fuse_ch](int out_ch) {
    HeadLayers<T> head;
    head.hidden = detail::init_conv<T>(&rng, config.head_channels, fuse_ch, 3);
    head.out = detail::init_conv<T>(&rng, out_ch, config.head_channels, 1);
    return head;
  };
  p.heatmap_head = make_head(config.num_classes);
  p.offset_head = make_head(2);
  p.shape_head = make_head(config.shape_size * config.shape_size);
  p.size_head = make_head(2);
  p.saliency_head = make_head(config.saliency_channels());

  const double prior = 0.01;
  T bias_init = static_cast<T>(-std::log((1.0 - prior) / prior));
  auto& hb = p.heatmap_head.out.bias.mutable_values();
  for (auto& v : hb) v = bias_init;
  return p;
}

namespace detail {

template <typename T>
Tensor<T> conv_relu(const Tensor<T>& x, const ConvLayer<T>& layer, int stride, int padding) {
  return relu(conv2d(x, layer.weight, layer.bias, stride, padding));
}

template <typename T>
Tensor<T> run_head(const Tensor<T>& feat, const HeadLayers<T>& head) {
  Tensor<T> hidden = conv_relu(feat, head.hidden, 1, 1);
  return conv2d(hidden, head.out.weight, head.out.bias, 1, 0);
}

// (1, C, H, W) -> (C, H, W)
template <typename T>
Tensor<T> squeeze_batch(const Tensor<T>& x) {
  return reshape(x, {x.dim(1), x.dim(2), x.dim(3)});
}

}  // namespace detail

// Forward pass over one image (3, H_in, W_in). Pure: parameters are not
// mutated; when a tape is active the outputs carry gradients.
template <typename T>
HeadOutputs<T> forward(const ModelParams<T>& params, const Tensor<T>& image) {
  const ModelConfig& cfg = params.config;
  if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.input_h ||
      image.dim(2) != cfg.input_w) {
    throw ShapeError(detail::cat("forward: expected image (3,", cfg.input_h, ",", cfg.input_w,
                                 "), got ", detail::shape_str(image.shape())));
  }
  Tensor<T> x = reshape(image, {1, 3, cfg.input_h, cfg.input_w});

  std::vector<Tensor<T>> stage_out;
  stage_out.reserve(4);
  for (const auto& stage : params.stages) {
    x = detail::conv_relu(x, stage, 2, 1);
    stage_out.push_back(x);
  }

  int tap = 0;
  for (int s = cfg.output_stride; s > 2; s /= 2) ++tap;
  const Tensor<T>& skip_src = stage_out[static_cast<std::size_t>(tap)];

  Tensor<T> deep = detail::squeeze_batch(stage_out[3]);
  deep = bilinear_resize(deep, cfg.map_h(), cfg.map_w());
  deep = reshape(deep, {1, deep.dim(0), cfg.map_h(), cfg.map_w()});
  Tensor<T> trunk = conv2d(deep, params.up.weight, params.up.bias, 1, 1);
  Tensor<T> lateral = conv2d(skip_src, params.lateral.weight, params.lateral.bias, 1, 0);
  Tensor<T> feat = relu(add(trunk, lateral));

  HeadOutputs<T> out;
  out.heatmap = detail::squeeze_batch(detail::run_head(feat, params.heatmap_head));
  out.offset = detail::squeeze_batch(detail::run_head(feat, params.offset_head));
  out.shape = detail::squeeze_batch(detail::run_head(feat, params.shape_head));
  out.size = detail::squeeze_batch(detail::run_head(feat, params.size_head));
  out.saliency = detail::squeeze_batch(detail::run_head(feat, params.saliency_head));
  return out;
}

}  // namespace centermask
