// Acceptance suite: one pass/fail line per criterion, exit code = number of
// failures. Heavier criteria (the overfit run and the three-way ablation
// comparison) train real models, so the binary takes tens of minutes on a
// small machine.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "centermask/checkpoint.hpp"
#include "centermask/data.hpp"
#include "centermask/decode.hpp"
#include "centermask/eval.hpp"
#include "centermask/losses.hpp"
#include "centermask/model.hpp"
#include "centermask/targets.hpp"
#include "centermask/tensor.hpp"
#include "centermask/train.hpp"
#include "oracles.hpp"

using namespace centermask;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

Tensor<double> random_leaf(std::vector<int> shape, Rng* rng, double lo, double hi,
                           bool kink_free = false) {
  std::vector<double> data(static_cast<std::size_t>(detail::numel_of(shape)));
  for (auto& v : data) {
    if (kink_free) {
      v = rng->uniform(0.1, std::max(0.2, hi));
      if (rng->uniform() < 0.5) v = -v;
    } else {
      v = rng->uniform(lo, hi);
    }
  }
  return Tensor<double>::param(std::move(shape), std::move(data));
}

ObjectTargets random_object(Rng* rng, int map_h, int map_w, int stride) {
  ObjectTargets t;
  t.class_id = rng->uniform_int(0, 1);
  t.cell_x = rng->uniform_int(0, map_w - 1);
  t.cell_y = rng->uniform_int(0, map_h - 1);
  t.offset_x = rng->uniform(0.05, 0.95);
  t.offset_y = rng->uniform(0.05, 0.95);
  double h = rng->uniform(stride, stride * (map_h - 1));
  double w = rng->uniform(stride, stride * (map_w - 1));
  double x0 = rng->uniform(0, map_w * stride - w);
  double y0 = rng->uniform(0, map_h * stride - h);
  t.box = Box{x0, y0, h, w};
  t.size_h = h;
  t.size_w = w;
  int gh, gw;
  box_grid_dims(t.box, stride, &gh, &gw);
  t.mask_target = BinaryMask(gh, gw);
  for (auto& v : t.mask_target.data) v = rng->uniform() < 0.6 ? 1 : 0;
  return t;
}

// --- 1. gradient suite -------------------------------------------------------

Outcome gradient_suite() {
  Outcome out;
  double start = now_seconds();
  Rng rng(0xace);
  double worst = 0;
  std::int64_t total_checked = 0;
  auto run = [&](const char* name, const std::function<oracles::GradCheckResult()>& one) {
    for (int k = 0; k < 20 && out.pass; ++k) {
      auto r = one();
      total_checked += r.checked;
      worst = std::max(worst, r.max_rel_err);
      if (!r.ok) {
        out.pass = false;
        out.detail = detail::cat(name, " config ", k, " rel err ", r.max_rel_err);
      }
    }
  };

  run("conv2d", [&] {
    int n = rng.uniform_int(1, 2), ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    int h = rng.uniform_int(3, 6), w = rng.uniform_int(3, 6);
    int k = rng.uniform_int(1, 3), stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 1);
    if (h + 2 * pad < k) pad = 1;
    auto x = random_leaf({n, ci, h, w}, &rng, -1, 1);
    auto wt = random_leaf({co, ci, k, k}, &rng, -0.7, 0.7);
    auto b = random_leaf({co}, &rng, -0.3, 0.3);
    return oracles::check_gradients({x, wt, b},
                                    [&] { return mean(mul(conv2d(x, wt, b, stride, pad),
                                                          conv2d(x, wt, b, stride, pad))); });
  });
  run("relu", [&] {
    auto x = random_leaf({rng.uniform_int(2, 4), rng.uniform_int(2, 5)}, &rng, -1, 1, true);
    return oracles::check_gradients({x}, [&] { return sum(relu(x)); });
  });
  run("sigmoid", [&] {
    auto x = random_leaf({rng.uniform_int(2, 5)}, &rng, -4, 4);
    return oracles::check_gradients({x}, [&] { return sum(mul(sigmoid(x), sigmoid(x))); });
  });
  run("softplus", [&] {
    auto x = random_leaf({rng.uniform_int(2, 5)}, &rng, -4, 4);
    return oracles::check_gradients({x}, [&] { return mean(softplus(x)); });
  });
  run("abs", [&] {
    auto x = random_leaf({rng.uniform_int(2, 6)}, &rng, -2, 2, true);
    return oracles::check_gradients({x}, [&] { return sum(abs(x)); });
  });
  run("add/sub/mul broadcast", [&] {
    int c = rng.uniform_int(1, 3), h = rng.uniform_int(2, 4), w = rng.uniform_int(2, 4);
    auto x = random_leaf({c, h, w}, &rng, -1, 1);
    auto y = random_leaf({h, w}, &rng, -1, 1);
    auto s = random_leaf({1}, &rng, 0.5, 1.5);
    return oracles::check_gradients({x, y, s}, [&] {
      return sum(mul(sub(add(x, y), mul(x, s)), add(x, y)));
    });
  });
  run("bilinear_resize", [&] {
    int c = rng.uniform_int(1, 2);
    int h = rng.uniform_int(2, 5), w = rng.uniform_int(2, 5);
    int oh = rng.uniform_int(1, 8), ow = rng.uniform_int(1, 8);
    auto x = random_leaf({c, h, w}, &rng, -1, 1);
    return oracles::check_gradients(
        {x}, [&] { return sum(mul(bilinear_resize(x, oh, ow), bilinear_resize(x, oh, ow))); });
  });
  run("crop", [&] {
    int c = rng.uniform_int(1, 2), h = rng.uniform_int(3, 6), w = rng.uniform_int(3, 6);
    int ch = rng.uniform_int(1, h - 1), cw = rng.uniform_int(1, w - 1);
    int y0 = rng.uniform_int(0, h - ch), x0 = rng.uniform_int(0, w - cw);
    auto x = random_leaf({c, h, w}, &rng, -1, 1);
    return oracles::check_gradients(
        {x}, [&] { return sum(mul(crop(x, y0, x0, ch, cw), crop(x, y0, x0, ch, cw))); });
  });
  run("sample_box_grid", [&] {
    int h = rng.uniform_int(3, 6), w = rng.uniform_int(3, 6);
    auto x = random_leaf({2, h, w}, &rng, -1, 1);
    double bh = rng.uniform(1, h - 1.0), bw = rng.uniform(1, w - 1.0);
    Box box{rng.uniform(0, w - bw), rng.uniform(0, h - bh), bh, bw};
    int gh = rng.uniform_int(1, 4), gw = rng.uniform_int(1, 4);
    auto r1 = oracles::check_gradients({x}, [&] {
      auto g = sample_box_grid(x, 1, box, gh, gw);
      return sum(mul(g, g));
    });
    // Partially outside boxes: the hard-off cells are constant, so a bounded
    // loss keeps the finite differences well conditioned.
    Box hang{box.x - w * 0.5, box.y - h * 0.5, bh + h * 0.5, bw + w * 0.5};
    auto r2 = oracles::check_gradients({x}, [&] {
      return sum(sigmoid(sample_box_grid(x, 0, hang, gh + 1, gw + 1)));
    });
    r1.ok = r1.ok && r2.ok;
    r1.max_rel_err = std::max(r1.max_rel_err, r2.max_rel_err);
    r1.checked += r2.checked;
    return r1;
  });
  run("focal_center_loss", [&] {
    int c = 2, h = rng.uniform_int(2, 4), w = rng.uniform_int(2, 4);
    std::vector<double> y(static_cast<std::size_t>(c) * h * w, 0.0);
    y[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(y.size()) - 1))] = 1.0;
    for (auto& v : y) {
      if (v != 1.0 && rng.uniform() < 0.4) v = rng.uniform(0, 0.9);
    }
    auto target = Tensor<double>::from_data({c, h, w}, y);
    auto logits = random_leaf({c, h, w}, &rng, -3, 3);
    return oracles::check_gradients({logits},
                                    [&] { return focal_center_loss(logits, target, 1); });
  });
  run("offset_loss/size_loss", [&] {
    int map_h = rng.uniform_int(3, 5), map_w = rng.uniform_int(3, 5);
    std::vector<ObjectTargets> objects;
    int count = rng.uniform_int(1, 3);
    for (int i = 0; i < count; ++i) objects.push_back(random_object(&rng, map_h, map_w, 4));
    auto offset_map = random_leaf({2, map_h, map_w}, &rng, 0.02, 0.98);
    auto size_map = random_leaf({2, map_h, map_w}, &rng, 2, 14);
    auto r1 = oracles::check_gradients({offset_map}, [&] { return offset_loss(offset_map, objects); });
    auto r2 = oracles::check_gradients({size_map}, [&] { return size_loss(size_map, objects); });
    r1.ok = r1.ok && r2.ok;
    r1.max_rel_err = std::max(r1.max_rel_err, r2.max_rel_err);
    r1.checked += r2.checked;
    return r1;
  });
  run("mask_loss", [&] {
    ModelConfig cfg;
    cfg.num_classes = 2;
    cfg.shape_size = 4;
    cfg.output_stride = 4;
    cfg.input_h = cfg.input_w = 4 * rng.uniform_int(3, 5);
    cfg.saliency_mode = rng.uniform() < 0.5 ? SaliencyMode::kClassSpecific
                                            : SaliencyMode::kClassAgnostic;
    int map_h = cfg.map_h(), map_w = cfg.map_w();
    std::vector<ObjectTargets> objects;
    int count = rng.uniform_int(1, 2);
    for (int i = 0; i < count; ++i) objects.push_back(random_object(&rng, map_h, map_w, 4));
    auto shape_map = random_leaf({16, map_h, map_w}, &rng, -2, 2);
    auto sal_map = random_leaf({cfg.saliency_channels(), map_h, map_w}, &rng, -2, 2);
    AblationMode mode = static_cast<AblationMode>(rng.uniform_int(0, 2));
    return oracles::check_gradients({shape_map, sal_map}, [&] {
      return mask_loss(shape_map, sal_map, objects, cfg, mode).loss;
    });
  });
  run("aux_saliency_loss", [&] {
    ModelConfig cfg;
    cfg.num_classes = 2;
    cfg.output_stride = 4;
    cfg.input_h = cfg.input_w = 16;
    cfg.saliency_mode = SaliencyMode::kClassSpecific;
    BinaryMask m(16, 16);
    for (int y = 4; y < 12; ++y)
      for (int x = 2; x < 9; ++x) m.at(y, x) = 1;
    auto gt = make_instance(rng.uniform_int(0, 1), std::move(m));
    auto sal = random_leaf({2, 4, 4}, &rng, -3, 3);
    return oracles::check_gradients({sal}, [&] { return aux_saliency_loss(sal, {gt}, cfg); });
  });
  run("total_loss", [&] {
    ModelConfig cfg;
    cfg.num_classes = 2;
    cfg.shape_size = 4;
    cfg.output_stride = 4;
    cfg.input_h = cfg.input_w = 16;
    cfg.saliency_mode = SaliencyMode::kClassSpecific;
    std::vector<ObjectTargets> objects = {random_object(&rng, 4, 4, 4)};
    TargetEncoding<double> targets;
    std::vector<double> y(2 * 4 * 4, 0.0);
    y[static_cast<std::size_t>((objects[0].class_id * 4 + objects[0].cell_y) * 4 + objects[0].cell_x)] = 1.0;
    targets.heatmap = Tensor<double>::from_data({2, 4, 4}, y);
    targets.objects = objects;
    HeadOutputs<double> outputs;
    outputs.heatmap = random_leaf({2, 4, 4}, &rng, -3, 3);
    outputs.offset = random_leaf({2, 4, 4}, &rng, 0.05, 0.95);
    outputs.size = random_leaf({2, 4, 4}, &rng, 2, 14);
    outputs.shape = random_leaf({16, 4, 4}, &rng, -2, 2);
    outputs.saliency = random_leaf({2, 4, 4}, &rng, -2, 2);
    LossConfig loss_cfg;
    BinaryMask m(16, 16);
    m.at(5, 5) = m.at(5, 6) = m.at(6, 5) = m.at(6, 6) = 1;
    std::vector<GroundTruthInstance> instances = {make_instance(objects[0].class_id, std::move(m))};
    return oracles::check_gradients(
        {outputs.heatmap, outputs.offset, outputs.size, outputs.shape, outputs.saliency}, [&] {
          return total_loss(outputs, targets, instances, cfg, loss_cfg).value;
        });
  });

  double elapsed = now_seconds() - start;
  if (out.pass && elapsed >= 120.0) {
    out.pass = false;
    out.detail = detail::cat("runtime ", elapsed, "s exceeds 120s");
  }
  if (out.pass) {
    out.detail = detail::cat(total_checked, " partials checked, worst rel err ", worst, ", ",
                             elapsed, "s");
  }
  return out;
}

// --- 2. loss oracles ----------------------------------------------------------

Outcome loss_oracles() {
  Outcome out;
  auto expect = [&](const char* name, double got, double want, double tol = 1e-6) {
    if (std::fabs(got - want) > tol) {
      out.pass = false;
      out.detail += detail::cat(name, ": got ", got, ", want ", want, "; ");
    }
  };

  // Focal: exact scalar case plus a random map against the naive formula.
  expect("focal scalar",
         focal_center_loss(Tensor<double>::from_data({1, 1, 1}, {0.0}),
                           Tensor<double>::from_data({1, 1, 1}, {1.0}), 1)
             .item(),
         0.25 * std::log(2.0));
  Rng rng(0x10ca1);
  std::vector<double> logits(2 * 4 * 4), y(2 * 4 * 4, 0.0);
  for (auto& v : logits) v = rng.uniform(-4, 4);
  y[5] = 1.0;
  y[20] = 1.0;
  y[9] = 0.37;
  expect("focal map",
         focal_center_loss(Tensor<double>::from_data({2, 4, 4}, logits),
                           Tensor<double>::from_data({2, 4, 4}, y), 2)
             .item(),
         oracles::naive_focal_loss(logits, y, 2, 2.0, 4.0));

  // Offset: |0.5 - 0.25| with the y component exact.
  ObjectTargets obj;
  obj.cell_x = 1;
  obj.cell_y = 2;
  obj.offset_x = 0.25;
  obj.offset_y = 0.5;
  obj.box = Box{4, 8, 4, 4};
  obj.size_h = 10;
  obj.size_w = 20;
  obj.mask_target = BinaryMask(1, 1);
  obj.mask_target.data[0] = 1;
  std::vector<double> omap(2 * 4 * 4, 0.0);
  omap[2 * 4 + 1] = 0.5;
  omap[16 + 2 * 4 + 1] = 0.5;
  expect("offset", offset_loss(Tensor<double>::from_data({2, 4, 4}, omap), {obj}).item(), 0.25);

  // Size: |12-10| + |19-20| over one object.
  std::vector<double> smap(2 * 4 * 4, 0.0);
  smap[2 * 4 + 1] = 12;
  smap[16 + 2 * 4 + 1] = 19;
  expect("size", size_loss(Tensor<double>::from_data({2, 4, 4}, smap), {obj}).item(), 3.0);

  // Mask: zero logits on both branches against an all-ones 1x1 target.
  ModelConfig cfg;
  cfg.num_classes = 1;
  cfg.shape_size = 2;
  cfg.output_stride = 4;
  cfg.input_h = cfg.input_w = 16;
  cfg.saliency_mode = SaliencyMode::kClassAgnostic;
  ObjectTargets unit;
  unit.cell_x = unit.cell_y = 0;
  unit.box = Box{0, 0, 4, 4};
  unit.size_h = unit.size_w = 4;
  unit.mask_target = BinaryMask(1, 1);
  unit.mask_target.data[0] = 1;
  auto shape_zero = Tensor<double>::zeros({4, 4, 4});
  auto sal_zero = Tensor<double>::zeros({1, 4, 4});
  expect("mask product",
         mask_loss(shape_zero, sal_zero, {unit}, cfg, AblationMode::kFull).loss.item(),
         -std::log(0.25));
  auto shape_hot = Tensor<double>::full({4, 4, 4}, 20.0);
  auto sal_hot = Tensor<double>::full({1, 4, 4}, 20.0);
  expect("mask saturated",
         mask_loss(shape_hot, sal_hot, {unit}, cfg, AblationMode::kFull).loss.item(), 0.0);

  // Product BCE against the naive per-pixel oracle.
  std::vector<double> a(9), b(9), t(9);
  for (auto& v : a) v = rng.uniform(-5, 5);
  for (auto& v : b) v = rng.uniform(-5, 5);
  for (auto& v : t) v = rng.uniform() < 0.5 ? 0 : 1;
  expect("product bce",
         bce_sigmoid_product_mean(Tensor<double>::from_data({3, 3}, a),
                                  Tensor<double>::from_data({3, 3}, b),
                                  Tensor<double>::from_data({3, 3}, t))
             .item(),
         oracles::naive_product_bce(a, b, t));

  if (out.pass) out.detail = "focal, offset, size, mask fixtures all within 1e-6";
  return out;
}

// --- 3. decode oracle ---------------------------------------------------------

Outcome decode_oracle() {
  Outcome out;
  Rng rng(0xdec0de);
  int maps = 0;
  for (int window : {1, 3, 5}) {
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<float> vals(2 * 12 * 12);
      for (auto& v : vals) v = static_cast<float>(rng.uniform(-6, 6));
      auto logits = Tensor<float>::from_data({2, 12, 12}, vals);
      DecodeConfig cfg;
      cfg.window = window;
      cfg.top_k = 2 * 12 * 12;
      auto got = extract_peaks(logits, cfg);
      auto expect = oracles::scan_peaks(logits, window);
      std::set<std::tuple<int, int, int>> got_set, expect_set;
      for (auto& p : got) got_set.insert({p.class_id, p.cell_y, p.cell_x});
      for (auto& p : expect) expect_set.insert({p.c, p.y, p.x});
      if (got_set != expect_set) {
        out.pass = false;
        out.detail = detail::cat("window ", window, " trial ", trial, ": ", got.size(), " vs ",
                                 expect.size(), " peaks");
        return out;
      }
      ++maps;
    }
  }

  // Determinism and the top-100 cap on full decodes.
  ModelConfig cfg;
  cfg.num_classes = 2;
  cfg.shape_size = 4;
  cfg.input_h = cfg.input_w = 48;
  cfg.saliency_mode = SaliencyMode::kClassAgnostic;
  DecodeConfig dcfg;
  for (int trial = 0; trial < 5; ++trial) {
    HeadOutputs<float> outputs;
    auto rand_map = [&](std::vector<int> shape, double lo, double hi) {
      std::vector<float> vals(static_cast<std::size_t>(detail::numel_of(shape)));
      for (auto& v : vals) v = static_cast<float>(rng.uniform(lo, hi));
      return Tensor<float>::from_data(std::move(shape), std::move(vals));
    };
    outputs.heatmap = rand_map({2, 12, 12}, -6, 6);
    outputs.offset = rand_map({2, 12, 12}, 0, 1);
    outputs.size = rand_map({2, 12, 12}, 2, 30);
    outputs.shape = rand_map({16, 12, 12}, -4, 4);
    outputs.saliency = rand_map({1, 12, 12}, -4, 4);
    auto run1 = decode_instances(outputs, cfg, dcfg);
    auto run2 = decode_instances(outputs, cfg, dcfg);
    if (run1.size() > 100 || run1.size() != run2.size()) {
      out.pass = false;
      out.detail = "decode size/cap mismatch";
      return out;
    }
    for (std::size_t i = 0; i < run1.size(); ++i) {
      if (!(run1[i].mask == run2[i].mask) || run1[i].score != run2[i].score) {
        out.pass = false;
        out.detail = "decode is not deterministic";
        return out;
      }
    }
  }
  // A flat map yields exactly the cap.
  HeadOutputs<float> flat;
  flat.heatmap = Tensor<float>::full({2, 12, 12}, -20.f);
  flat.offset = Tensor<float>::zeros({2, 12, 12});
  flat.size = Tensor<float>::full({2, 12, 12}, 8.f);
  flat.shape = Tensor<float>::zeros({16, 12, 12});
  flat.saliency = Tensor<float>::zeros({1, 12, 12});
  if (decode_instances(flat, cfg, dcfg).size() != 100) {
    out.pass = false;
    out.detail = "flat map did not produce the top-100 cap";
    return out;
  }
  out.detail = detail::cat(maps, " heatmaps matched the scan oracle; decode deterministic, <= 100");
  return out;
}

// --- 4. assembly contract ------------------------------------------------------

Outcome assembly_contract() {
  Outcome out;
  Rng rng(0xa55);
  for (int trial = 0; trial < 50; ++trial) {
    int gh = rng.uniform_int(1, 6), gw = rng.uniform_int(1, 6);
    std::vector<float> lv(static_cast<std::size_t>(gh) * gw), gv(lv.size());
    for (auto& v : lv) v = static_cast<float>(rng.uniform(-6, 6));
    for (auto& v : gv) v = static_cast<float>(rng.uniform(-6, 6));
    auto L = Tensor<float>::from_data({gh, gw}, lv);
    auto G = Tensor<float>::from_data({gh, gw}, gv);
    Box box{1, 1, static_cast<double>(gh), static_cast<double>(gw)};
    DecodeConfig cfg;
    auto mask = assemble(L, G, cfg, box, gh + 2, gw + 2);
    auto swapped = assemble(G, L, cfg, box, gh + 2, gw + 2);
    if (!(mask == swapped)) {
      out.pass = false;
      out.detail = "assembly is not commutative";
      return out;
    }
    // Per-pixel product-and-threshold oracle on the unit-cell box layout.
    for (int i = 0; i < gh; ++i)
      for (int j = 0; j < gw; ++j) {
        double p = oracles::naive_sigmoid(lv[static_cast<std::size_t>(i) * gw + j]) *
                   oracles::naive_sigmoid(gv[static_cast<std::size_t>(i) * gw + j]);
        if (!(p > 0 && p < 1)) {
          out.pass = false;
          out.detail = "assembled probability left (0,1)";
          return out;
        }
        int want = p >= 0.4 ? 1 : 0;
        if (int(mask.at(1 + i, 1 + j)) != want) {
          out.pass = false;
          out.detail = detail::cat("threshold mismatch at ", i, ",", j, ": p=", p);
          return out;
        }
      }
  }
  out.detail = "sigmoid-product threshold matches per-pixel oracle; commutative; range (0,1)";
  return out;
}

// --- 5. target round trip -------------------------------------------------------

Outcome target_round_trip() {
  Outcome out;
  SceneConfig cfg;
  cfg.canvas_h = cfg.canvas_w = 64;
  int objects = 0;
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Scene scene = generate_scene(cfg, seed);
    auto enc = encode_targets<float>(scene.instances, cfg.num_classes, 16, 16, 4);
    for (std::size_t k = 0; k < enc.objects.size(); ++k) {
      const auto& t = enc.objects[k];
      double cx = (t.cell_x + t.offset_x) * 4;
      double cy = (t.cell_y + t.offset_y) * 4;
      double err = std::max(std::fabs(cx - scene.instances[k].center_x),
                            std::fabs(cy - scene.instances[k].center_y));
      worst = std::max(worst, err);
      if (err >= 1e-5) {
        out.pass = false;
        out.detail = detail::cat("seed ", seed, " object ", k, " center error ", err);
        return out;
      }
      float peak = enc.heatmap.values()[(static_cast<std::size_t>(t.class_id) * 16 + t.cell_y) * 16 +
                                        t.cell_x];
      if (peak != 1.0f) {
        out.pass = false;
        out.detail = detail::cat("seed ", seed, " object ", k, " peak value ", peak);
        return out;
      }
      ++objects;
    }
  }
  out.detail = detail::cat(objects, " objects round-tripped, worst center error ", worst);
  return out;
}

// --- 6. eval oracle --------------------------------------------------------------

Outcome eval_oracle() {
  Outcome out;
  Rng rng(0xe7a1);
  EvalConfig eval_cfg;
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<EvalDetection> dets;
    std::vector<EvalGroundTruth> gts;
    std::vector<oracles::OracleDet> odets;
    std::vector<oracles::OracleGt> ogts;
    int images = rng.uniform_int(1, 2);
    int num_classes = rng.uniform_int(1, 2);
    int gt_count = rng.uniform_int(1, 5);
    for (int g = 0; g < gt_count; ++g) {
      BinaryMask m(24, 24);
      int y = rng.uniform_int(0, 14), x = rng.uniform_int(0, 14);
      int h = rng.uniform_int(3, 9), w = rng.uniform_int(3, 9);
      for (int yy = y; yy < y + h; ++yy)
        for (int xx = x; xx < x + w; ++xx) m.at(yy, xx) = 1;
      int image_id = rng.uniform_int(0, images - 1);
      int cls = rng.uniform_int(0, num_classes - 1);
      gts.push_back({image_id, cls, m});
      ogts.push_back({image_id, cls, m});
      // Detections: one near-copy with jitter, sometimes an extra FP.
      if (rng.uniform() < 0.85) {
        BinaryMask d(24, 24);
        int dy = rng.uniform_int(-2, 2), dx = rng.uniform_int(-2, 2);
        for (int yy = 0; yy < 24; ++yy)
          for (int xx = 0; xx < 24; ++xx) {
            int sy = yy - dy, sx = xx - dx;
            if (sy >= 0 && sy < 24 && sx >= 0 && sx < 24 && m.at(sy, sx)) d.at(yy, xx) = 1;
          }
        double score = rng.uniform(0.1, 1.0);
        dets.push_back({image_id, cls, score, d});
        odets.push_back({image_id, cls, score, d});
      }
      if (rng.uniform() < 0.3) {
        BinaryMask fp(24, 24);
        fp.at(rng.uniform_int(0, 23), rng.uniform_int(0, 23)) = 1;
        double score = rng.uniform(0.05, 0.6);
        int cls_fp = rng.uniform_int(0, num_classes - 1);
        dets.push_back({image_id, cls_fp, score, fp});
        odets.push_back({image_id, cls_fp, score, fp});
      }
    }
    auto report = match_and_score(dets, gts, num_classes, 24, 24);
    double expect_ap = 0;
    for (double t : eval_cfg.iou_thresholds) {
      expect_ap += oracles::brute_force_map(odets, ogts, num_classes, t);
    }
    expect_ap /= static_cast<double>(eval_cfg.iou_thresholds.size());
    if (std::fabs(report.ap - expect_ap) > 1e-9) {
      out.pass = false;
      out.detail = detail::cat("trial ", trial, ": ap ", report.ap, " vs oracle ", expect_ap);
      return out;
    }
  }

  // Perfect detections score exactly one.
  std::vector<EvalGroundTruth> gts;
  BinaryMask m(16, 16);
  for (int y = 3; y < 10; ++y)
    for (int x = 5; x < 12; ++x) m.at(y, x) = 1;
  gts.push_back({0, 0, m});
  std::vector<EvalDetection> dets = {{0, 0, 1.0, m}};
  auto perfect = match_and_score(dets, gts, 1, 16, 16);
  if (perfect.ap != 1.0 || perfect.ap50 != 1.0) {
    out.pass = false;
    out.detail = detail::cat("perfect detections scored ", perfect.ap);
    return out;
  }
  out.detail = "30 randomized small-case reports match brute-force PR enumeration to 1e-9";
  return out;
}

// --- 7. overfit run ---------------------------------------------------------------

Outcome overfit_run() {
  Outcome out;
  double start = now_seconds();

  RunConfig cfg;
  cfg.model.num_classes = 3;
  cfg.model.shape_size = 32;
  cfg.model.input_h = cfg.model.input_w = 128;
  cfg.model.saliency_mode = SaliencyMode::kClassSpecific;
  cfg.scene.canvas_h = cfg.scene.canvas_w = 128;
  cfg.scene.num_classes = 3;
  cfg.optim.steps = 1200;
  cfg.optim.batch_size = 2;
  cfg.optim.learning_rate = 1e-3;
  cfg.optim.checkpoint_every = 0;
  cfg.train_scenes = 10;
  cfg.eval_scenes = 0;
  cfg.seed = 7;
  cfg.out_dir = (fs::temp_directory_path() / "centermask_acceptance_overfit").string();
  fs::remove_all(cfg.out_dir);

  auto result = train_model<float>(cfg);

  // Every logged step carries a finite total loss.
  bool all_finite = true;
  std::int64_t logged = 0;
  {
    std::ifstream metrics(fs::path(cfg.out_dir) / "metrics.jsonl");
    std::string line;
    while (std::getline(metrics, line)) {
      if (line.empty()) continue;
      ++logged;
      if (!std::isfinite(nlohmann::json::parse(line).at("loss_total").get<double>())) {
        all_finite = false;
      }
    }
  }

  auto pool = generate_scenes(cfg.scene, cfg.seed, cfg.train_scenes);
  DecodeConfig decode_cfg;
  decode_cfg.score_threshold = 0.05;
  auto report = evaluate_model(result.model, pool, decode_cfg);
  double minutes = (now_seconds() - start) / 60.0;
  fs::remove_all(cfg.out_dir);

  out.pass = report.ap50 >= 0.9 && cfg.optim.steps <= 5000 && all_finite &&
             logged == cfg.optim.steps;
  out.detail = detail::cat("train-set ap50 ", report.ap50, " (ap ", report.ap, ") after ",
                           cfg.optim.steps, " steps in ", minutes, " min; ", logged,
                           " steps logged, all finite: ", all_finite ? "yes" : "no");
  return out;
}

// --- 8. ablation trend --------------------------------------------------------------

Outcome ablation_trend() {
  Outcome out;
  // 32x32 output maps: clustered centers land on distinct cells, so the
  // comparison measures mask assembly rather than peak-window collisions.
  RunConfig base;
  base.model.num_classes = 3;
  base.model.shape_size = 16;
  base.model.backbone_channels = {12, 24, 32, 40};
  base.model.head_channels = 24;
  base.model.input_h = base.model.input_w = 128;
  base.model.saliency_mode = SaliencyMode::kClassAgnostic;
  base.loss.aux_saliency = false;
  base.scene.canvas_h = base.scene.canvas_w = 128;
  base.scene.num_classes = 3;
  base.scene.min_objects = 2;
  base.scene.max_objects = 4;
  base.scene.min_size_frac = 0.2;
  base.scene.max_size_frac = 0.4;
  base.scene.overlap_level = 0.7;
  base.optim.steps = 2200;
  base.optim.batch_size = 2;
  base.optim.learning_rate = 1e-3;
  base.optim.checkpoint_every = 0;
  base.train_scenes = 256;
  base.eval_scenes = 0;
  base.seed = 11;

  SceneConfig low = base.scene;
  low.overlap_level = 0.0;
  SceneConfig high = base.scene;
  high.overlap_level = 1.0;
  auto low_suite = generate_scenes(low, 50000, 200);
  auto high_suite = generate_scenes(high, 60000, 200);

  struct ModeResult {
    double low_ap50 = 0, high_ap = 0;
  };
  ModeResult results[3];
  const AblationMode modes[3] = {AblationMode::kFull, AblationMode::kShapeOnly,
                                 AblationMode::kSaliencyOnly};
  const char* names[3] = {"full", "shape-only", "saliency-only"};
  std::string table;
  for (int m = 0; m < 3; ++m) {
    RunConfig cfg = base;
    cfg.loss.ablation = modes[m];
    cfg.decode.ablation = modes[m];
    cfg.decode.score_threshold = 0.05;
    cfg.out_dir = (fs::temp_directory_path() / ("centermask_acceptance_ablate_" +
                                                std::string(names[m]))).string();
    fs::remove_all(cfg.out_dir);
    auto result = train_model<float>(cfg);
    auto low_report = evaluate_model(result.model, low_suite, cfg.decode);
    auto high_report = evaluate_model(result.model, high_suite, cfg.decode);
    results[m].low_ap50 = low_report.ap50;
    results[m].high_ap = high_report.ap;
    table += detail::cat(names[m], ": high-overlap AP ", high_report.ap, " (AP50 ",
                         high_report.ap50, "), low-overlap AP50 ", low_report.ap50, "; ");
    fs::remove_all(cfg.out_dir);
  }

  bool full_beats_shape = results[0].high_ap >= results[1].high_ap;
  bool full_beats_saliency = results[0].high_ap >= results[2].high_ap;
  bool saliency_close_on_low = results[2].low_ap50 >= results[0].low_ap50 - 0.1;
  out.pass = full_beats_shape && full_beats_saliency && saliency_close_on_low;
  out.detail = table;
  if (!full_beats_shape) out.detail += "[full < shape-only on high overlap] ";
  if (!full_beats_saliency) out.detail += "[full < saliency-only on high overlap] ";
  if (!saliency_close_on_low) out.detail += "[saliency-only not within 0.1 on low overlap] ";
  return out;
}

// --- 9. supervision flow ---------------------------------------------------------------

Outcome supervision_flow() {
  Outcome out;
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.shape_size = 8;
  cfg.backbone_channels = {8, 12, 16, 16};
  cfg.head_channels = 8;
  cfg.input_h = cfg.input_w = 64;
  cfg.saliency_mode = SaliencyMode::kClassSpecific;

  SceneConfig scene_cfg;
  scene_cfg.canvas_h = scene_cfg.canvas_w = 64;
  scene_cfg.num_classes = 3;
  Scene scene = generate_scene(scene_cfg, 19);
  auto targets = encode_targets<float>(scene.instances, 3, 16, 16, 4);

  auto model = build_model<float>(cfg, 23);
  Tape<float> tape;
  {
    Tape<float>::Scope scope(tape);
    auto outputs = forward(model, image_tensor<float>(scene.image));
    // Mask loss only; no auxiliary supervision anywhere.
    auto result = mask_loss(outputs.shape, outputs.saliency, targets.objects, cfg,
                            AblationMode::kFull);
    tape.backward(result.loss);
  }

  auto norm = [](const Tensor<float>& t) {
    if (!t.has_grad()) return 0.0;
    double n = 0;
    for (float g : t.grad()) n += std::fabs(g);
    return n;
  };
  double shape_norm = norm(model.shape_head.hidden.weight) + norm(model.shape_head.out.weight);
  double sal_norm =
      norm(model.saliency_head.hidden.weight) + norm(model.saliency_head.out.weight);
  out.pass = shape_norm > 0 && sal_norm > 0;
  out.detail = detail::cat("mask-loss grad L1: shape head ", shape_norm, ", saliency head ",
                           sal_norm);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"gradient-suite", gradient_suite},
      {"loss-oracles", loss_oracles},
      {"decode-oracle", decode_oracle},
      {"assembly-contract", assembly_contract},
      {"target-round-trip", target_round_trip},
      {"eval-oracle", eval_oracle},
      {"overfit-run", overfit_run},
      {"ablation-trend", ablation_trend},
      {"supervision-flow", supervision_flow},
  };

  std::vector<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& criterion : criteria) {
    if (!only.empty() &&
        std::find(only.begin(), only.end(), criterion.name) == only.end()) {
      continue;
    }
    Outcome outcome;
    try {
      outcome = criterion.run();
    } catch (const std::exception& e) {
      outcome.pass = false;
      outcome.detail = detail::cat("exception: ", e.what());
    }
    std::printf("[%s] %s — %s\n", outcome.pass ? "PASS" : "FAIL", criterion.name,
                outcome.detail.c_str());
    std::fflush(stdout);
    if (!outcome.pass) ++failures;
  }
  return failures;
}
