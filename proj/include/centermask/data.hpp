#pragma once

// Synthetic scene generation (ellipses, rectangles, triangles with controlled
// overlap and exact hard-rasterized masks) plus the on-disk dataset format:
// images/NNNNNN.png, masks/NNNNNN_K.png, annotations.jsonl.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/png.hpp"
#include "centermask/targets.hpp"

namespace centermask {

struct SceneConfig {
  int canvas_h = 128;
  int canvas_w = 128;
  int min_objects = 2;
  int max_objects = 5;
  std::array<double, 3> family_weights = {1.0 / 3, 1.0 / 3, 1.0 / 3};  // ellipse, rect, triangle
  double min_size_frac = 0.15;  // object extent as a fraction of min(canvas)
  double max_size_frac = 0.40;
  double overlap_level = 0.3;  // 0 = spread out, 1 = clustered centers
  int num_classes = 3;

  void validate() const {
    if (canvas_h < 16 || canvas_w < 16) throw ShapeError("scene config: canvas too small");
    if (min_objects < 0 || max_objects < min_objects) {
      throw ShapeError("scene config: bad object count range");
    }
    if (!(min_size_frac > 0 && max_size_frac >= min_size_frac && max_size_frac <= 1)) {
      throw ShapeError("scene config: bad size range");
    }
    if (!(overlap_level >= 0 && overlap_level <= 1)) {
      throw ShapeError("scene config: overlap_level must be in [0, 1]");
    }
    if (num_classes < 1) throw ShapeError("scene config: num_classes must be >= 1");
    double wsum = family_weights[0] + family_weights[1] + family_weights[2];
    if (std::fabs(wsum - 1.0) > 1e-9) throw ShapeError("scene config: family weights must sum to 1");
  }
};

// RGB image in [0,1], CHW planes.
struct ImageRgb {
  int h = 0;
  int w = 0;
  std::vector<float> chw;

  ImageRgb() = default;
  ImageRgb(int height, int width)
      : h(height), w(width), chw(3 * static_cast<std::size_t>(height) * width, 0.f) {}

  float& at(int c, int y, int x) {
    return chw[(static_cast<std::size_t>(c) * h + y) * w + x];
  }
  float at(int c, int y, int x) const {
    return chw[(static_cast<std::size_t>(c) * h + y) * w + x];
  }
};

// One generated or loaded scene. Instances are stored in back-to-front draw
// order and carry their visible (occlusion-resolved) masks.
struct Scene {
  std::uint64_t id = 0;
  ImageRgb image;
  std::vector<GroundTruthInstance> instances;
};

namespace detail {

// Distinct base colors, one per class (repeats after 8).
inline std::array<float, 3> class_color(int class_id) {
  static const std::array<std::array<float, 3>, 8> palette = {{
      {0.85f, 0.30f, 0.25f},
      {0.25f, 0.65f, 0.85f},
      {0.35f, 0.80f, 0.35f},
      {0.90f, 0.75f, 0.25f},
      {0.70f, 0.40f, 0.85f},
      {0.90f, 0.50f, 0.65f},
      {0.45f, 0.80f, 0.75f},
      {0.80f, 0.60f, 0.40f},
  }};
  return palette[static_cast<std::size_t>(class_id) % palette.size()];
}

struct ShapeSpec {
  int family = 0;  // 0 ellipse, 1 rectangle, 2 triangle
  int class_id = 0;
  double cx = 0, cy = 0;
  double half_a = 0, half_b = 0;  // principal half-extents
  double angle = 0;
  std::array<double, 6> tri{};  // triangle vertices (filled for family 2)
};

inline bool point_in_shape(const ShapeSpec& s, double px, double py) {
  if (s.family == 2) {
    auto side = [&](int i, int j) {
      double ax = s.tri[static_cast<std::size_t>(2 * i)], ay = s.tri[static_cast<std::size_t>(2 * i + 1)];
      double bx = s.tri[static_cast<std::size_t>(2 * j)], by = s.tri[static_cast<std::size_t>(2 * j + 1)];
      return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    };
    double d0 = side(0, 1), d1 = side(1, 2), d2 = side(2, 0);
    bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
    bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
    return !(has_neg && has_pos);
  }
  double dx = px - s.cx, dy = py - s.cy;
  double c = std::cos(s.angle), sn = std::sin(s.angle);
  double u = dx * c + dy * sn;
  double v = -dx * sn + dy * c;
  if (s.family == 0) {
    return (u * u) / (s.half_a * s.half_a) + (v * v) / (s.half_b * s.half_b) <= 1.0;
  }
  return std::fabs(u) <= s.half_a && std::fabs(v) <= s.half_b;
}

// Pixel-center rasterization, no anti-aliasing.
inline BinaryMask rasterize(const ShapeSpec& s, int h, int w) {
  BinaryMask m(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (point_in_shape(s, x + 0.5, y + 0.5)) m.at(y, x) = 1;
    }
  }
  return m;
}

inline int sample_class(const SceneConfig& cfg, Rng* rng) {
  // Family weights bias class sampling; family(class) = class % 3.
  std::vector<double> w(static_cast<std::size_t>(cfg.num_classes));
  double total = 0;
  for (int c = 0; c < cfg.num_classes; ++c) {
    w[static_cast<std::size_t>(c)] = cfg.family_weights[static_cast<std::size_t>(c % 3)];
    total += w[static_cast<std::size_t>(c)];
  }
  double r = rng->uniform() * total;
  for (int c = 0; c < cfg.num_classes; ++c) {
    r -= w[static_cast<std::size_t>(c)];
    if (r <= 0) return c;
  }
  return cfg.num_classes - 1;
}

}  // namespace detail

// Deterministic per (config, seed). Later objects occlude earlier ones;
// instances keep their visible region only, and instances with fewer than 16
// visible pixels are dropped.
inline Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  constexpr int kMinVisiblePixels = 16;
  Rng rng(mix_seed(seed, 0x7363656e65ull));
  Scene scene;
  scene.id = seed;
  const int h = cfg.canvas_h, w = cfg.canvas_w;
  const double dim = std::min(h, w);

  const int count = cfg.min_objects == cfg.max_objects
                        ? cfg.min_objects
                        : rng.uniform_int(cfg.min_objects, cfg.max_objects);

  std::vector<detail::ShapeSpec> shapes;
  std::vector<std::pair<double, double>> centers;
  for (int k = 0; k < count; ++k) {
    detail::ShapeSpec s;
    s.class_id = detail::sample_class(cfg, &rng);
    s.family = s.class_id % 3;
    double extent = rng.uniform(cfg.min_size_frac, cfg.max_size_frac) * dim;
    s.half_a = extent / 2;
    s.half_b = s.half_a * rng.uniform(0.6, 1.0);
    s.angle = rng.uniform(0, 2 * 3.14159265358979323846);

    // overlap_level biases center placement: clustered near a previous object
    // vs rejection-sampled away from all previous centers.
    double margin = 0.12;
    auto uniform_center = [&](double* cx, double* cy) {
      *cx = rng.uniform(margin * w, (1 - margin) * w);
      *cy = rng.uniform(margin * h, (1 - margin) * h);
    };
    if (centers.empty() || rng.uniform() >= cfg.overlap_level) {
      double best_x = 0, best_y = 0, best_d = -1;
      for (int attempt = 0; attempt < 24; ++attempt) {
        double cx, cy;
        uniform_center(&cx, &cy);
        double d = 1e30;
        for (auto& [px, py] : centers) d = std::min(d, std::hypot(cx - px, cy - py));
        if (d > best_d) {
          best_d = d;
          best_x = cx;
          best_y = cy;
        }
        if (centers.empty()) break;
      }
      s.cx = best_x;
      s.cy = best_y;
    } else {
      auto& [px, py] = centers[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(centers.size()) - 1))];
      double radius = rng.uniform(0.08, 0.25) * dim;
      double theta = rng.uniform(0, 2 * 3.14159265358979323846);
      s.cx = std::clamp(px + radius * std::cos(theta), margin * w, (1 - margin) * w);
      s.cy = std::clamp(py + radius * std::sin(theta), margin * h, (1 - margin) * h);
    }
    centers.emplace_back(s.cx, s.cy);

    if (s.family == 2) {
      for (int v = 0; v < 3; ++v) {
        double theta = s.angle + v * 2 * 3.14159265358979323846 / 3 + rng.uniform(-0.3, 0.3);
        double radius = s.half_a * rng.uniform(0.8, 1.15);
        s.tri[static_cast<std::size_t>(2 * v)] = s.cx + radius * std::cos(theta);
        s.tri[static_cast<std::size_t>(2 * v + 1)] = s.cy + radius * std::sin(theta);
      }
    }
    shapes.push_back(s);
  }

  // Rasterize and resolve occlusion: visible_k = raster_k minus all later.
  std::vector<BinaryMask> rasters;
  rasters.reserve(shapes.size());
  for (const auto& s : shapes) rasters.push_back(detail::rasterize(s, h, w));
  std::vector<BinaryMask> visible = rasters;
  for (std::size_t k = 0; k < visible.size(); ++k) {
    for (std::size_t later = k + 1; later < visible.size(); ++later) {
      for (std::size_t i = 0; i < visible[k].data.size(); ++i) {
        if (rasters[later].data[i]) visible[k].data[i] = 0;
      }
    }
  }

  // Image: noisy background, then shapes in draw order.
  scene.image = ImageRgb(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float base = 0.12f + static_cast<float>(rng.uniform(-0.04, 0.04));
      for (int c = 0; c < 3; ++c) scene.image.at(c, y, x) = std::clamp(base, 0.f, 1.f);
    }
  }
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    auto color = detail::class_color(shapes[k].class_id);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!rasters[k].at(y, x)) continue;
        float noise = static_cast<float>(rng.uniform(-0.05, 0.05));
        for (int c = 0; c < 3; ++c) {
          scene.image.at(c, y, x) = std::clamp(color[static_cast<std::size_t>(c)] + noise, 0.f, 1.f);
        }
      }
    }
  }

  for (std::size_t k = 0; k < shapes.size(); ++k) {
    if (visible[k].count() < kMinVisiblePixels) continue;
    scene.instances.push_back(make_instance(shapes[k].class_id, std::move(visible[k])));
  }
  return scene;
}

inline std::vector<Scene> generate_scenes(const SceneConfig& cfg, std::uint64_t first_seed,
                                          int count) {
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) scenes.push_back(generate_scene(cfg, first_seed + static_cast<std::uint64_t>(i)));
  return scenes;
}

// ---------------------------------------------------------------------------
// Dataset directory io
// ---------------------------------------------------------------------------

namespace detail {

inline std::string scene_stem(std::uint64_t id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06llu", static_cast<unsigned long long>(id));
  return buf;
}

inline PngImage image_to_png(const ImageRgb& img) {
  PngImage png;
  png.h = img.h;
  png.w = img.w;
  png.channels = 3;
  png.pixels.resize(3 * static_cast<std::size_t>(img.h) * img.w);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      for (int c = 0; c < 3; ++c) {
        float v = std::clamp(img.at(c, y, x), 0.f, 1.f);
        png.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.f));
      }
    }
  }
  return png;
}

inline PngImage mask_to_png(const BinaryMask& mask) {
  PngImage png;
  png.h = mask.h;
  png.w = mask.w;
  png.channels = 1;
  png.pixels.resize(static_cast<std::size_t>(mask.h) * mask.w);
  for (std::size_t i = 0; i < png.pixels.size(); ++i) png.pixels[i] = mask.data[i] ? 255 : 0;
  return png;
}

}  // namespace detail

// Writes images/, masks/, and annotations.jsonl under dir. Filenames are
// derived from scene ids, so re-exporting the same scenes is byte-identical.
inline void export_dataset(const std::vector<Scene>& scenes, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  std::ofstream ann((fs::path(dir) / "annotations.jsonl").string());
  if (!ann) throw IoError(detail::cat("cannot write annotations in ", dir));
  for (const auto& scene : scenes) {
    std::string stem = detail::scene_stem(scene.id);
    std::string image_rel = "images/" + stem + ".png";
    write_png_file((fs::path(dir) / image_rel).string(), detail::image_to_png(scene.image));
    nlohmann::json rec;
    rec["image_id"] = scene.id;
    rec["image"] = image_rel;
    rec["height"] = scene.image.h;
    rec["width"] = scene.image.w;
    rec["instances"] = nlohmann::json::array();
    for (std::size_t k = 0; k < scene.instances.size(); ++k) {
      std::string mask_rel = "masks/" + stem + "_" + std::to_string(k) + ".png";
      write_png_file((fs::path(dir) / mask_rel).string(),
                     detail::mask_to_png(scene.instances[k].mask));
      rec["instances"].push_back({{"class_id", scene.instances[k].class_id},
                                  {"mask_file", mask_rel}});
    }
    ann << rec.dump() << "\n";
  }
  if (!ann) throw IoError(detail::cat("write failed for annotations in ", dir));
}

// Reads a dataset directory back into scenes. Boxes and centers are recomputed
// from the masks. Malformed records name the file and line.
inline std::vector<Scene> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::string ann_path = (fs::path(dir) / "annotations.jsonl").string();
  std::ifstream ann(ann_path);
  if (!ann) throw IoError(detail::cat("cannot open ", ann_path));
  std::vector<Scene> scenes;
  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(detail::cat(ann_path, ":", line_no, ": bad record: ", e.what()));
    }
    Scene scene;
    try {
      scene.id = rec.at("image_id").get<std::uint64_t>();
      std::string image_rel = rec.at("image").get<std::string>();
      PngImage png = read_png_file((fs::path(dir) / image_rel).string());
      if (png.channels != 3) {
        throw IoError(detail::cat(image_rel, ": expected an RGB image"));
      }
      int expect_h = rec.at("height").get<int>();
      int expect_w = rec.at("width").get<int>();
      if (png.h != expect_h || png.w != expect_w) {
        throw IoError(detail::cat(image_rel, ": image is ", png.h, "x", png.w,
                                  " but annotation says ", expect_h, "x", expect_w));
      }
      scene.image = ImageRgb(png.h, png.w);
      for (int y = 0; y < png.h; ++y) {
        for (int x = 0; x < png.w; ++x) {
          for (int c = 0; c < 3; ++c) {
            scene.image.at(c, y, x) = static_cast<float>(png.at(y, x, c)) / 255.f;
          }
        }
      }
      for (const auto& inst : rec.at("instances")) {
        std::string mask_rel = inst.at("mask_file").get<std::string>();
        std::string mask_path = (fs::path(dir) / mask_rel).string();
        if (!fs::exists(mask_path)) {
          throw IoError(detail::cat("missing mask file: ", mask_path));
        }
        PngImage mask_png = read_png_file(mask_path);
        if (mask_png.channels != 1) {
          throw IoError(detail::cat(mask_rel, ": mask must be single-channel"));
        }
        if (mask_png.h != png.h || mask_png.w != png.w) {
          throw IoError(detail::cat(mask_rel, ": mask is ", mask_png.h, "x", mask_png.w,
                                    " but image is ", png.h, "x", png.w));
        }
        BinaryMask mask(mask_png.h, mask_png.w);
        for (std::size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = mask_png.pixels[i] >= 128;
        scene.instances.push_back(make_instance(inst.at("class_id").get<int>(), std::move(mask)));
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError(detail::cat(ann_path, ":", line_no, ": bad record: ", e.what()));
    } catch (const std::invalid_argument& e) {
      throw IoError(detail::cat(ann_path, ":", line_no, ": ", e.what()));
    } catch (const IoError& e) {
      throw IoError(detail::cat(ann_path, ":", line_no, ": ", e.what()));
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

// Scene image as a (3, H, W) tensor in the requested precision.
template <typename T>
Tensor<T> image_tensor(const ImageRgb& img) {
  std::vector<T> data(img.chw.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(img.chw[i]);
  return Tensor<T>::from_data({3, img.h, img.w}, std::move(data));
}

}  // namespace centermask
