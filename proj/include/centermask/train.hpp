#pragma once

// Training loop: per-step scene sampling derived from (seed, step), one tape
// per step over the batch, Adam updates, structured per-step loss logging,
// periodic checkpoints, and a held-out evaluation at the end.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "centermask/checkpoint.hpp"
#include "centermask/data.hpp"
#include "centermask/decode.hpp"
#include "centermask/eval.hpp"
#include "centermask/losses.hpp"
#include "centermask/model.hpp"
#include "centermask/optim.hpp"
#include "centermask/targets.hpp"
#include "centermask/tensor.hpp"

namespace centermask {

struct OptimRunConfig {
  double learning_rate = 2.5e-4;
  double drop_factor = 0.1;   // single learning-rate drop
  double drop_at = 0.8;       // as a fraction of total steps
  int steps = 5000;
  int batch_size = 8;
  int checkpoint_every = 500;
  AdamConfig adam;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  DecodeConfig decode;
  SceneConfig scene;
  OptimRunConfig optim;
  std::uint64_t seed = 1;
  int train_scenes = 64;  // fixed pool of synthetic scenes (seed .. seed+n)
  int eval_scenes = 32;   // held-out pool starting right after the train pool
  std::string out_dir = "runs/default";
  std::string dataset_dir;  // when set, train on this dataset instead
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  const char* ablation = c.ablation == AblationMode::kFull
                             ? "full"
                             : (c.ablation == AblationMode::kShapeOnly ? "shape-only" : "saliency-only");
  j = nlohmann::json{{"focal_alpha", c.focal_alpha},   {"focal_beta", c.focal_beta},
                     {"weight_heatmap", c.weight_heatmap}, {"weight_offset", c.weight_offset},
                     {"weight_size", c.weight_size},   {"weight_mask", c.weight_mask},
                     {"aux_saliency", c.aux_saliency}, {"aux_weight", c.aux_weight},
                     {"ablation", ablation}};
}

inline AblationMode ablation_from_string(const std::string& s) {
  if (s == "full") return AblationMode::kFull;
  if (s == "shape-only") return AblationMode::kShapeOnly;
  if (s == "saliency-only") return AblationMode::kSaliencyOnly;
  throw IoError(detail::cat("unknown ablation mode: ", s));
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  j.at("focal_alpha").get_to(c.focal_alpha);
  j.at("focal_beta").get_to(c.focal_beta);
  j.at("weight_heatmap").get_to(c.weight_heatmap);
  j.at("weight_offset").get_to(c.weight_offset);
  j.at("weight_size").get_to(c.weight_size);
  j.at("weight_mask").get_to(c.weight_mask);
  j.at("aux_saliency").get_to(c.aux_saliency);
  j.at("aux_weight").get_to(c.aux_weight);
  c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
}

inline void to_json(nlohmann::json& j, const DecodeConfig& c) {
  const char* ablation = c.ablation == AblationMode::kFull
                             ? "full"
                             : (c.ablation == AblationMode::kShapeOnly ? "shape-only" : "saliency-only");
  j = nlohmann::json{{"top_k", c.top_k},
                     {"window", c.window},
                     {"mask_threshold", c.mask_threshold},
                     {"score_threshold", c.score_threshold},
                     {"ablation", ablation}};
}

inline void from_json(const nlohmann::json& j, DecodeConfig& c) {
  j.at("top_k").get_to(c.top_k);
  j.at("window").get_to(c.window);
  j.at("mask_threshold").get_to(c.mask_threshold);
  j.at("score_threshold").get_to(c.score_threshold);
  c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
}

inline void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"canvas_h", c.canvas_h},
                     {"canvas_w", c.canvas_w},
                     {"min_objects", c.min_objects},
                     {"max_objects", c.max_objects},
                     {"family_weights", c.family_weights},
                     {"min_size_frac", c.min_size_frac},
                     {"max_size_frac", c.max_size_frac},
                     {"overlap_level", c.overlap_level},
                     {"num_classes", c.num_classes}};
}

inline void from_json(const nlohmann::json& j, SceneConfig& c) {
  j.at("canvas_h").get_to(c.canvas_h);
  j.at("canvas_w").get_to(c.canvas_w);
  j.at("min_objects").get_to(c.min_objects);
  j.at("max_objects").get_to(c.max_objects);
  j.at("family_weights").get_to(c.family_weights);
  j.at("min_size_frac").get_to(c.min_size_frac);
  j.at("max_size_frac").get_to(c.max_size_frac);
  j.at("overlap_level").get_to(c.overlap_level);
  j.at("num_classes").get_to(c.num_classes);
}

inline void to_json(nlohmann::json& j, const OptimRunConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"drop_factor", c.drop_factor},
                     {"drop_at", c.drop_at},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"checkpoint_every", c.checkpoint_every},
                     {"adam_beta1", c.adam.beta1},
                     {"adam_beta2", c.adam.beta2},
                     {"adam_epsilon", c.adam.epsilon}};
}

inline void from_json(const nlohmann::json& j, OptimRunConfig& c) {
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("drop_factor").get_to(c.drop_factor);
  j.at("drop_at").get_to(c.drop_at);
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  j.at("adam_beta1").get_to(c.adam.beta1);
  j.at("adam_beta2").get_to(c.adam.beta2);
  j.at("adam_epsilon").get_to(c.adam.epsilon);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"loss", c.loss},
                     {"decode", c.decode},
                     {"scene", c.scene},
                     {"optim", c.optim},
                     {"seed", c.seed},
                     {"train_scenes", c.train_scenes},
                     {"eval_scenes", c.eval_scenes},
                     {"out_dir", c.out_dir},
                     {"dataset_dir", c.dataset_dir}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  j.at("model").get_to(c.model);
  j.at("loss").get_to(c.loss);
  j.at("decode").get_to(c.decode);
  j.at("scene").get_to(c.scene);
  j.at("optim").get_to(c.optim);
  j.at("seed").get_to(c.seed);
  j.at("train_scenes").get_to(c.train_scenes);
  j.at("eval_scenes").get_to(c.eval_scenes);
  j.at("out_dir").get_to(c.out_dir);
  j.at("dataset_dir").get_to(c.dataset_dir);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(detail::cat("cannot open config: ", path));
  nlohmann::json j;
  try {
    f >> j;
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(detail::cat(path, ": bad run config: ", e.what()));
  }
}

// ---------------------------------------------------------------------------
// Evaluation of a model over scenes
// ---------------------------------------------------------------------------

template <typename T>
std::vector<Detection> infer_scene(const ModelParams<T>& model, const Scene& scene,
                                   const DecodeConfig& decode_cfg) {
  Tensor<T> image = image_tensor<T>(scene.image);
  HeadOutputs<T> outputs = forward(model, image);
  return decode_instances(outputs, model.config, decode_cfg);
}

template <typename T>
ApReport evaluate_model(const ModelParams<T>& model, const std::vector<Scene>& scenes,
                        const DecodeConfig& decode_cfg) {
  std::vector<EvalDetection> dets;
  std::vector<EvalGroundTruth> gts;
  for (const auto& scene : scenes) {
    for (const auto& gt : scene.instances) {
      gts.push_back({static_cast<int>(scene.id), gt.class_id, gt.mask});
    }
    for (auto& det : infer_scene(model, scene, decode_cfg)) {
      dets.push_back({static_cast<int>(scene.id), det.class_id, det.score, std::move(det.mask)});
    }
  }
  return match_and_score(dets, gts, model.config.num_classes, model.config.input_h,
                         model.config.input_w);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

template <typename T>
struct TrainResult {
  ModelParams<T> model;
  std::string final_checkpoint;
  ApReport heldout;
  LossBreakdown last_loss;
};

namespace detail {

inline double lr_at(const OptimRunConfig& cfg, std::int64_t step) {
  double drop_step = cfg.drop_at * cfg.steps;
  return step >= drop_step ? cfg.learning_rate * cfg.drop_factor : cfg.learning_rate;
}

}  // namespace detail

// Runs the full training schedule. Scenes come from the configured synthetic
// pool (or a dataset directory); per-step batch membership is a pure function
// of (seed, step), so interrupted runs resume exactly.
template <typename T>
TrainResult<T> train_model(const RunConfig& cfg,
                           const std::function<void(std::int64_t, const LossBreakdown&)>& on_step =
                               nullptr,
                           const std::string& resume_from = "") {
  namespace fs = std::filesystem;
  cfg.model.validate();
  cfg.scene.validate();
  fs::create_directories(cfg.out_dir);

  {
    std::ofstream cfg_out((fs::path(cfg.out_dir) / "config.json").string());
    nlohmann::json j = cfg;
    cfg_out << j.dump(2) << "\n";
  }

  // Training pool.
  std::vector<Scene> pool;
  if (!cfg.dataset_dir.empty()) {
    pool = load_dataset(cfg.dataset_dir);
  } else {
    pool = generate_scenes(cfg.scene, cfg.seed, cfg.train_scenes);
  }
  if (pool.empty()) throw IoError("train: empty training pool");

  // Precompute per-scene targets (they depend only on the scene and config).
  std::vector<TargetEncoding<T>> targets;
  targets.reserve(pool.size());
  for (const auto& scene : pool) {
    targets.push_back(encode_targets<T>(scene.instances, cfg.model.num_classes, cfg.model.map_h(),
                                        cfg.model.map_w(), cfg.model.output_stride));
  }
  std::vector<Tensor<T>> images;
  images.reserve(pool.size());
  for (const auto& scene : pool) images.push_back(image_tensor<T>(scene.image));

  TrainResult<T> result;
  result.model = build_model<T>(cfg.model, cfg.seed);
  AdamOptimizer<T> optimizer(result.model.parameters(), cfg.optim.adam);
  std::int64_t first_step = 0;
  if (!resume_from.empty()) {
    Checkpoint<T> ckpt = load_checkpoint<T>(resume_from);
    if (!(ckpt.model.config == cfg.model)) {
      throw IoError(detail::cat(resume_from, ": checkpoint config does not match run config"));
    }
    auto dst = result.model.named_parameters();
    auto src = ckpt.model.named_parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].second.mutable_values() = src[i].second.values();
    if (ckpt.has_optimizer) {
      optimizer.first_moments() = ckpt.adam_m;
      optimizer.second_moments() = ckpt.adam_v;
      optimizer.set_step_count(ckpt.adam_steps);
    }
    first_step = ckpt.trained_steps;
  }

  std::ofstream metrics((fs::path(cfg.out_dir) / "metrics.jsonl").string(),
                        first_step == 0 ? std::ios::trunc : std::ios::app);

  std::string last_checkpoint;
  auto save = [&](std::int64_t step, const std::string& name) {
    std::string path = (fs::path(cfg.out_dir) / name).string();
    save_checkpoint(path, result.model, step, &optimizer);
    last_checkpoint = path;
  };

  for (std::int64_t step = first_step; step < cfg.optim.steps; ++step) {
    Rng sampler(mix_seed(cfg.seed, 0xb47c5ull + static_cast<std::uint64_t>(step)));
    Tape<T> tape;
    LossBreakdown step_parts;
    {
      typename Tape<T>::Scope scope(tape);
      Tensor<T> batch_total = Tensor<T>::scalar(T(0));
      for (int b = 0; b < cfg.optim.batch_size; ++b) {
        std::size_t idx = static_cast<std::size_t>(sampler.uniform_int(0, static_cast<int>(pool.size()) - 1));
        HeadOutputs<T> outputs = forward(result.model, images[idx]);
        TotalLoss<T> loss;
        try {
          loss = total_loss(outputs, targets[idx], pool[idx].instances, cfg.model, cfg.loss);
        } catch (const std::runtime_error& e) {
          // NaN abort: keep the last good checkpoint and rethrow.
          if (!last_checkpoint.empty()) {
            std::cerr << "aborting; last good checkpoint: " << last_checkpoint << "\n";
          }
          throw;
        }
        batch_total = add(batch_total, loss.value);
        step_parts.heatmap += loss.parts.heatmap;
        step_parts.offset += loss.parts.offset;
        step_parts.size += loss.parts.size;
        step_parts.mask += loss.parts.mask;
        step_parts.aux += loss.parts.aux;
        step_parts.skipped_objects += loss.parts.skipped_objects;
      }
      batch_total = scale(batch_total, T(1) / static_cast<T>(cfg.optim.batch_size));
      step_parts.total = static_cast<double>(batch_total.item());
      optimizer.zero_grad();
      tape.backward(batch_total);
    }
    double inv_b = 1.0 / cfg.optim.batch_size;
    step_parts.heatmap *= inv_b;
    step_parts.offset *= inv_b;
    step_parts.size *= inv_b;
    step_parts.mask *= inv_b;
    step_parts.aux *= inv_b;

    double lr = detail::lr_at(cfg.optim, step);
    optimizer.step(lr);

    metrics << nlohmann::json{{"step", step},
                              {"loss_heatmap", step_parts.heatmap},
                              {"loss_offset", step_parts.offset},
                              {"loss_size", step_parts.size},
                              {"loss_mask", step_parts.mask},
                              {"loss_aux", step_parts.aux},
                              {"loss_total", step_parts.total},
                              {"lr", lr},
                              {"skipped_objects", step_parts.skipped_objects}}
                 .dump()
            << "\n";
    result.last_loss = step_parts;
    if (on_step) on_step(step, step_parts);

    if (cfg.optim.checkpoint_every > 0 && (step + 1) % cfg.optim.checkpoint_every == 0 &&
        step + 1 < cfg.optim.steps) {
      save(step + 1, "checkpoint_step" + std::to_string(step + 1) + ".ckpt");
    }
  }

  save(cfg.optim.steps, "checkpoint_final.ckpt");
  result.final_checkpoint = last_checkpoint;

  // Held-out evaluation on the seed range after the training pool.
  if (cfg.dataset_dir.empty() && cfg.eval_scenes > 0) {
    std::vector<Scene> heldout = generate_scenes(
        cfg.scene, cfg.seed + static_cast<std::uint64_t>(cfg.train_scenes), cfg.eval_scenes);
    result.heldout = evaluate_model(result.model, heldout, cfg.decode);
    nlohmann::json j{{"ap", result.heldout.ap},
                     {"ap50", result.heldout.ap50},
                     {"ap75", result.heldout.ap75},
                     {"ap_small", result.heldout.ap_small},
                     {"ap_medium", result.heldout.ap_medium},
                     {"ap_large", result.heldout.ap_large},
                     {"num_gt", result.heldout.num_gt},
                     {"num_detections", result.heldout.num_detections}};
    std::ofstream eval_out((fs::path(cfg.out_dir) / "eval.json").string());
    eval_out << j.dump(2) << "\n";
  }
  return result;
}

}  // namespace centermask
