#pragma once

// Operator entry points behind the `centermask` binary: dataset generation,
// training, inference, evaluation, and the three-mode ablation comparison.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "centermask/checkpoint.hpp"
#include "centermask/data.hpp"
#include "centermask/decode.hpp"
#include "centermask/eval.hpp"
#include "centermask/overlay.hpp"
#include "centermask/records.hpp"
#include "centermask/train.hpp"

namespace centermask {
namespace cli {

namespace fs = std::filesystem;

inline void print_report(std::ostream& os, const std::string& title, const ApReport& r) {
  char line[160];
  std::snprintf(line, sizeof(line),
                "%-14s AP %.4f  AP50 %.4f  AP75 %.4f  S %.4f  M %.4f  L %.4f  (gt %lld, det %lld)",
                title.c_str(), r.ap, r.ap50, r.ap75, r.ap_small, r.ap_medium, r.ap_large,
                static_cast<long long>(r.num_gt), static_cast<long long>(r.num_detections));
  os << line << "\n";
}

inline nlohmann::json report_json(const ApReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (auto& [c, ap] : r.per_class) per_class[std::to_string(c)] = ap;
  return nlohmann::json{{"ap", r.ap},
                        {"ap50", r.ap50},
                        {"ap75", r.ap75},
                        {"ap_small", r.ap_small},
                        {"ap_medium", r.ap_medium},
                        {"ap_large", r.ap_large},
                        {"per_class", per_class},
                        {"num_gt", r.num_gt},
                        {"num_detections", r.num_detections}};
}

// --- gen ---------------------------------------------------------------

struct GenArgs {
  std::string out;
  int num_scenes = 32;
  std::uint64_t seed = 1;
  SceneConfig scene;
};

inline int cmd_gen(const GenArgs& args) {
  args.scene.validate();
  auto scenes = generate_scenes(args.scene, args.seed, args.num_scenes);
  export_dataset(scenes, args.out);
  std::cout << "wrote " << scenes.size() << " scenes to " << args.out << "\n";
  return 0;
}

// --- train -------------------------------------------------------------

inline int cmd_train(const RunConfig& cfg, const std::string& resume) {
  std::cout << "training: " << cfg.optim.steps << " steps, batch " << cfg.optim.batch_size
            << ", pool " << cfg.train_scenes << " scenes, out " << cfg.out_dir << "\n";
  auto result = train_model<float>(
      cfg,
      [&cfg](std::int64_t step, const LossBreakdown& parts) {
        if ((step + 1) % 100 == 0 || step + 1 == cfg.optim.steps) {
          char line[160];
          std::snprintf(line, sizeof(line),
                        "step %5lld  total %.4f  heat %.4f  off %.4f  size %.4f  mask %.4f  aux %.4f",
                        static_cast<long long>(step + 1), parts.total, parts.heatmap, parts.offset,
                        parts.size, parts.mask, parts.aux);
          std::cout << line << "\n";
        }
      },
      resume);
  std::cout << "final checkpoint: " << result.final_checkpoint << "\n";
  if (cfg.eval_scenes > 0 && cfg.dataset_dir.empty()) {
    print_report(std::cout, "held-out", result.heldout);
  }
  return 0;
}

// --- infer -------------------------------------------------------------

struct InferArgs {
  std::string checkpoint;
  std::string dataset;
  std::string out;
  DecodeConfig decode;
  bool overlays = false;
};

inline int cmd_infer(const InferArgs& args) {
  args.decode.validate();
  Checkpoint<float> ckpt = load_checkpoint<float>(args.checkpoint);
  std::vector<Scene> scenes = load_dataset(args.dataset);
  fs::create_directories(args.out);
  if (args.overlays) fs::create_directories(fs::path(args.out) / "overlays");

  std::vector<DetectionRecord> records;
  for (const auto& scene : scenes) {
    if (scene.image.h != ckpt.model.config.input_h || scene.image.w != ckpt.model.config.input_w) {
      throw IoError(detail::cat("scene ", scene.id, " is ", scene.image.h, "x", scene.image.w,
                                " but the checkpoint expects ", ckpt.model.config.input_h, "x",
                                ckpt.model.config.input_w));
    }
    auto detections = infer_scene(ckpt.model, scene, args.decode);
    for (const auto& det : detections) {
      records.push_back({scene.id, det.class_id, det.score, det.box, det.mask});
    }
    if (args.overlays) {
      PngImage overlay = render_overlay(scene.image, detections);
      write_png_file((fs::path(args.out) / "overlays" / (detail::scene_stem(scene.id) + ".png")).string(),
                     overlay);
    }
  }
  write_detections((fs::path(args.out) / "detections.jsonl").string(), records);
  std::cout << "wrote " << records.size() << " detections for " << scenes.size() << " images to "
            << args.out << "\n";
  return 0;
}

// --- eval --------------------------------------------------------------

struct EvalArgs {
  std::string detections;
  std::string dataset;
  std::string out;
  int num_classes = 0;  // 0: infer from ground truth
};

inline int cmd_eval(const EvalArgs& args) {
  std::vector<DetectionRecord> records = read_detections(args.detections);
  std::vector<Scene> scenes = load_dataset(args.dataset);
  if (scenes.empty()) throw IoError("eval: dataset is empty");
  int canvas_h = scenes[0].image.h, canvas_w = scenes[0].image.w;

  std::vector<EvalGroundTruth> gts;
  int max_class = 0;
  for (const auto& scene : scenes) {
    for (const auto& gt : scene.instances) {
      gts.push_back({static_cast<int>(scene.id), gt.class_id, gt.mask});
      max_class = std::max(max_class, gt.class_id);
    }
  }
  std::vector<EvalDetection> dets;
  for (auto& rec : records) {
    if (rec.mask.h != canvas_h || rec.mask.w != canvas_w) {
      throw IoError(detail::cat("detection mask is ", rec.mask.h, "x", rec.mask.w,
                                " but the dataset canvas is ", canvas_h, "x", canvas_w));
    }
    dets.push_back({static_cast<int>(rec.image_id), rec.class_id, rec.score, std::move(rec.mask)});
    max_class = std::max(max_class, dets.back().class_id);
  }
  int num_classes = args.num_classes > 0 ? args.num_classes : max_class + 1;

  ApReport report = match_and_score(dets, gts, num_classes, canvas_h, canvas_w);
  print_report(std::cout, "mask AP", report);
  if (!args.out.empty()) {
    fs::create_directories(args.out);
    std::ofstream f((fs::path(args.out) / "report.json").string());
    f << report_json(report).dump(2) << "\n";
  }
  return 0;
}

// --- ablate ------------------------------------------------------------

struct AblateArgs {
  std::string out;
  RunConfig base;      // trained once per ablation mode
  int test_scenes = 200;
  int overlay_scenes = 4;
};

// Trains the three assembly modes under identical budgets and reports mask AP
// on a low-overlap and a high-overlap synthetic suite.
inline int cmd_ablate(const AblateArgs& args) {
  static const struct {
    AblationMode mode;
    const char* name;
  } kModes[] = {
      {AblationMode::kFull, "full"},
      {AblationMode::kShapeOnly, "shape-only"},
      {AblationMode::kSaliencyOnly, "saliency-only"},
  };

  SceneConfig low_overlap = args.base.scene;
  low_overlap.overlap_level = 0.0;
  SceneConfig high_overlap = args.base.scene;
  high_overlap.overlap_level = 1.0;
  std::uint64_t test_seed = args.base.seed + 100000;
  auto low_suite = generate_scenes(low_overlap, test_seed, args.test_scenes);
  auto high_suite = generate_scenes(high_overlap, test_seed + static_cast<std::uint64_t>(args.test_scenes),
                                    args.test_scenes);

  nlohmann::json table = nlohmann::json::array();
  std::cout << "mode           suite          AP      AP50    AP75\n";
  for (const auto& entry : kModes) {
    RunConfig cfg = args.base;
    cfg.loss.ablation = entry.mode;
    cfg.decode.ablation = entry.mode;
    cfg.out_dir = (fs::path(args.out) / entry.name).string();
    auto result = train_model<float>(cfg);

    for (const auto& [suite_name, suite] : {std::pair<std::string, const std::vector<Scene>*>{
                                                "low-overlap", &low_suite},
                                            {"high-overlap", &high_suite}}) {
      ApReport report = evaluate_model(result.model, *suite, cfg.decode);
      char line[120];
      std::snprintf(line, sizeof(line), "%-14s %-14s %.4f  %.4f  %.4f", entry.name,
                    suite_name.c_str(), report.ap, report.ap50, report.ap75);
      std::cout << line << "\n";
      table.push_back({{"mode", entry.name},
                       {"suite", suite_name},
                       {"ap", report.ap},
                       {"ap50", report.ap50},
                       {"ap75", report.ap75}});
    }

    fs::create_directories(fs::path(args.out) / "overlays" / entry.name);
    for (int i = 0; i < args.overlay_scenes && i < static_cast<int>(high_suite.size()); ++i) {
      auto detections = infer_scene(result.model, high_suite[static_cast<std::size_t>(i)], cfg.decode);
      PngImage overlay = render_overlay(high_suite[static_cast<std::size_t>(i)].image, detections);
      write_png_file((fs::path(args.out) / "overlays" / entry.name /
                      (detail::scene_stem(high_suite[static_cast<std::size_t>(i)].id) + ".png"))
                         .string(),
                     overlay);
    }
  }
  fs::create_directories(args.out);
  std::ofstream f((fs::path(args.out) / "ablation.json").string());
  f << table.dump(2) << "\n";
  return 0;
}

// --- argument wiring ----------------------------------------------------

inline void add_scene_options(CLI::App* cmd, SceneConfig* scene) {
  cmd->add_option("--canvas", scene->canvas_h, "Canvas size (square)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--num-classes", scene->num_classes, "Number of object classes");
  cmd->add_option("--overlap", scene->overlap_level, "Overlap level in [0,1]");
  cmd->add_option("--min-objects", scene->min_objects, "Minimum objects per scene");
  cmd->add_option("--max-objects", scene->max_objects, "Maximum objects per scene");
}

inline void add_decode_options(CLI::App* cmd, DecodeConfig* decode, std::string* ablation) {
  cmd->add_option("--top-k", decode->top_k, "Maximum detections per image");
  cmd->add_option("--mask-threshold", decode->mask_threshold, "Binary mask threshold");
  cmd->add_option("--score-threshold", decode->score_threshold, "Minimum detection score");
  cmd->add_option("--window", decode->window, "Peak window size (odd)");
  cmd->add_option("--ablation", *ablation, "Assembly mode")
      ->check(CLI::IsMember({"full", "shape-only", "saliency-only"}));
}

// args in natural order, program name excluded.
inline int run(std::vector<std::string> args) {
  CLI::App app{"CenterMask-style instance segmentation, desk scale"};
  app.require_subcommand(1);

  // gen
  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();
  gen_cmd->add_option("--num-scenes", gen.num_scenes, "Scene count");
  gen_cmd->add_option("--seed", gen.seed, "First scene seed");
  add_scene_options(gen_cmd, &gen.scene);

  // train: when --config is given, the file loads first and flags override it.
  RunConfig train_cfg;
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") {
      train_cfg = load_run_config(args[i + 1]);
      break;
    }
  }
  std::string train_config_path, train_resume;
  std::string train_ablation, train_saliency;
  int train_input_size = 0;
  bool canvas_given = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model on synthetic scenes or a dataset");
  train_cmd->add_option("--config", train_config_path, "RunConfig JSON file");
  train_cmd->add_option("--out", train_cfg.out_dir, "Run output directory");
  train_cmd->add_option("--seed", train_cfg.seed, "Run seed");
  train_cmd->add_option("--steps", train_cfg.optim.steps, "Training steps");
  train_cmd->add_option("--batch", train_cfg.optim.batch_size, "Batch size");
  train_cmd->add_option("--lr", train_cfg.optim.learning_rate, "Learning rate");
  train_cmd->add_option("--ablation", train_ablation, "Assembly mode for the mask loss")
      ->check(CLI::IsMember({"full", "shape-only", "saliency-only"}));
  train_cmd->add_option("--saliency-mode", train_saliency, "Saliency head form")
      ->check(CLI::IsMember({"agnostic", "specific"}));
  train_cmd->add_option("--shape-size", train_cfg.model.shape_size, "Local shape size S");
  train_cmd->add_option("--input-size", train_input_size, "Input resolution (square)");
  train_cmd->add_option("--train-scenes", train_cfg.train_scenes, "Training pool size");
  train_cmd->add_option("--eval-scenes", train_cfg.eval_scenes, "Held-out pool size");
  train_cmd->add_option("--dataset", train_cfg.dataset_dir, "Train on an exported dataset");
  train_cmd->add_option("--resume", train_resume, "Resume from a checkpoint");
  add_scene_options(train_cmd, &train_cfg.scene);

  // infer
  InferArgs infer;
  std::string infer_ablation;
  auto* infer_cmd = app.add_subcommand("infer", "Run inference with a checkpoint");
  infer_cmd->add_option("--checkpoint", infer.checkpoint, "Checkpoint file")->required();
  infer_cmd->add_option("--dataset", infer.dataset, "Dataset directory with images")->required();
  infer_cmd->add_option("--out", infer.out, "Output directory")->required();
  infer_cmd->add_flag("--overlays", infer.overlays, "Also write overlay PNGs");
  add_decode_options(infer_cmd, &infer.decode, &infer_ablation);

  // eval
  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score a detections file against a dataset");
  eval_cmd->add_option("--detections", eval.detections, "detections.jsonl")->required();
  eval_cmd->add_option("--dataset", eval.dataset, "Dataset directory")->required();
  eval_cmd->add_option("--out", eval.out, "Directory for report.json");
  eval_cmd->add_option("--num-classes", eval.num_classes, "Class count (default: from data)");

  // ablate
  AblateArgs ablate;
  int ablate_input_size = 0;
  std::string ablate_saliency = "agnostic";
  auto* ablate_cmd =
      app.add_subcommand("ablate", "Train and compare full / shape-only / saliency-only");
  ablate_cmd->add_option("--out", ablate.out, "Output directory")->required();
  ablate_cmd->add_option("--seed", ablate.base.seed, "Run seed");
  ablate_cmd->add_option("--steps", ablate.base.optim.steps, "Training steps per mode");
  ablate_cmd->add_option("--batch", ablate.base.optim.batch_size, "Batch size");
  ablate_cmd->add_option("--lr", ablate.base.optim.learning_rate, "Learning rate");
  ablate_cmd->add_option("--shape-size", ablate.base.model.shape_size, "Local shape size S");
  ablate_cmd->add_option("--input-size", ablate_input_size, "Input resolution (square)");
  ablate_cmd->add_option("--train-scenes", ablate.base.train_scenes, "Training pool size");
  ablate_cmd->add_option("--test-scenes", ablate.test_scenes, "Scenes per test suite");
  ablate_cmd->add_option("--saliency-mode", ablate_saliency, "Saliency head form")
      ->check(CLI::IsMember({"agnostic", "specific"}));
  add_scene_options(ablate_cmd, &ablate.base.scene);

  try {
    canvas_given = std::find(args.begin(), args.end(), "--canvas") != args.end();
    std::reverse(args.begin(), args.end());  // CLI11's vector parse pops from the back
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen_cmd->parsed()) {
      gen.scene.canvas_w = gen.scene.canvas_h;  // --canvas means square
      return cmd_gen(gen);
    }
    if (train_cmd->parsed()) {
      if (!train_ablation.empty()) train_cfg.loss.ablation = ablation_from_string(train_ablation);
      if (!train_saliency.empty()) {
        train_cfg.model.saliency_mode = train_saliency == "specific" ? SaliencyMode::kClassSpecific
                                                                     : SaliencyMode::kClassAgnostic;
      }
      if (train_input_size > 0) {
        train_cfg.scene.canvas_h = train_cfg.scene.canvas_w = train_input_size;
      } else if (canvas_given) {
        train_cfg.scene.canvas_w = train_cfg.scene.canvas_h;
      }
      train_cfg.model.input_h = train_cfg.scene.canvas_h;
      train_cfg.model.input_w = train_cfg.scene.canvas_w;
      train_cfg.model.num_classes = train_cfg.scene.num_classes;
      train_cfg.decode.ablation = train_cfg.loss.ablation;
      return cmd_train(train_cfg, train_resume);
    }
    if (infer_cmd->parsed()) {
      if (!infer_ablation.empty()) infer.decode.ablation = ablation_from_string(infer_ablation);
      return cmd_infer(infer);
    }
    if (eval_cmd->parsed()) return cmd_eval(eval);
    if (ablate_cmd->parsed()) {
      ablate.base.model.saliency_mode = ablate_saliency == "specific"
                                            ? SaliencyMode::kClassSpecific
                                            : SaliencyMode::kClassAgnostic;
      ablate.base.loss.aux_saliency = false;  // identical supervision across modes
      if (ablate_input_size > 0) {
        ablate.base.scene.canvas_h = ablate.base.scene.canvas_w = ablate_input_size;
      } else {
        ablate.base.scene.canvas_w = ablate.base.scene.canvas_h;
      }
      ablate.base.model.input_h = ablate.base.scene.canvas_h;
      ablate.base.model.input_w = ablate.base.scene.canvas_w;
      ablate.base.model.num_classes = ablate.base.scene.num_classes;
      return cmd_ablate(ablate);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

inline int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv + 1, argv + argc));
}

}  // namespace cli
}  // namespace centermask
