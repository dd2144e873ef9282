#include <catch2/catch.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "centermask/checkpoint.hpp"
#include "centermask/cli.hpp"
#include "centermask/records.hpp"
#include "centermask/train.hpp"
#include "oracles.hpp"

using namespace centermask;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

RunConfig tiny_run(const std::string& out_dir) {
  RunConfig cfg;
  cfg.model.num_classes = 2;
  cfg.model.shape_size = 4;
  cfg.model.backbone_channels = {4, 6, 8, 8};
  cfg.model.head_channels = 6;
  cfg.model.input_h = cfg.model.input_w = 32;
  cfg.model.saliency_mode = SaliencyMode::kClassSpecific;
  cfg.scene.canvas_h = cfg.scene.canvas_w = 32;
  cfg.scene.num_classes = 2;
  cfg.scene.min_size_frac = 0.3;
  cfg.scene.max_size_frac = 0.5;
  cfg.optim.steps = 3;
  cfg.optim.batch_size = 2;
  cfg.optim.checkpoint_every = 1;
  cfg.optim.learning_rate = 1e-3;
  cfg.train_scenes = 4;
  cfg.eval_scenes = 0;
  cfg.seed = 5;
  cfg.out_dir = out_dir;
  return cfg;
}

std::vector<double> read_total_losses(const std::string& metrics_path) {
  std::ifstream f(metrics_path);
  std::vector<double> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line).at("loss_total").get<double>());
  }
  return out;
}

}  // namespace

TEST_CASE("checkpoints restore parameters and reject incompatible files", "[pipeline]") {
  TempDir dir("centermask_ckpt");
  ModelConfig cfg;
  cfg.num_classes = 2;
  cfg.shape_size = 4;
  cfg.backbone_channels = {4, 6, 8, 8};
  cfg.head_channels = 6;
  cfg.input_h = cfg.input_w = 32;
  auto model = build_model<float>(cfg, 77);
  std::string path = (dir.path / "model.ckpt").string();
  save_checkpoint(path, model, 123);

  auto loaded = load_checkpoint<float>(path);
  REQUIRE(loaded.trained_steps == 123);
  REQUIRE(loaded.model.config == cfg);
  auto image = Tensor<float>::full({3, 32, 32}, 0.3f);
  auto a = forward(model, image);
  auto b = forward(loaded.model, image);
  REQUIRE(a.heatmap.values() == b.heatmap.values());
  REQUIRE(a.shape.values() == b.shape.values());

  // Corrupt magic -> version error.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  REQUIRE_THROWS_WITH(load_checkpoint<float>(path), Catch::Matchers::Contains("magic"));
}

TEST_CASE("resuming reproduces the uninterrupted run exactly", "[pipeline]") {
  TempDir dir("centermask_resume");
  auto full_cfg = tiny_run((dir.path / "full").string());
  auto result_full = train_model<float>(full_cfg);
  auto full_losses = read_total_losses((dir.path / "full" / "metrics.jsonl").string());
  REQUIRE(full_losses.size() == 3);

  // Stop after two steps, then resume for the third.
  auto short_cfg = tiny_run((dir.path / "short").string());
  short_cfg.optim.steps = 2;
  train_model<float>(short_cfg);

  auto resume_cfg = tiny_run((dir.path / "resumed").string());
  auto result_resumed = train_model<float>(
      resume_cfg, nullptr, (dir.path / "short" / "checkpoint_final.ckpt").string());
  auto resumed_losses = read_total_losses((dir.path / "resumed" / "metrics.jsonl").string());
  REQUIRE(resumed_losses.size() == 1);
  REQUIRE(resumed_losses[0] == Approx(full_losses[2]).margin(1e-6));

  // Final parameters agree bitwise with the uninterrupted run.
  auto full_params = result_full.model.named_parameters();
  auto resumed_params = result_resumed.model.named_parameters();
  for (std::size_t i = 0; i < full_params.size(); ++i) {
    REQUIRE(full_params[i].second.values() == resumed_params[i].second.values());
  }

  // A mismatched run config is rejected.
  auto other = tiny_run((dir.path / "other").string());
  other.model.shape_size = 8;
  REQUIRE_THROWS_WITH(
      train_model<float>(other, nullptr, (dir.path / "short" / "checkpoint_final.ckpt").string()),
      Catch::Matchers::Contains("does not match"));
}

TEST_CASE("run configs round trip through json", "[pipeline]") {
  auto cfg = tiny_run("somewhere");
  cfg.loss.ablation = AblationMode::kSaliencyOnly;
  cfg.decode.top_k = 37;
  cfg.scene.overlap_level = 0.75;
  nlohmann::json j = cfg;
  auto back = j.get<RunConfig>();
  REQUIRE(back.loss.ablation == AblationMode::kSaliencyOnly);
  REQUIRE(back.decode.top_k == 37);
  REQUIRE(back.scene.overlap_level == 0.75);
  REQUIRE(back.model.shape_size == cfg.model.shape_size);
  REQUIRE(back.out_dir == "somewhere");
}

TEST_CASE("detection records round trip through jsonl", "[pipeline]") {
  TempDir dir("centermask_records");
  Rng rng(3);
  std::vector<DetectionRecord> records;
  for (int i = 0; i < 5; ++i) {
    DetectionRecord rec;
    rec.image_id = static_cast<std::uint64_t>(i);
    rec.class_id = i % 2;
    rec.score = rng.uniform();
    rec.box = Box{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(2, 8), rng.uniform(2, 8)};
    rec.mask = BinaryMask(16, 16);
    for (auto& v : rec.mask.data) v = rng.uniform() < 0.3 ? 1 : 0;
    records.push_back(std::move(rec));
  }
  std::string path = (dir.path / "detections.jsonl").string();
  write_detections(path, records);
  auto back = read_detections(path);
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    REQUIRE(back[i].image_id == records[i].image_id);
    REQUIRE(back[i].class_id == records[i].class_id);
    REQUIRE(back[i].score == Approx(records[i].score));
    REQUIRE(back[i].mask == records[i].mask);
  }
}

TEST_CASE("the cli wires gen, train, infer, and eval together", "[pipeline]") {
  TempDir dir("centermask_cli_flow");
  std::string data_dir = (dir.path / "data").string();
  std::string run_dir = (dir.path / "run").string();
  std::string infer_dir = (dir.path / "infer").string();

  REQUIRE(cli::run({"gen", "--out", data_dir, "--num-scenes", "3", "--seed", "9", "--canvas", "32",
                    "--num-classes", "2"}) == 0);
  REQUIRE(fs::exists(fs::path(data_dir) / "annotations.jsonl"));

  // Train from a config file; flags override pieces of it.
  auto cfg = tiny_run(run_dir);
  std::string cfg_path = (dir.path / "run.json").string();
  {
    std::ofstream f(cfg_path);
    nlohmann::json j = cfg;
    f << j.dump(2);
  }
  REQUIRE(cli::run({"train", "--config", cfg_path, "--steps", "2", "--out", run_dir}) == 0);
  std::string ckpt = (fs::path(run_dir) / "checkpoint_final.ckpt").string();
  REQUIRE(fs::exists(ckpt));
  REQUIRE(load_checkpoint<float>(ckpt).trained_steps == 2);

  REQUIRE(cli::run({"infer", "--checkpoint", ckpt, "--dataset", data_dir, "--out", infer_dir,
                    "--top-k", "10", "--mask-threshold", "0.4", "--overlays"}) == 0);
  std::string det_path = (fs::path(infer_dir) / "detections.jsonl").string();
  REQUIRE(fs::exists(det_path));
  REQUIRE(fs::exists(fs::path(infer_dir) / "overlays" / "000009.png"));
  auto dets = read_detections(det_path);
  for (auto& d : dets) REQUIRE(d.mask.h == 32);

  REQUIRE(cli::run({"eval", "--detections", det_path, "--dataset", data_dir, "--out",
                    (dir.path / "eval").string()}) == 0);
  REQUIRE(fs::exists(dir.path / "eval" / "report.json"));

  // Usage and runtime failures map to exit codes 1 and 2.
  REQUIRE(cli::run({"no-such-command"}) == 1);
  REQUIRE(cli::run({"train", "--bogus-flag"}) == 1);
  REQUIRE(cli::run({"infer", "--checkpoint", "/nonexistent.ckpt", "--dataset", data_dir, "--out",
                    infer_dir}) == 2);
}

TEST_CASE("ablate trains all three modes and writes the comparison table", "[pipeline]") {
  TempDir dir("centermask_ablate_smoke");
  REQUIRE(cli::run({"ablate", "--out", dir.str(), "--steps", "3", "--batch", "1", "--canvas",
                    "32", "--num-classes", "2", "--shape-size", "4", "--train-scenes", "2",
                    "--test-scenes", "2", "--seed", "4"}) == 0);
  auto table = nlohmann::json::parse(std::ifstream((dir.path / "ablation.json").string()));
  REQUIRE(table.size() == 6);  // 3 modes x 2 suites
  std::set<std::string> modes;
  for (auto& row : table) {
    modes.insert(row.at("mode").get<std::string>());
    REQUIRE(row.at("ap").get<double>() >= 0.0);
  }
  REQUIRE(modes == std::set<std::string>{"full", "shape-only", "saliency-only"});
  for (const char* mode : {"full", "shape-only", "saliency-only"}) {
    REQUIRE(fs::exists(dir.path / "overlays" / mode));
  }
}

TEST_CASE("the real binary honors CENTERMASK_THREADS and stays deterministic", "[pipeline]") {
  TempDir dir("centermask_threads");
  std::string one = (dir.path / "one").string();
  std::string two = (dir.path / "two").string();
  auto run_gen_train = [&](const std::string& out, const char* threads) {
    std::string cmd = detail::cat(
        "CENTERMASK_THREADS=", threads, " ", CENTERMASK_CLI_PATH,
        " train --out ", out,
        " --steps 2 --batch 1 --canvas 32 --num-classes 2 --shape-size 4",
        " --train-scenes 2 --eval-scenes 0 --seed 3 > /dev/null 2>&1");
    return std::system(cmd.c_str());
  };
  REQUIRE(run_gen_train(one, "1") == 0);
  REQUIRE(run_gen_train(two, "2") == 0);
  // Kernel parallelism must not change the bytes of the result.
  std::ifstream f1((fs::path(one) / "checkpoint_final.ckpt").string(), std::ios::binary);
  std::ifstream f2((fs::path(two) / "checkpoint_final.ckpt").string(), std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(!b1.empty());
  REQUIRE(b1 == b2);
}

TEST_CASE("evaluating ground truth as detections scores AP one", "[pipeline]") {
  TempDir dir("centermask_gt_eval");
  SceneConfig cfg;
  cfg.canvas_h = cfg.canvas_w = 48;
  auto scenes = generate_scenes(cfg, 30, 4);
  export_dataset(scenes, dir.str());

  std::vector<DetectionRecord> records;
  for (const auto& scene : scenes) {
    for (const auto& inst : scene.instances) {
      DetectionRecord rec;
      rec.image_id = scene.id;
      rec.class_id = inst.class_id;
      rec.score = 1.0;
      rec.box = inst.box;
      rec.mask = inst.mask;
      records.push_back(std::move(rec));
    }
  }
  std::string det_path = (dir.path / "detections.jsonl").string();
  write_detections(det_path, records);

  cli::EvalArgs args;
  args.detections = det_path;
  args.dataset = dir.str();
  args.out = (dir.path / "report").string();
  REQUIRE(cli::cmd_eval(args) == 0);
  auto report = nlohmann::json::parse(std::ifstream((dir.path / "report" / "report.json").string()));
  REQUIRE(report.at("ap").get<double>() == Approx(1.0));

  // An empty detections file scores zero.
  std::ofstream empty((dir.path / "empty.jsonl").string());
  empty.close();
  cli::EvalArgs empty_args = args;
  empty_args.detections = (dir.path / "empty.jsonl").string();
  empty_args.out = (dir.path / "report0").string();
  REQUIRE(cli::cmd_eval(empty_args) == 0);
  auto report0 = nlohmann::json::parse(std::ifstream((dir.path / "report0" / "report.json").string()));
  REQUIRE(report0.at("ap").get<double>() == 0.0);
}
