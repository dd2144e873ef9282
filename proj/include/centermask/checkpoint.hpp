#pragma once

// Checkpoint files: a JSON header (format version, model config, tensor
// manifest, training progress) followed by named tensor blobs, and optionally
// the Adam moment buffers for exact resume.

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/model.hpp"
#include "centermask/optim.hpp"
#include "centermask/serialize.hpp"

namespace centermask {

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'C', 'K', 'P', 'T', '0', '1'};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"num_classes", c.num_classes},
      {"shape_size", c.shape_size},
      {"output_stride", c.output_stride},
      {"saliency_mode", c.saliency_mode == SaliencyMode::kClassSpecific ? "specific" : "agnostic"},
      {"backbone_channels", c.backbone_channels},
      {"head_channels", c.head_channels},
      {"input_h", c.input_h},
      {"input_w", c.input_w},
  };
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("num_classes").get_to(c.num_classes);
  j.at("shape_size").get_to(c.shape_size);
  j.at("output_stride").get_to(c.output_stride);
  std::string mode = j.at("saliency_mode").get<std::string>();
  if (mode == "specific") {
    c.saliency_mode = SaliencyMode::kClassSpecific;
  } else if (mode == "agnostic") {
    c.saliency_mode = SaliencyMode::kClassAgnostic;
  } else {
    throw IoError(detail::cat("unknown saliency_mode: ", mode));
  }
  j.at("backbone_channels").get_to(c.backbone_channels);
  j.at("head_channels").get_to(c.head_channels);
  j.at("input_h").get_to(c.input_h);
  j.at("input_w").get_to(c.input_w);
}

template <typename T>
struct Checkpoint {
  ModelParams<T> model;
  std::int64_t trained_steps = 0;
  // Optimizer state, present when saved from a training run.
  bool has_optimizer = false;
  std::vector<std::vector<T>> adam_m;
  std::vector<std::vector<T>> adam_v;
  std::int64_t adam_steps = 0;
};

template <typename T>
void save_checkpoint(const std::string& path, const ModelParams<T>& model,
                     std::int64_t trained_steps, AdamOptimizer<T>* optimizer = nullptr) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(detail::cat("cannot open for writing: ", path));

  auto named = model.named_parameters();
  nlohmann::json header;
  header["config"] = model.config;
  header["trained_steps"] = trained_steps;
  header["tensors"] = nlohmann::json::array();
  for (auto& [name, t] : named) header["tensors"].push_back(name);
  header["optimizer"] = optimizer != nullptr;
  if (optimizer) header["adam_steps"] = optimizer->step_count();
  std::string header_str = header.dump();

  f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  std::uint64_t len = header_str.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (auto& [name, t] : named) write_tensor(f, t);
  if (optimizer) {
    for (auto& m : optimizer->first_moments()) {
      write_tensor(f, Tensor<T>::from_data({static_cast<int>(m.size())}, m));
    }
    for (auto& v : optimizer->second_moments()) {
      write_tensor(f, Tensor<T>::from_data({static_cast<int>(v.size())}, v));
    }
  }
  if (!f) throw IoError(detail::cat("write failed: ", path));
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(detail::cat("cannot open: ", path));
  char magic[sizeof(kCheckpointMagic)];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError(detail::cat(path, ": not a compatible checkpoint (bad magic/version)"));
  }
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header_str(len, '\0');
  f.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!f) throw IoError(detail::cat(path, ": truncated header"));

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(detail::cat(path, ": bad header: ", e.what()));
  }

  Checkpoint<T> ckpt;
  ModelConfig config = header.at("config").get<ModelConfig>();
  ckpt.model = build_model<T>(config, 0);  // structure only; weights replaced below
  ckpt.trained_steps = header.at("trained_steps").get<std::int64_t>();

  auto named = ckpt.model.named_parameters();
  const auto& manifest = header.at("tensors");
  if (manifest.size() != named.size()) {
    throw IoError(detail::cat(path, ": tensor manifest has ", manifest.size(), " entries, expected ",
                              named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (manifest[i].get<std::string>() != named[i].first) {
      throw IoError(detail::cat(path, ": tensor ", i, " is '", manifest[i].get<std::string>(),
                                "', expected '", named[i].first, "'"));
    }
    Tensor<T> loaded = read_tensor<T>(f);
    if (loaded.shape() != named[i].second.shape()) {
      throw IoError(detail::cat(path, ": tensor '", named[i].first, "' has shape ",
                                detail::shape_str(loaded.shape()), ", expected ",
                                detail::shape_str(named[i].second.shape())));
    }
    named[i].second.mutable_values() = loaded.values();
  }

  if (header.value("optimizer", false)) {
    ckpt.has_optimizer = true;
    ckpt.adam_steps = header.at("adam_steps").get<std::int64_t>();
    ckpt.adam_m.reserve(named.size());
    ckpt.adam_v.reserve(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) ckpt.adam_m.push_back(read_tensor<T>(f).values());
    for (std::size_t i = 0; i < named.size(); ++i) ckpt.adam_v.push_back(read_tensor<T>(f).values());
  }
  return ckpt;
}

}  // namespace centermask
