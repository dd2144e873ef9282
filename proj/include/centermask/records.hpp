#pragma once

// Line-delimited detection records: image_id, class, score, box, and the mask
// as uncompressed run-length counts (row-major, leading zero run).

#include <json.hpp>

#include <fstream>
#include <string>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/decode.hpp"

namespace centermask {

struct DetectionRecord {
  std::uint64_t image_id = 0;
  int class_id = 0;
  double score = 0;
  Box box;
  BinaryMask mask;
};

inline nlohmann::json detection_to_json(const DetectionRecord& rec) {
  return nlohmann::json{
      {"image_id", rec.image_id},
      {"class_id", rec.class_id},
      {"score", rec.score},
      {"box", {rec.box.x, rec.box.y, rec.box.h, rec.box.w}},
      {"mask", {{"size", {rec.mask.h, rec.mask.w}}, {"counts", rle_encode(rec.mask)}}},
  };
}

inline void write_detections(const std::string& path, const std::vector<DetectionRecord>& records) {
  std::ofstream f(path);
  if (!f) throw IoError(detail::cat("cannot open for writing: ", path));
  for (const auto& rec : records) f << detection_to_json(rec).dump() << "\n";
  if (!f) throw IoError(detail::cat("write failed: ", path));
}

inline std::vector<DetectionRecord> read_detections(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(detail::cat("cannot open: ", path));
  std::vector<DetectionRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      DetectionRecord rec;
      rec.image_id = j.at("image_id").get<std::uint64_t>();
      rec.class_id = j.at("class_id").get<int>();
      rec.score = j.at("score").get<double>();
      auto box = j.at("box");
      rec.box = Box{box.at(0).get<double>(), box.at(1).get<double>(), box.at(2).get<double>(),
                    box.at(3).get<double>()};
      auto mask = j.at("mask");
      int h = mask.at("size").at(0).get<int>();
      int w = mask.at("size").at(1).get<int>();
      rec.mask = rle_decode(h, w, mask.at("counts").get<std::vector<std::int64_t>>());
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(detail::cat(path, ":", line_no, ": bad detection record: ", e.what()));
    }
  }
  return out;
}

}  // namespace centermask
