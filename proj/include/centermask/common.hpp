#pragma once

// Shared small types and helpers used across the centermask library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace centermask {

// Thrown when tensor dimensions or op arguments do not satisfy a contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown on malformed files, incompatible checkpoints, bad annotations.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << args);
  return oss.str();
}

}  // namespace detail

// Axis-aligned box in pixel coordinates. (x, y) is the top-left corner.
struct Box {
  double x = 0;
  double y = 0;
  double h = 0;
  double w = 0;

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double area() const { return h * w; }
};

// Dense binary mask, row-major, one byte per pixel (0 or 1).
struct BinaryMask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int height, int width)
      : h(height), w(width), data(static_cast<std::size_t>(height) * width, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (std::uint8_t v : data) n += (v != 0);
    return n;
  }

  bool operator==(const BinaryMask& o) const { return h == o.h && w == o.w && data == o.data; }
};

// Tight bounding box of the foreground pixels. Returns false if the mask is empty.
inline bool tight_box(const BinaryMask& mask, Box* out) {
  int ymin = mask.h, ymax = -1, xmin = mask.w, xmax = -1;
  for (int y = 0; y < mask.h; ++y) {
    for (int x = 0; x < mask.w; ++x) {
      if (!mask.at(y, x)) continue;
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
    }
  }
  if (ymax < 0) return false;
  out->x = xmin;
  out->y = ymin;
  out->w = xmax - xmin + 1;
  out->h = ymax - ymin + 1;
  return true;
}

// Deterministic, platform-independent PRNG (splitmix64 core). The standard
// <random> distributions are implementation-defined, so dataset generation and
// weight init go through this instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng r(seed ^ (0x632be59bd9b4e019ull * (stream + 1)));
  return r.next_u64();
}

}  // namespace centermask
