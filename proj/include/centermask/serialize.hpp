#pragma once

// Flat little-endian tensor blobs: magic, dtype code, ndim, dims, raw data.
// Used by checkpoints and by decode-only workflows.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/tensor.hpp"

namespace centermask {

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are little-endian; big-endian hosts are unsupported");

namespace detail {

constexpr char kTensorMagic[4] = {'C', 'M', 'T', 'B'};

template <typename T>
constexpr std::uint8_t dtype_code() {
  if constexpr (sizeof(T) == 4) {
    return 1;
  } else {
    return 2;
  }
}

template <typename V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw IoError("tensor blob: unexpected end of stream");
  return v;
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(detail::kTensorMagic, 4);
  detail::write_pod(os, detail::dtype_code<T>());
  detail::write_pod(os, static_cast<std::uint8_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) detail::write_pod(os, static_cast<std::uint32_t>(t.dim(i)));
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw IoError("tensor blob: write failed");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, detail::kTensorMagic, 4) != 0) {
    throw IoError("tensor blob: bad magic");
  }
  auto dtype = detail::read_pod<std::uint8_t>(is);
  if (dtype != detail::dtype_code<T>()) {
    throw IoError(detail::cat("tensor blob: dtype code ", int(dtype), " does not match requested ",
                              int(detail::dtype_code<T>())));
  }
  auto ndim = detail::read_pod<std::uint8_t>(is);
  std::vector<int> shape(ndim);
  std::int64_t count = 1;
  for (auto& d : shape) {
    d = static_cast<int>(detail::read_pod<std::uint32_t>(is));
    count *= d;
  }
  std::vector<T> data(static_cast<std::size_t>(count));
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (!is) throw IoError("tensor blob: truncated data section");
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

}  // namespace centermask
