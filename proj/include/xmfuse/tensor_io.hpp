/* Copyright 2026 The xmfuse Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef XMFUSE_TENSOR_IO_HPP_
#define XMFUSE_TENSOR_IO_HPP_

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

#include "xmfuse/core.hpp"

namespace xmfuse {

// On-disk layout, all little-endian:
//   magic "SMT1" | dtype u8 (0 = float32, 1 = int32) | rank u32 |
//   dims rank x u32 | payload, row-major
// Label tensors use int32 with -1 encoding the ignore sentinel.

enum class Dtype : std::uint8_t { kF32 = 0, kI32 = 1 };

struct Tensor {
  Dtype dtype = Dtype::kF32;
  std::vector<std::uint32_t> dims;
  std::vector<float> f32;
  std::vector<std::int32_t> i32;

  // Empty product convention: a rank-0 tensor is a scalar.
  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError("tensor: truncated header");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline float get_f32(std::istream& in) {
  std::uint32_t bits = get_u32(in);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& out, const Tensor& t) {
  const std::size_t n = t.element_count();
  if (t.dtype == Dtype::kF32 && t.f32.size() != n)
    throw ShapeError("write_tensor: payload size does not match dims");
  if (t.dtype == Dtype::kI32 && t.i32.size() != n)
    throw ShapeError("write_tensor: payload size does not match dims");
  out.write("SMT1", 4);
  const auto dtype = static_cast<char>(t.dtype);
  out.write(&dtype, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u32(out, d);
  if (t.dtype == Dtype::kF32) {
    for (float v : t.f32) detail::put_f32(out, v);
  } else {
    for (std::int32_t v : t.i32)
      detail::put_u32(out, static_cast<std::uint32_t>(v));
  }
  if (!out) throw DataError("write_tensor: stream failure");
}

inline Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SMT1", 4) != 0)
    throw DataError("tensor: bad magic");
  char dtype_byte;
  in.read(&dtype_byte, 1);
  if (!in) throw DataError("tensor: truncated header");
  if (dtype_byte != 0 && dtype_byte != 1)
    throw DataError("tensor: unknown dtype");
  Tensor t;
  t.dtype = static_cast<Dtype>(dtype_byte);
  const std::uint32_t rank = detail::get_u32(in);
  if (rank > 8) throw DataError("tensor: implausible rank");
  t.dims.resize(rank);
  for (auto& d : t.dims) d = detail::get_u32(in);
  const std::size_t n = t.element_count();
  if (t.dtype == Dtype::kF32) {
    t.f32.resize(n);
    for (auto& v : t.f32) v = detail::get_f32(in);
  } else {
    t.i32.resize(n);
    for (auto& v : t.i32)
      v = static_cast<std::int32_t>(detail::get_u32(in));
  }
  if (!in) throw DataError("tensor: truncated payload");
  return t;
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  write_tensor(out, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  return read_tensor(in);
}

// Conversions between the file payloads (float32/int32) and the in-memory
// double-precision types.

inline Tensor tensor_from_matrix(const Matrix& m) {
  Tensor t;
  t.dtype = Dtype::kF32;
  t.dims = {static_cast<std::uint32_t>(m.rows()),
            static_cast<std::uint32_t>(m.cols())};
  t.f32.reserve(m.size());
  for (double v : m.data()) t.f32.push_back(static_cast<float>(v));
  return t;
}

inline Matrix matrix_from_tensor(const Tensor& t) {
  if (t.dtype != Dtype::kF32 || t.dims.size() != 2)
    throw DataError("expected a rank-2 float tensor");
  Matrix m(t.dims[0], t.dims[1]);
  for (std::size_t i = 0; i < t.f32.size(); ++i)
    m.data()[i] = static_cast<double>(t.f32[i]);
  return m;
}

inline Tensor tensor_from_labels(std::span<const std::int32_t> labels) {
  Tensor t;
  t.dtype = Dtype::kI32;
  t.dims = {static_cast<std::uint32_t>(labels.size())};
  t.i32.assign(labels.begin(), labels.end());
  return t;
}

inline std::vector<std::int32_t> labels_from_tensor(const Tensor& t) {
  if (t.dtype != Dtype::kI32 || t.dims.size() != 1)
    throw DataError("expected a rank-1 int tensor");
  return t.i32;
}

inline Tensor tensor_from_vector(std::span<const double> v) {
  Tensor t;
  t.dtype = Dtype::kF32;
  t.dims = {static_cast<std::uint32_t>(v.size())};
  t.f32.reserve(v.size());
  for (double x : v) t.f32.push_back(static_cast<float>(x));
  return t;
}

inline std::vector<double> vector_from_tensor(const Tensor& t) {
  if (t.dtype != Dtype::kF32 || t.dims.size() != 1)
    throw DataError("expected a rank-1 float tensor");
  return std::vector<double>(t.f32.begin(), t.f32.end());
}

}  // namespace xmfuse

#endif  // XMFUSE_TENSOR_IO_HPP_
