// SPDX-License-Identifier: Apache-2.0
#include "htcl/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace htcl {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'H', 'T', 'C', 'V'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void put(std::ofstream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::ifstream& is, const std::filesystem::path& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IoError("truncated tensor file " + path.string());
  return v;
}

struct Header {
  DType dtype;
  Shape shape;
};

Header read_header(std::ifstream& is, const std::filesystem::path& path) {
  if (!is) throw IoError("cannot open tensor file " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad magic in " + path.string());
  if (get<std::uint32_t>(is, path) != kVersion) throw IoError("unsupported tensor file version in " + path.string());
  const auto dt = get<std::uint8_t>(is, path);
  if (dt > 1) throw IoError("unknown dtype tag in " + path.string());
  const auto ndim = get<std::uint8_t>(is, path);
  Header h{static_cast<DType>(dt), {}};
  for (unsigned i = 0; i < ndim; ++i) h.shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(is, path)));
  return h;
}

template <typename Stored, typename T>
Tensor<T> read_payload(std::ifstream& is, const Shape& shape, const std::filesystem::path& path) {
  std::vector<Stored> raw(shape_numel(shape));
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(Stored)))) {
    throw IoError("truncated tensor payload in " + path.string());
  }
  return Tensor<T>(shape, std::vector<T>(raw.begin(), raw.end()));
}

}  // namespace

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write tensor file " + path.string());
  if (t.ndim() > 255) throw ShapeError("tensor rank exceeds file format limit");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw IoError("failed writing " + path.string());
}

template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  const Header h = read_header(is, path);
  if (h.dtype == DType::f32) return read_payload<float, T>(is, h.shape, path);
  return read_payload<double, T>(is, h.shape, path);
}

DType peek_tensor_dtype(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  return read_header(is, path).dtype;
}

template void write_tensor(const std::filesystem::path&, const Tensor<float>&);
template void write_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read_tensor(const std::filesystem::path&);
template Tensor<double> read_tensor(const std::filesystem::path&);

}  // namespace htcl
