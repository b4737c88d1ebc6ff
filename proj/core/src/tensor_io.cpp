#include "fedcrfd/tensor_io.hpp"

#include <array>
#include <bit>
#include <algorithm>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "fedcrfd/errors.hpp"

namespace fedcrfd {

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  std::array<unsigned char, sizeof(T)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T));
  if (!in) throw IoError("tensor stream truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

std::size_t encoded_size(const Tensor& t) { return 4 + 4 + 1 + 8 * t.rank() + 8 * t.size(); }

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic, 4);
  put_le<std::uint32_t>(out, kTensorFormatVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    for (double v : t.data()) put_le<double>(out, v);
  }
  if (!out) throw IoError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kTensorMagic, 4) != 0) throw IoError("bad tensor magic (expected FCRT)");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kTensorFormatVersion) throw IoError("unsupported tensor format version " + std::to_string(version));
  const auto rank = get_le<std::uint8_t>(in);
  if (rank > Tensor::kMaxRank) throw IoError("tensor rank " + std::to_string(rank) + " exceeds 4");
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(in));
  std::vector<double> data(shape_numel(shape));
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw IoError("tensor payload truncated");
  } else {
    for (auto& v : data) v = get_le<double>(in);
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open tensor file " + path.string());
  return read_tensor(in);
}

}  // namespace fedcrfd
