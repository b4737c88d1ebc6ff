#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "fedcrfd/tensor.hpp"

namespace fedcrfd {

// Binary layout: "FCRT" | u32 version=1 | u8 rank | u64 dims[rank] | f64 payload, all little-endian.
inline constexpr char kTensorMagic[4] = {'F', 'C', 'R', 'T'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

/// Encoded size in bytes of `t`.
std::size_t encoded_size(const Tensor& t);

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace fedcrfd
