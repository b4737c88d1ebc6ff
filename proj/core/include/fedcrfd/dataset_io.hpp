#pragma once

#include <filesystem>

#include "fedcrfd/partition.hpp"

namespace fedcrfd {

/// Writes `partition.json`, `c{k}/mask.fcrt`, and `c{k}/p{pid}_s{slice}_{x|y}.fcrt` for every
/// horizontal, vertical, and test sample. Output is byte-identical for equal inputs.
void save_dataset(const std::filesystem::path& dir, const FederatedData& data);

/// Inverse of save_dataset. The salt itself is never written, so the loaded config carries salt 0.
FederatedData load_dataset(const std::filesystem::path& dir);

std::filesystem::path sample_path(const std::filesystem::path& dir, std::size_t client, std::uint64_t patient,
                                  std::size_t slice, char which);

}  // namespace fedcrfd
