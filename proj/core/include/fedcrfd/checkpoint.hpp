#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fedcrfd/model.hpp"
#include "fedcrfd/optim.hpp"
#include "fedcrfd/tensor.hpp"

namespace fedcrfd {

/// Named tensors plus the metadata needed to rebuild models from them.
struct Checkpoint {
  std::string method;
  std::size_t round = 0;
  std::size_t clients = 0;
  /// Fed-CRFD decoding mode the weights were trained with.
  bool use_fusion = true;
  ArchConfig arch;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
  void add(const std::string& prefix, const ParamSet& params);
  /// Copies every "<prefix><param name>" tensor into `params`; throws ConfigError on a missing
  /// name or shape mismatch.
  void restore(const std::string& prefix, ParamSet& params) const;
};

/// Writes `<stem>.bin` (concatenated tensor records) and `<stem>.json` (name -> offset/shape).
void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ckpt);
/// Accepts the stem or either of the two file paths.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fedcrfd
