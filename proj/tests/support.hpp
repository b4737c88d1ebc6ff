#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fedcrfd/federation.hpp"
#include "fedcrfd/partition.hpp"
#include "fedcrfd/rng.hpp"
#include "fedcrfd/tensor.hpp"

namespace fedcrfd::testing {

/// Small federation: 48x48 images, 12 patients, 2 slices.
inline DataConfig tiny_data() {
  DataConfig d;
  d.image_size = 48;
  d.train_patients = 12;
  d.test_patients = 2;
  d.slices = 2;
  d.beta = 0.2;
  return d;
}

inline DataConfig tiny_single_client() {
  DataConfig d = tiny_data();
  d.client_modalities = {0};
  d.masks = {{MaskKind::kUniform1d, 5.0}};
  return d;
}

inline FederationConfig tiny_federation() {
  FederationConfig f;
  f.rounds = 2;
  f.local_epochs = 1;
  f.batch_size = 4;
  f.arch.image_size = 48;
  f.arch.channels = {4, 8};
  f.arch.classifier_hidden = 16;
  return f;
}

/// Hand-rolled generator for property tests.
struct Gen {
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  Tensor tensor(Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
  }
  std::size_t size(std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }
  double real(double lo, double hi) { return rng.uniform(lo, hi); }

  Rng rng;
};

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("fedcrfd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fedcrfd::testing
