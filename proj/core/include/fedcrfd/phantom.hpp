#pragma once

#include <cstdint>
#include <vector>

#include "fedcrfd/tensor.hpp"

namespace fedcrfd {

inline constexpr std::size_t kNumTissueLabels = 5;
/// Number of built-in modality intensity tables.
inline constexpr std::size_t kMaxModalities = 3;

/// Tissue label map: 0 is background, 1..5 are tissues.
struct AnatomyPhantom {
  std::size_t size = 0;
  std::uint64_t patient = 0;
  std::size_t slice = 0;
  std::vector<std::uint8_t> labels;  // size x size, row-major

  friend bool operator==(const AnatomyPhantom&, const AnatomyPhantom&) = default;
};

/// 4-8 overlapping ellipses whose geometry drifts smoothly with the slice index.
AnatomyPhantom generate_phantom(std::uint64_t seed, std::size_t size, std::uint64_t patient, std::size_t slice);

/// Intensity of `label` under modality `j`.
double tissue_intensity(std::size_t modality, std::uint8_t label);

/// Per-tissue intensities plus N(0, 0.01^2) noise on the foreground, clipped to [0, 1].
Tensor render_modality(const AnatomyPhantom& phantom, std::size_t modality, std::uint64_t noise_seed);

}  // namespace fedcrfd
