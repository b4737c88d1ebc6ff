#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fedcrfd/tensor.hpp"

namespace fedcrfd {

using Complex = std::complex<double>;

/// Row-major H x W complex grid.
struct ComplexImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Complex> data;

  Complex& at(std::size_t r, std::size_t c) { return data[r * width + c]; }
  const Complex& at(std::size_t r, std::size_t c) const { return data[r * width + c]; }
};

/// Unnormalized forward 2D DFT of a real H x W image (rank-2 tensor).
ComplexImage fft2(const Tensor& image);
ComplexImage fft2(const ComplexImage& image);
/// Inverse 2D DFT, scaled by 1/(H W) so that ifft2(fft2(y)) == y.
ComplexImage ifft2(const ComplexImage& spectrum);

/// Moves the zero frequency to (H/2, W/2) and back.
ComplexImage fftshift(const ComplexImage& spectrum);
ComplexImage ifftshift(const ComplexImage& spectrum);

enum class MaskKind { kUniform1d, kRandom2d, kCartesian1d, kRadial2d };

MaskKind parse_mask_kind(std::string_view name);
std::string_view mask_kind_name(MaskKind kind);

/// Mask kind plus acceleration, e.g. "uniform_1d:5".
struct MaskSpec {
  MaskKind kind = MaskKind::kUniform1d;
  double acceleration = 5.0;

  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

MaskSpec parse_mask_spec(std::string_view text);
std::string mask_spec_str(const MaskSpec& spec);

/// Binary sampling pattern over the centered (fftshifted) spectrum.
struct UndersampleMask {
  MaskKind kind = MaskKind::kUniform1d;
  double acceleration = 1.0;
  double center_fraction = 0.08;
  std::uint64_t seed = 0;
  Tensor grid;  // size x size, entries 0 or 1

  double sampled_fraction() const { return grid.mean(); }
};

/// R == 1 yields the all-ones mask for any kind. Otherwise R >= 2 and cf in (0, 0.2].
UndersampleMask make_mask(MaskKind kind, double acceleration, std::size_t size, double center_fraction,
                          std::uint64_t seed);

/// Side of the fully sampled center band (columns) or square.
std::size_t center_width(std::size_t size, double center_fraction);

/// x = |IFFT2(mask . FFT2(y))| with the mask applied to the centered spectrum.
Tensor undersample(const Tensor& y, const UndersampleMask& mask);

}  // namespace fedcrfd
