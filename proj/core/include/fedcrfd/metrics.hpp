#pragma once

#include <limits>

#include "fedcrfd/tensor.hpp"

namespace fedcrfd {

/// Returned by psnr when prediction and ground truth are identical.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(data_max^2 / MSE). Inputs are H x W or any equal shapes.
double psnr(const Tensor& pred, const Tensor& gt, double data_max);

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean local SSIM over the valid region of a normalized Gaussian window. Inputs are H x W.
double ssim(const Tensor& pred, const Tensor& gt, double data_max, const SsimOptions& options = {});

/// Normalized 1D Gaussian taps used by ssim.
std::vector<double> gaussian_taps(std::size_t window, double sigma);

}  // namespace fedcrfd
