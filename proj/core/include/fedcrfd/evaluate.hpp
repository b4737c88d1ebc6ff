#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedcrfd/model.hpp"
#include "fedcrfd/partition.hpp"

namespace fedcrfd {

struct MetricSummary {
  std::size_t samples = 0;
  double psnr_mean = 0.0;
  double psnr_std = 0.0;
  double ssim_mean = 0.0;
  double ssim_std = 0.0;
  /// Slices whose prediction equals the ground truth exactly (PSNR sentinel).
  std::size_t identical = 0;
};

struct EvalReport {
  std::vector<MetricSummary> clients;
  /// Pooled over every test slice, i.e. the test-size-weighted mean of the client means.
  MetricSummary overall;
};

/// Maps (client, samples, batch indices) to N x 1 x H x W predictions.
using Reconstructor =
    std::function<Tensor(std::size_t client, std::span<const SliceSample> samples, std::span<const std::size_t> batch)>;

/// PSNR/SSIM of every client's test slices, using the per-volume ground-truth maximum.
EvalReport evaluate(const FederatedData& data, const Reconstructor& reconstruct, std::size_t batch_size = 16);

/// Global E_I and D with client k's own E_S.
Reconstructor fedcrfd_reconstructor(const ParamSet& global, std::span<const ParamSet> specific, bool use_fusion);
/// One shared plain model, or one per client when `models.size()` equals the client count.
Reconstructor plain_reconstructor(std::span<const PlainModel> models);
/// Returns the ground truth.
Reconstructor passthrough_reconstructor();
/// Returns the zero-filled input unchanged.
Reconstructor zero_filled_reconstructor();

/// Columns: client,samples,psnr_mean,psnr_std,ssim_mean,ssim_std; client rows then "overall".
std::string eval_csv(const EvalReport& report);
std::string format_report(const EvalReport& report);

}  // namespace fedcrfd
