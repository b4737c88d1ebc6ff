#include "fedcrfd/metrics.hpp"

#include <cmath>
#include <vector>

#include "fedcrfd/errors.hpp"

namespace fedcrfd {

namespace {

// Valid-region separable filtering of an H x W image.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t H, std::size_t W,
                                 const std::vector<double>& taps) {
  const std::size_t n = taps.size();
  const std::size_t oh = H - n + 1, ow = W - n + 1;
  std::vector<double> rows(H * ow, 0.0);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += taps[k] * img[r * W + c + k];
      rows[r * ow + c] = acc;
    }
  }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += taps[k] * rows[(r + k) * ow + c];
      out[r * ow + c] = acc;
    }
  }
  return out;
}

}  // namespace

double psnr(const Tensor& pred, const Tensor& gt, double data_max) {
  require_same_shape("psnr", pred, gt);
  if (!(data_max > 0.0)) throw ConfigError("psnr: data_max must be positive");
  if (pred.empty()) throw ShapeError("psnr: empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - gt[i];
    se += d * d;
  }
  if (se == 0.0) return kPsnrIdentical;
  const double mse = se / static_cast<double>(pred.size());
  return 10.0 * std::log10(data_max * data_max / mse);
}

std::vector<double> gaussian_taps(std::size_t window, double sigma) {
  std::vector<double> taps(window);
  const double c = (static_cast<double>(window) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < window; ++i) {
    const double x = static_cast<double>(i) - c;
    taps[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    total += taps[i];
  }
  for (double& t : taps) t /= total;
  return taps;
}

double ssim(const Tensor& pred, const Tensor& gt, double data_max, const SsimOptions& o) {
  require_same_shape("ssim", pred, gt);
  if (pred.rank() != 2) throw ShapeError("ssim: expected a single-channel H x W image, got " + shape_str(pred.shape()));
  if (!(data_max > 0.0)) throw ConfigError("ssim: data_max must be positive");
  const std::size_t H = pred.dim(0), W = pred.dim(1);
  if (H < o.window || W < o.window) {
    throw ShapeError("ssim: image " + shape_str(pred.shape()) + " is smaller than the " + std::to_string(o.window) +
                     "x" + std::to_string(o.window) + " window");
  }
  const auto taps = gaussian_taps(o.window, o.sigma);
  const std::size_t n = H * W;
  std::vector<double> x(pred.data().begin(), pred.data().end());
  std::vector<double> y(gt.data().begin(), gt.data().end());
  std::vector<double> xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, H, W, taps);
  const auto my = filter_valid(y, H, W, taps);
  const auto mxx = filter_valid(xx, H, W, taps);
  const auto myy = filter_valid(yy, H, W, taps);
  const auto mxy = filter_valid(xy, H, W, taps);
  const double c1 = (o.k1 * data_max) * (o.k1 * data_max);
  const double c2 = (o.k2 * data_max) * (o.k2 * data_max);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cov = mxy[i] - mx[i] * my[i];
    const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
    const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
    total += num / den;
  }
  return total / static_cast<double>(mx.size());
}

}  // namespace fedcrfd
