#include "fedcrfd/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/rng.hpp"

namespace fedcrfd {

namespace {

constexpr std::array<std::array<double, kNumTissueLabels>, kMaxModalities> kIntensity{{
    {0.9, 0.6, 0.3, 0.7, 0.5},
    {0.2, 0.8, 0.9, 0.4, 0.6},
    {0.5, 0.3, 0.7, 0.9, 0.2},
}};

constexpr double kNoiseSigma = 0.01;

struct Ellipse {
  double cx, cy, a, b, angle;
  // per-slice drift
  double dcx, dcy, da, db, dangle, phase;
  std::uint8_t label;
};

std::uint8_t random_label(Rng& rng) { return static_cast<std::uint8_t>(1 + rng.below(kNumTissueLabels)); }

}  // namespace

AnatomyPhantom generate_phantom(std::uint64_t seed, std::size_t size, std::uint64_t patient, std::size_t slice) {
  if (size < 32) throw ConfigError("generate_phantom: size " + std::to_string(size) + " is below 32");
  if (size % 8 != 0) throw ConfigError("generate_phantom: size " + std::to_string(size) + " not divisible by 8");

  Rng rng(derive_seed(seed, {0x7068616eULL, patient}));
  const std::size_t count = 4 + rng.below(5);
  std::vector<Ellipse> shapes;
  shapes.reserve(count);

  Ellipse head{};
  head.cx = rng.uniform(-0.04, 0.04);
  head.cy = rng.uniform(-0.04, 0.04);
  head.a = rng.uniform(0.72, 0.86);
  head.b = rng.uniform(0.58, 0.78);
  head.angle = rng.uniform(-0.3, 0.3);
  head.dcx = rng.uniform(-0.01, 0.01);
  head.dcy = rng.uniform(-0.01, 0.01);
  head.da = rng.uniform(0.02, 0.05);
  head.db = rng.uniform(0.02, 0.05);
  head.dangle = rng.uniform(-0.03, 0.03);
  head.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  head.label = random_label(rng);
  shapes.push_back(head);

  for (std::size_t i = 1; i < count; ++i) {
    Ellipse e{};
    e.cx = rng.uniform(-0.4, 0.4);
    e.cy = rng.uniform(-0.35, 0.35);
    e.a = rng.uniform(0.1, 0.35);
    e.b = rng.uniform(0.08, 0.3);
    e.angle = rng.uniform(0.0, std::numbers::pi);
    e.dcx = rng.uniform(-0.02, 0.02);
    e.dcy = rng.uniform(-0.02, 0.02);
    e.da = rng.uniform(0.01, 0.04);
    e.db = rng.uniform(0.01, 0.04);
    e.dangle = rng.uniform(-0.1, 0.1);
    e.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    e.label = random_label(rng);
    // The first inner structure always contrasts with the head.
    while (i == 1 && e.label == head.label) e.label = random_label(rng);
    shapes.push_back(e);
  }

  AnatomyPhantom p{size, patient, slice, std::vector<std::uint8_t>(size * size, 0)};
  const double s = static_cast<double>(slice);
  const double n = static_cast<double>(size);
  for (const Ellipse& e : shapes) {
    const double wave = std::sin(0.4 * s + e.phase);
    const double cx = e.cx + e.dcx * s;
    const double cy = e.cy + e.dcy * s;
    const double a = std::max(0.02, e.a * (1.0 + e.da * wave) - 0.005 * s);
    const double b = std::max(0.02, e.b * (1.0 + e.db * wave) - 0.005 * s);
    const double th = e.angle + e.dangle * s;
    const double ct = std::cos(th);
    const double st = std::sin(th);
    for (std::size_t r = 0; r < size; ++r) {
      const double y = (2.0 * (static_cast<double>(r) + 0.5) / n) - 1.0 - cy;
      for (std::size_t c = 0; c < size; ++c) {
        const double x = (2.0 * (static_cast<double>(c) + 0.5) / n) - 1.0 - cx;
        const double u = (x * ct + y * st) / a;
        const double v = (-x * st + y * ct) / b;
        if (u * u + v * v <= 1.0) p.labels[r * size + c] = e.label;
      }
    }
  }
  return p;
}

double tissue_intensity(std::size_t modality, std::uint8_t label) {
  if (modality >= kMaxModalities) throw ConfigError("unknown modality " + std::to_string(modality));
  if (label == 0) return 0.0;
  if (label > kNumTissueLabels) throw ConfigError("tissue label " + std::to_string(label) + " out of range");
  return kIntensity[modality][label - 1];
}

Tensor render_modality(const AnatomyPhantom& phantom, std::size_t modality, std::uint64_t noise_seed) {
  if (modality >= kMaxModalities) throw ConfigError("unknown modality " + std::to_string(modality));
  Rng rng(derive_seed(noise_seed, {0x6e6f6973ULL, modality}));
  Tensor y({phantom.size, phantom.size});
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::uint8_t label = phantom.labels[i];
    if (label == 0) continue;
    const double v = tissue_intensity(modality, label) + kNoiseSigma * rng.normal();
    y[i] = std::clamp(v, 0.0, 1.0);
  }
  return y;
}

}  // namespace fedcrfd
