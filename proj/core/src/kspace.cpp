#include "fedcrfd/kspace.hpp"

#include <fftw3.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <mutex>
#include <numbers>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/rng.hpp"

namespace fedcrfd {

namespace {

// FFTW planning is not thread-safe; execution of distinct plans is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

ComplexImage dft(const ComplexImage& in, int sign) {
  const std::size_t n = in.height * in.width;
  if (n == 0) throw ShapeError("fft2: empty image");
  auto* buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
  if (buf == nullptr) throw std::bad_alloc();
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft_2d(static_cast<int>(in.height), static_cast<int>(in.width), buf, buf, sign, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < n; ++i) {
    buf[i][0] = in.data[i].real();
    buf[i][1] = in.data[i].imag();
  }
  fftw_execute(plan);
  ComplexImage out{in.height, in.width, std::vector<Complex>(n)};
  for (std::size_t i = 0; i < n; ++i) out.data[i] = Complex(buf[i][0], buf[i][1]);
  {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(buf);
  return out;
}

ComplexImage roll(const ComplexImage& in, std::size_t dr, std::size_t dc) {
  ComplexImage out{in.height, in.width, std::vector<Complex>(in.data.size())};
  for (std::size_t r = 0; r < in.height; ++r) {
    for (std::size_t c = 0; c < in.width; ++c) {
      out.at((r + dr) % in.height, (c + dc) % in.width) = in.at(r, c);
    }
  }
  return out;
}

void require_image(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected an H x W image, got " + shape_str(t.shape()));
}

void set_center_square(Tensor& grid, std::size_t size, std::size_t cw) {
  const std::size_t start = size / 2 - cw / 2;
  for (std::size_t r = start; r < start + cw; ++r) {
    for (std::size_t c = start; c < start + cw; ++c) grid[r * size + c] = 1.0;
  }
}

void set_column(Tensor& grid, std::size_t size, std::size_t col) {
  for (std::size_t r = 0; r < size; ++r) grid[r * size + col] = 1.0;
}

// Picks `count` distinct entries of `pool` (partial Fisher-Yates).
std::vector<std::size_t> pick(std::vector<std::size_t> pool, std::size_t count, Rng& rng) {
  count = std::min(count, pool.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  }
  pool.resize(count);
  return pool;
}

void draw_spokes(Tensor& grid, std::size_t size, std::size_t spokes) {
  const double c = static_cast<double>(size / 2);
  const double half = static_cast<double>(size) / 2.0;
  for (std::size_t i = 0; i < spokes; ++i) {
    const double th = static_cast<double>(i) * std::numbers::pi / static_cast<double>(spokes);
    const double ct = std::cos(th);
    const double st = std::sin(th);
    for (double t = -half; t <= half; t += 1.0) {
      const double x = std::floor(c + t * ct + 0.5);
      const double y = std::floor(c + t * st + 0.5);
      if (x < 0 || y < 0 || x >= static_cast<double>(size) || y >= static_cast<double>(size)) continue;
      grid[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] = 1.0;
    }
  }
}

}  // namespace

ComplexImage fft2(const Tensor& image) {
  require_image("fft2", image);
  ComplexImage in{image.dim(0), image.dim(1), std::vector<Complex>(image.size())};
  for (std::size_t i = 0; i < image.size(); ++i) in.data[i] = Complex(image[i], 0.0);
  return dft(in, FFTW_FORWARD);
}

ComplexImage fft2(const ComplexImage& image) { return dft(image, FFTW_FORWARD); }

ComplexImage ifft2(const ComplexImage& spectrum) {
  ComplexImage out = dft(spectrum, FFTW_BACKWARD);
  const double s = 1.0 / static_cast<double>(out.data.size());
  for (Complex& v : out.data) v *= s;
  return out;
}

ComplexImage fftshift(const ComplexImage& spectrum) {
  return roll(spectrum, spectrum.height / 2, spectrum.width / 2);
}

ComplexImage ifftshift(const ComplexImage& spectrum) {
  return roll(spectrum, (spectrum.height + 1) / 2, (spectrum.width + 1) / 2);
}

MaskKind parse_mask_kind(std::string_view name) {
  if (name == "uniform_1d") return MaskKind::kUniform1d;
  if (name == "random_2d") return MaskKind::kRandom2d;
  if (name == "cartesian_1d") return MaskKind::kCartesian1d;
  if (name == "radial_2d") return MaskKind::kRadial2d;
  throw ConfigError("unknown mask kind '" + std::string(name) + "'");
}

std::string_view mask_kind_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::kUniform1d: return "uniform_1d";
    case MaskKind::kRandom2d: return "random_2d";
    case MaskKind::kCartesian1d: return "cartesian_1d";
    case MaskKind::kRadial2d: return "radial_2d";
  }
  return "?";
}

MaskSpec parse_mask_spec(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw ConfigError("mask spec '" + std::string(text) + "' must look like kind:acceleration");
  }
  MaskSpec spec;
  spec.kind = parse_mask_kind(text.substr(0, colon));
  const std::string_view num = text.substr(colon + 1);
  auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), spec.acceleration);
  if (ec != std::errc() || ptr != num.data() + num.size() || !(spec.acceleration >= 1.0)) {
    throw ConfigError("bad acceleration in mask spec '" + std::string(text) + "'");
  }
  return spec;
}

std::string mask_spec_str(const MaskSpec& spec) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, spec.acceleration);
  (void)ec;
  return std::string(mask_kind_name(spec.kind)) + ":" + std::string(buf, ptr);
}

std::size_t center_width(std::size_t size, double center_fraction) {
  return static_cast<std::size_t>(std::ceil(center_fraction * static_cast<double>(size) - 1e-9));
}

UndersampleMask make_mask(MaskKind kind, double acceleration, std::size_t size, double center_fraction,
                          std::uint64_t seed) {
  if (size == 0) throw ConfigError("make_mask: size must be positive");
  UndersampleMask m{kind, acceleration, center_fraction, seed, Tensor({size, size})};
  if (acceleration == 1.0) {
    m.grid.fill(1.0);
    return m;
  }
  if (!(acceleration >= 2.0)) throw ConfigError("make_mask: acceleration must be 1 or >= 2");
  if (!(center_fraction > 0.0 && center_fraction <= 0.2)) {
    throw ConfigError("make_mask: center fraction must be in (0, 0.2]");
  }
  const double rate = 1.0 / acceleration;
  const std::size_t cw = std::max<std::size_t>(1, center_width(size, center_fraction));
  const std::size_t start = size / 2 - cw / 2;
  const auto dsize = static_cast<double>(size);
  Rng rng(derive_seed(seed, {0x6d61736bULL, static_cast<std::uint64_t>(kind), size}));

  switch (kind) {
    case MaskKind::kUniform1d: {
      // Spacing stretched so that equispaced columns plus the center band total ~W/R.
      const auto target = static_cast<std::size_t>(std::llround(dsize * rate));
      for (std::size_t c = start; c < start + cw; ++c) set_column(m.grid, size, c);
      if (target > cw) {
        const double step = static_cast<double>(size - cw) / static_cast<double>(target - cw);
        const std::uint64_t offset = rng.below(std::max<std::uint64_t>(1, static_cast<std::uint64_t>(step)));
        for (double pos = static_cast<double>(offset); pos < dsize; pos += step) {
          set_column(m.grid, size, static_cast<std::size_t>(pos));
        }
      }
      break;
    }
    case MaskKind::kCartesian1d: {
      const auto target = static_cast<std::size_t>(std::llround(dsize * rate));
      std::vector<std::size_t> pool;
      for (std::size_t c = 0; c < size; ++c) {
        if (c < start || c >= start + cw) pool.push_back(c);
      }
      for (std::size_t c = start; c < start + cw; ++c) set_column(m.grid, size, c);
      if (target > cw) {
        for (std::size_t c : pick(std::move(pool), target - cw, rng)) set_column(m.grid, size, c);
      }
      break;
    }
    case MaskKind::kRandom2d: {
      const auto target = static_cast<std::size_t>(std::llround(dsize * dsize * rate));
      std::vector<std::size_t> pool;
      for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) {
          const bool inside = r >= start && r < start + cw && c >= start && c < start + cw;
          if (!inside) pool.push_back(r * size + c);
        }
      }
      set_center_square(m.grid, size, cw);
      if (target > cw * cw) {
        for (std::size_t i : pick(std::move(pool), target - cw * cw, rng)) m.grid[i] = 1.0;
      }
      break;
    }
    case MaskKind::kRadial2d: {
      // ceil(pi W / 2R) full-length spokes oversample by ~pi/2; drop spokes until the rate fits.
      const std::size_t center = std::max<std::size_t>(2, cw / 2);
      for (auto spokes = static_cast<std::size_t>(std::ceil(std::numbers::pi * dsize / (2.0 * acceleration)));
           spokes >= 1; --spokes) {
        m.grid.fill(0.0);
        draw_spokes(m.grid, size, spokes);
        set_center_square(m.grid, size, center);
        if (m.grid.mean() <= 1.1 * rate) break;
      }
      break;
    }
  }
  const double got = m.grid.mean();
  if (got < 0.8 * rate || got > 1.3 * rate) {
    throw ConfigError("make_mask: rate 1/" + std::to_string(acceleration) + " infeasible for size " +
                      std::to_string(size) + " (got " + std::to_string(got) + ")");
  }
  return m;
}

Tensor undersample(const Tensor& y, const UndersampleMask& mask) {
  require_image("undersample", y);
  if (y.shape() != mask.grid.shape()) {
    throw ShapeError("undersample: image " + shape_str(y.shape()) + " vs mask " + shape_str(mask.grid.shape()));
  }
  ComplexImage k = fftshift(fft2(y));
  for (std::size_t i = 0; i < k.data.size(); ++i) k.data[i] *= mask.grid[i];
  const ComplexImage img = ifft2(ifftshift(k));
  Tensor x(y.shape());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::abs(img.data[i]);
  return x;
}

}  // namespace fedcrfd
