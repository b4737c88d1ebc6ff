#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedcrfd/autograd.hpp"
#include "fedcrfd/optim.hpp"

namespace fedcrfd {

/// Builds a scalar loss on the given graph from the current parameter values.
using LossClosure = std::function<Var(Graph&)>;

struct GradCheckOptions {
  double epsilon = 1e-6;
  std::size_t samples = 128;  // coordinates drawn at random across all parameters
  std::uint64_t seed = 1;
  /// Coordinates whose gradient is below this magnitude in both routes are compared absolutely.
  double scale_floor = 1e-6;
  double tolerance = 1e-4;
};

struct CoordinateCheck {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates skipped because the +/- epsilon probes landed on different smooth pieces.
  std::size_t excluded = 0;
  CoordinateCheck worst;
  bool passed = false;
  std::string notes;
};

/// Compares analytic gradients against central differences on a random coordinate subsample.
/// Throws NumericError if two evaluations of the closure at the same point disagree.
GradCheckReport finite_diff_check(const LossClosure& closure, std::span<Parameter* const> params,
                                  const GradCheckOptions& options = {});

}  // namespace fedcrfd
