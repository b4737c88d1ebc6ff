#pragma once

#include <span>

namespace fedcrfd {

/// I_x(a, b) by Lentz's continued fraction.
double regularized_incomplete_beta(double a, double b, double x);

/// P(T <= t) for Student's t with `df` degrees of freedom.
double student_t_cdf(double t, double df);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  /// Differences had zero variance: t is 0 (all equal) or +-inf, p is 1 or 0.
  bool degenerate = false;
};

/// Two-sided paired t-test on a - b with n - 1 degrees of freedom.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for n < 2
};

MeanStd mean_std(std::span<const double> values);

}  // namespace fedcrfd
