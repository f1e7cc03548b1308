#pragma once

#include <span>
#include <vector>

#include "scal/error.hpp"

namespace scal::stats {

/// 1-based ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

/// Two-sided tail P(|T| >= |t|) for Student's t with `df` degrees of freedom,
/// by adaptive Simpson integration of the density (absolute error ~1e-10).
double student_t_two_sided_p(double t, double df);

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

/// Pearson correlation of average ranks; p from t = rho sqrt((n-2)/(1-rho^2))
/// with n-2 df. Throws LengthMismatch, DegenerateInput (n < 3 or a constant input).
SpearmanResult spearman(std::span<const double> x, std::span<const double> y);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

/// Ordinary least squares y = slope x + intercept. Throws LengthMismatch,
/// DegenerateInput (n < 2, constant x, or constant y).
LinearFit linear_fit(std::span<const double> x, std::span<const double> y);

}  // namespace scal::stats
