#pragma once

namespace lbsac {

// Inverse CDF of the standard normal distribution.
//
// Rational minimax approximation due to Peter J. Acklam (relative error
// below 1.15e-9 on (0,1)), followed by one Halley refinement step against
// erfc, which brings the result to within a few ulp. Absolute error is
// far below the 1e-8 this project requires on (1e-10, 1 - 1e-10).
double inverse_normal_cdf(double p);

// CDF of the standard normal distribution (via erfc).
double normal_cdf(double x);

}  // namespace lbsac
