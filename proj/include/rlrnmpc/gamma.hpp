#pragma once

#include <cmath>
#include <limits>

#include "rlrnmpc/types.hpp"

namespace rlrnmpc {

namespace detail {

inline double lower_gamma_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int k = 1; k < 1000; ++k) {
    term *= x / (a + k);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Modified Lentz evaluation of the continued fraction for Q(a, x).
inline double upper_gamma_fraction(double a, double x) {
  constexpr double tiny = std::numeric_limits<double>::min() / std::numeric_limits<double>::epsilon();
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 1000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Regularized lower incomplete gamma function P(a, x) = gamma(a, x) / Gamma(a).
/// Series below x = a + 1, continued fraction above.
inline double regularized_lower_gamma(double a, double x) {
  if (a <= 0.0) throw DomainError("regularized_lower_gamma: a must be positive");
  if (x < 0.0) throw DomainError("regularized_lower_gamma: x must be nonnegative");
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return detail::lower_gamma_series(a, x);
  return 1.0 - detail::upper_gamma_fraction(a, x);
}

}  // namespace rlrnmpc
