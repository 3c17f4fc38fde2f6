#pragma once

#include <algorithm>
#include <cmath>

namespace cflow::diffcore {

/// Logistic sigmoid. Both branches evaluate the same small-side quantity
/// exp(-|z|) / (1 + exp(-|z|)), so sigmoid(z) + sigmoid(-z) == 1 holds exactly
/// in floating point and tiny weights keep full relative precision.
inline double sigmoid(double z) {
  if (z < 0.0) {
    const double e = std::exp(z);
    return e / (1.0 + e);
  }
  const double e = std::exp(-z);
  return 1.0 - e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double silu(double z) { return z * sigmoid(z); }

inline double silu_derivative(double z) {
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace cflow::diffcore
