#pragma once

#include "cflow/diffcore/tensor.hpp"
#include "cflow/rng.hpp"

namespace cflow::flow {

using diffcore::Batch;
using diffcore::Matrix;
using diffcore::Vector;

namespace detail {
inline void check_pair(const Matrix& x0, const Matrix& x1) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
    fail(ErrorKind::shape, "endpoint shapes differ: " + diffcore::shape_string(x0) + " vs " +
                               diffcore::shape_string(x1));
}

inline void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) fail(ErrorKind::precondition, "interpolation time must lie in [0, 1]");
}
}  // namespace detail

/// (1 - t) x0 + t x1, for a single point or row-wise over a batch.
inline Matrix interpolate(const Matrix& x0, const Matrix& x1, double t) {
  detail::check_pair(x0, x1);
  detail::check_time(t);
  return (1.0 - t) * x0 + t * x1;
}

/// Row-wise interpolation with one time per row.
inline Matrix interpolate(const Matrix& x0, const Matrix& x1, const Vector& t) {
  detail::check_pair(x0, x1);
  if (t.size() != x0.rows()) fail(ErrorKind::shape, "one time value per row required");
  for (Eigen::Index i = 0; i < t.size(); ++i) detail::check_time(t(i));
  Matrix out(x0.rows(), x0.cols());
  out.array() = x0.array().colwise() * (1.0 - t.array()) + x1.array().colwise() * t.array();
  return out;
}

/// Draw from N(interpolate(x0, x1, t), sigma^2 I). With sigma == 0 no noise is
/// drawn and the interpolant is returned exactly.
inline Matrix conditional_sample(const Matrix& x0, const Matrix& x1, const Vector& t, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) fail(ErrorKind::precondition, "interpolation noise must be non-negative");
  Matrix xt = interpolate(x0, x1, t);
  if (sigma > 0.0) xt += sigma * rng.normal_matrix<Matrix>(xt.rows(), xt.cols());
  return xt;
}

inline Matrix conditional_sample(const Matrix& x0, const Matrix& x1, double t, double sigma, Rng& rng) {
  return conditional_sample(x0, x1, Vector::Constant(x0.rows(), t), sigma, rng);
}

/// Conditional target velocity x1 - x0 (independent of t).
inline Matrix target_velocity(const Matrix& x0, const Matrix& x1) {
  detail::check_pair(x0, x1);
  return x1 - x0;
}

}  // namespace cflow::flow
