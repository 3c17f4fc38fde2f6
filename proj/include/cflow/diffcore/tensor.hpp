#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "cflow/error.hpp"

namespace cflow::diffcore {

/// Row-major dense matrix of 64-bit floats. Batches of points are stored as
/// one row per point.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// A batch of n points in d dimensions (n x d).
using Batch = Matrix;

inline std::string shape_string(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + ", " + std::to_string(m.cols()) + ")";
}

inline void check_finite(const Matrix& m, const std::string& where) {
  if (!m.allFinite()) fail(ErrorKind::numeric, "non-finite value produced by " + where);
}

/// Trainable parameter: a value buffer plus an optional gradient of the same shape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Eigen::Index rows, Eigen::Index cols) : data_(Matrix::Zero(rows, cols)) {}
  explicit Tensor(Matrix data) : data_(std::move(data)) {}

  std::array<std::size_t, 2> shape() const {
    return {static_cast<std::size_t>(data_.rows()), static_cast<std::size_t>(data_.cols())};
  }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }

  const Matrix& value() const { return data_; }
  Matrix& value() { return data_; }

  bool has_grad() const { return grad_.has_value(); }

  const Matrix& grad() const {
    if (!grad_) fail(ErrorKind::state, "tensor has no gradient; run backward first");
    return *grad_;
  }

  void accumulate_grad(const Matrix& g) {
    if (g.rows() != data_.rows() || g.cols() != data_.cols())
      fail(ErrorKind::shape, "gradient shape " + shape_string(g) + " does not match parameter " +
                                 shape_string(data_));
    if (grad_)
      *grad_ += g;
    else
      grad_ = g;
  }

  void clear_grad() { grad_.reset(); }

 private:
  Matrix data_;
  std::optional<Matrix> grad_;
};

}  // namespace cflow::diffcore
