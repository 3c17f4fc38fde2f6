#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cflow/diffcore/scalar.hpp"
#include "cflow/diffcore/tensor.hpp"

namespace cflow::diffcore {

/// Handle to a value recorded on a Tape.
class Var {
 public:
  std::size_t index() const { return index_; }

 private:
  friend class Tape;
  explicit Var(std::size_t index) : index_(index) {}
  std::size_t index_;
};

/// Left-to-right sum over the storage order. Losses use this instead of
/// Eigen's vectorised reductions so that the summation order is fixed and
/// identical between the plain and the weighted mean.
inline double sequential_sum(const Matrix& m) {
  double s = 0.0;
  const double* p = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) s += p[i];
  return s;
}

/// Dynamic reverse-mode tape.
///
/// Every operation appends a node holding its forward value and a closure that
/// pushes the node's gradient to its parents. The tape is rebuilt for every
/// training step; `backward` consumes it. Parameter leaves write their
/// gradient into the owning Tensor, constants receive no gradient at all.
/// Any non-finite forward value raises a numeric Error at the op that made it.
class Tape {
 public:
  Var constant(Matrix value) {
    check_finite(value, "constant input");
    return push(std::move(value), false, nullptr);
  }

  Var parameter(Tensor& p) {
    check_finite(p.value(), "parameter");
    Var v = push(p.value(), true, nullptr);
    nodes_[v.index()].param = &p;
    return v;
  }

  const Matrix& value(Var v) const { return node(v).value; }

  Var matmul(Var a, Var b) {
    const Matrix& av = node(a).value;
    const Matrix& bv = node(b).value;
    if (av.cols() != bv.rows())
      fail(ErrorKind::shape, "matmul " + shape_string(av) + " x " + shape_string(bv));
    Matrix out = av * bv;
    const std::size_t ia = a.index(), ib = b.index();
    return record(std::move(out), {ia, ib}, "matmul", [ia, ib](Tape& t, const Matrix& g) {
      if (t.nodes_[ia].requires_grad) t.accumulate(ia, g * t.nodes_[ib].value.transpose());
      if (t.nodes_[ib].requires_grad) t.accumulate(ib, t.nodes_[ia].value.transpose() * g);
    });
  }

  /// a + row, with the 1 x m row broadcast over every row of a.
  Var add_row(Var a, Var row) {
    const Matrix& av = node(a).value;
    const Matrix& rv = node(row).value;
    if (rv.rows() != 1 || rv.cols() != av.cols())
      fail(ErrorKind::shape, "add_row " + shape_string(av) + " + " + shape_string(rv));
    Matrix out = av.rowwise() + rv.row(0);
    const std::size_t ia = a.index(), ir = row.index();
    return record(std::move(out), {ia, ir}, "add_row", [ia, ir](Tape& t, const Matrix& g) {
      if (t.nodes_[ia].requires_grad) t.accumulate(ia, g);
      if (t.nodes_[ir].requires_grad) t.accumulate(ir, g.colwise().sum());
    });
  }

  Var add(Var a, Var b) { return binary(a, b, 1.0, "add"); }
  Var sub(Var a, Var b) { return binary(a, b, -1.0, "sub"); }

  /// Elementwise product.
  Var mul(Var a, Var b) {
    const Matrix& av = node(a).value;
    const Matrix& bv = node(b).value;
    same_shape(av, bv, "mul");
    Matrix out = av.cwiseProduct(bv);
    const std::size_t ia = a.index(), ib = b.index();
    return record(std::move(out), {ia, ib}, "mul", [ia, ib](Tape& t, const Matrix& g) {
      if (t.nodes_[ia].requires_grad) t.accumulate(ia, g.cwiseProduct(t.nodes_[ib].value));
      if (t.nodes_[ib].requires_grad) t.accumulate(ib, g.cwiseProduct(t.nodes_[ia].value));
    });
  }

  Var scale(Var a, double factor) {
    Matrix out = factor * node(a).value;
    const std::size_t ia = a.index();
    return record(std::move(out), {ia}, "scale",
                  [ia, factor](Tape& t, const Matrix& g) { t.accumulate(ia, factor * g); });
  }

  Var silu(Var a) {
    const Matrix& x = node(a).value;
    Matrix gate = logistic(x);
    Matrix out = x.cwiseProduct(gate);
    const std::size_t ia = a.index();
    return record(std::move(out), {ia}, "silu", [ia, gate = std::move(gate)](Tape& t, const Matrix& g) {
      const auto x = t.nodes_[ia].value.array();
      const auto s = gate.array();
      t.accumulate(ia, (g.array() * s * (1.0 + x * (1.0 - s))).matrix());
    });
  }

  /// Vectorised elementwise logistic; saturates cleanly to 0 or 1 at the extremes.
  static Matrix logistic(const Matrix& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

  Var sigmoid(Var a) {
    Matrix out = node(a).value.unaryExpr([](double z) { return diffcore::sigmoid(z); });
    const std::size_t ia = a.index();
    const std::size_t self = nodes_.size();
    return record(std::move(out), {ia}, "sigmoid", [ia, self](Tape& t, const Matrix& g) {
      const Matrix& y = t.nodes_[self].value;
      t.accumulate(ia, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
  }

  /// Per-row squared Euclidean norm: (n x m) -> (n x 1).
  Var row_squared_norm(Var a) {
    Matrix out = node(a).value.rowwise().squaredNorm();
    const std::size_t ia = a.index();
    return record(std::move(out), {ia}, "row_squared_norm", [ia](Tape& t, const Matrix& g) {
      const Matrix& av = t.nodes_[ia].value;
      Matrix d = 2.0 * av;
      d.array().colwise() *= g.col(0).array();
      t.accumulate(ia, d);
    });
  }

  Var sum(Var a) {
    const Matrix& av = node(a).value;
    Matrix out(1, 1);
    out(0, 0) = sequential_sum(av);
    const std::size_t ia = a.index();
    const Eigen::Index rows = av.rows(), cols = av.cols();
    return record(std::move(out), {ia}, "sum", [ia, rows, cols](Tape& t, const Matrix& g) {
      t.accumulate(ia, Matrix::Constant(rows, cols, g(0, 0)));
    });
  }

  Var mean(Var a) {
    const Matrix& av = node(a).value;
    if (av.size() == 0) fail(ErrorKind::precondition, "mean of an empty value");
    const double count = static_cast<double>(av.size());
    Matrix out(1, 1);
    out(0, 0) = sequential_sum(av) / count;
    const std::size_t ia = a.index();
    const Eigen::Index rows = av.rows(), cols = av.cols();
    return record(std::move(out), {ia}, "mean", [ia, rows, cols, count](Tape& t, const Matrix& g) {
      t.accumulate(ia, Matrix::Constant(rows, cols, g(0, 0) * (1.0 / count)));
    });
  }

  /// sum_i w_i v_i / sum_i w_i over an (n x 1) column with constant weights.
  Var weighted_mean(Var values, const Vector& weights) {
    const Matrix& vv = node(values).value;
    check_weights(vv, weights, "weighted_mean");
    double num = 0.0, den = 0.0;
    for (Eigen::Index i = 0; i < vv.rows(); ++i) {
      num += weights(i) * vv(i, 0);
      den += weights(i);
    }
    if (!(den > 0.0)) fail(ErrorKind::precondition, "weighted_mean needs a positive weight sum");
    Matrix out(1, 1);
    out(0, 0) = num / den;
    const std::size_t iv = values.index();
    return record(std::move(out), {iv}, "weighted_mean", [iv, weights, den](Tape& t, const Matrix& g) {
      Matrix d(weights.size(), 1);
      for (Eigen::Index i = 0; i < weights.size(); ++i) d(i, 0) = g(0, 0) * (weights(i) / den);
      t.accumulate(iv, d);
    });
  }

  /// sum_i w_i v_i over an (n x 1) column with constant weights.
  Var weighted_sum(Var values, const Vector& weights) {
    const Matrix& vv = node(values).value;
    check_weights(vv, weights, "weighted_sum");
    double num = 0.0;
    for (Eigen::Index i = 0; i < vv.rows(); ++i) num += weights(i) * vv(i, 0);
    Matrix out(1, 1);
    out(0, 0) = num;
    const std::size_t iv = values.index();
    return record(std::move(out), {iv}, "weighted_sum", [iv, weights](Tape& t, const Matrix& g) {
      Matrix d = g(0, 0) * weights;
      t.accumulate(iv, d);
    });
  }

  /// Mean binary cross-entropy of logits z (n x 1) against targets y in [0, 1].
  Var bce_with_logits(Var logits, const Vector& targets) {
    const Matrix& z = node(logits).value;
    check_weights(z, targets, "bce_with_logits");
    const double n = static_cast<double>(z.rows());
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) total += softplus(z(i, 0)) - targets(i) * z(i, 0);
    Matrix out(1, 1);
    out(0, 0) = total / n;
    const std::size_t iz = logits.index();
    return record(std::move(out), {iz}, "bce_with_logits", [iz, targets, n](Tape& t, const Matrix& g) {
      const Matrix& zv = t.nodes_[iz].value;
      Matrix d(zv.rows(), 1);
      for (Eigen::Index i = 0; i < zv.rows(); ++i)
        d(i, 0) = g(0, 0) * (diffcore::sigmoid(zv(i, 0)) - targets(i)) / n;
      t.accumulate(iz, d);
    });
  }

  /// Propagates d(loss)/d(node) back to every parameter leaf and consumes the
  /// tape. Parameters registered on the tape but not reached receive an
  /// explicit zero gradient.
  void backward(Var loss) {
    const Node& root = node(loss);
    if (root.value.rows() != 1 || root.value.cols() != 1)
      fail(ErrorKind::shape, "backward requires a scalar loss, got " + shape_string(root.value));
    nodes_[loss.index()].grad = Matrix::Ones(1, 1);
    nodes_[loss.index()].has_grad = true;
    for (std::size_t i = loss.index() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.param != nullptr) {
        if (n.has_grad)
          check_finite(n.grad, "backward");
        else
          n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        n.param->accumulate_grad(n.grad);
        continue;
      }
      if (n.has_grad && n.propagate) n.propagate(*this, n.grad);
    }
    nodes_.clear();
    consumed_ = true;
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  using Propagate = std::function<void(Tape&, const Matrix&)>;

  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    Tensor* param = nullptr;
    Propagate propagate;
  };

  const Node& node(Var v) const {
    if (consumed_) fail(ErrorKind::state, "tape already consumed by backward");
    if (v.index() >= nodes_.size()) fail(ErrorKind::state, "variable does not belong to this tape");
    return nodes_[v.index()];
  }

  Var push(Matrix value, bool requires_grad, Propagate propagate) {
    if (consumed_) fail(ErrorKind::state, "tape already consumed by backward");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.propagate = std::move(propagate);
    nodes_.push_back(std::move(n));
    return Var(nodes_.size() - 1);
  }

  Var record(Matrix value, std::initializer_list<std::size_t> parents, const char* op,
             Propagate propagate) {
    check_finite(value, op);
    bool requires_grad = false;
    for (std::size_t p : parents) requires_grad = requires_grad || nodes_[p].requires_grad;
    return push(std::move(value), requires_grad, requires_grad ? std::move(propagate) : Propagate{});
  }

  Var binary(Var a, Var b, double sign, const char* op) {
    const Matrix& av = node(a).value;
    const Matrix& bv = node(b).value;
    same_shape(av, bv, op);
    Matrix out = sign > 0 ? Matrix(av + bv) : Matrix(av - bv);
    const std::size_t ia = a.index(), ib = b.index();
    return record(std::move(out), {ia, ib}, op, [ia, ib, sign](Tape& t, const Matrix& g) {
      if (t.nodes_[ia].requires_grad) t.accumulate(ia, g);
      if (t.nodes_[ib].requires_grad) t.accumulate(ib, sign * g);
    });
  }

  void accumulate(std::size_t i, const Matrix& g) {
    Node& n = nodes_[i];
    if (!n.requires_grad) return;
    if (n.has_grad) {
      n.grad += g;
    } else {
      n.grad = g;
      n.has_grad = true;
    }
  }

  static void same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
      fail(ErrorKind::shape, std::string(op) + " " + shape_string(a) + " vs " + shape_string(b));
  }

  static void check_weights(const Matrix& values, const Vector& weights, const char* op) {
    if (values.cols() != 1 || values.rows() != weights.size())
      fail(ErrorKind::shape, std::string(op) + " expects (n x 1) values and n weights, got " +
                                 shape_string(values) + " and " + std::to_string(weights.size()));
    if (values.rows() == 0) fail(ErrorKind::precondition, std::string(op) + " of an empty column");
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace cflow::diffcore
