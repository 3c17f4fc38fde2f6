#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cflow/diffcore/tape.hpp"
#include "cflow/rng.hpp"

namespace cflow::diffcore {

/// Fully connected network with SiLU on every hidden layer and a linear
/// output layer. Layer k computes x W_k + b_k with W_k of shape
/// (widths[k] x widths[k+1]) and b_k of shape (1 x widths[k+1]).
class Mlp {
 public:
  Mlp() = default;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases.
  Mlp(std::vector<std::size_t> widths, Rng& rng) : Mlp(zeros(std::move(widths))) {
    for (Layer& layer : layers_) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.value().rows()));
      for (Tensor* t : {&layer.weight, &layer.bias})
        for (Eigen::Index i = 0; i < t->value().size(); ++i)
          t->value().data()[i] = rng.uniform(-bound, bound);
    }
  }

  static Mlp zeros(std::vector<std::size_t> widths) {
    if (widths.size() < 2) fail(ErrorKind::precondition, "an MLP needs at least input and output widths");
    for (std::size_t w : widths)
      if (w == 0) fail(ErrorKind::precondition, "MLP layer widths must be positive");
    Mlp m;
    m.widths_ = std::move(widths);
    for (std::size_t k = 0; k + 1 < m.widths_.size(); ++k) {
      const auto in = static_cast<Eigen::Index>(m.widths_[k]);
      const auto out = static_cast<Eigen::Index>(m.widths_[k + 1]);
      m.layers_.push_back({Tensor(in, out), Tensor(1, out)});
    }
    return m;
  }

  const std::vector<std::size_t>& widths() const { return widths_; }
  std::size_t input_dim() const { return widths_.empty() ? 0 : widths_.front(); }
  std::size_t output_dim() const { return widths_.empty() ? 0 : widths_.back(); }
  std::size_t layer_count() const { return layers_.size(); }

  Tensor& weight(std::size_t layer) { return layers_.at(layer).weight; }
  Tensor& bias(std::size_t layer) { return layers_.at(layer).bias; }
  const Tensor& weight(std::size_t layer) const { return layers_.at(layer).weight; }
  const Tensor& bias(std::size_t layer) const { return layers_.at(layer).bias; }

  /// Parameters in declaration order: W_0, b_0, W_1, b_1, ...
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (Layer& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const Layer& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  void zero_output_layer() {
    layers_.back().weight.value().setZero();
    layers_.back().bias.value().setZero();
  }

  void clear_grads() {
    for (Tensor* t : parameters()) t->clear_grad();
  }

  Matrix forward(const Matrix& input) const {
    check_input(input);
    Matrix h = input;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      Matrix z = h * layers_[k].weight.value();
      z.rowwise() += layers_[k].bias.value().row(0);
      if (k + 1 < layers_.size()) z = z.cwiseProduct(Tape::logistic(z));
      h = std::move(z);
    }
    check_finite(h, "mlp forward");
    return h;
  }

  Var forward(Tape& tape, Var input) {
    check_input(tape.value(input));
    Var h = input;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      Var z = tape.add_row(tape.matmul(h, tape.parameter(layers_[k].weight)),
                           tape.parameter(layers_[k].bias));
      h = k + 1 < layers_.size() ? tape.silu(z) : z;
    }
    return h;
  }

 private:
  struct Layer {
    Tensor weight;
    Tensor bias;
  };

  void check_input(const Matrix& input) const {
    if (layers_.empty()) fail(ErrorKind::state, "MLP has no layers");
    if (static_cast<std::size_t>(input.cols()) != input_dim())
      fail(ErrorKind::shape, "MLP expects input width " + std::to_string(input_dim()) + ", got " +
                                 std::to_string(input.cols()));
  }

  std::vector<std::size_t> widths_;
  std::vector<Layer> layers_;
};

/// Default hidden widths for velocity fields and classifiers.
inline std::vector<std::size_t> default_hidden() { return {64, 64, 64}; }

/// Time-conditioned velocity field v(t, x): an Mlp whose input is the point
/// with the scalar time appended as the last column, and whose output has
/// the point's dimension.
class VelocityField {
 public:
  VelocityField() = default;

  VelocityField(std::size_t dim, const std::vector<std::size_t>& hidden, Rng& rng)
      : VelocityField(Mlp(widths_for(dim, hidden), rng)) {}

  explicit VelocityField(Mlp net) : net_(std::move(net)) {
    if (net_.input_dim() != net_.output_dim() + 1)
      fail(ErrorKind::shape, "velocity field input width must be output width + 1");
  }

  static std::vector<std::size_t> widths_for(std::size_t dim, const std::vector<std::size_t>& hidden) {
    std::vector<std::size_t> w{dim + 1};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(dim);
    return w;
  }

  std::size_t dim() const { return net_.output_dim(); }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

  /// v(t, x) for a shared scalar t.
  Matrix operator()(double t, const Matrix& x) const {
    if (!std::isfinite(t)) fail(ErrorKind::numeric, "time must be finite");
    return net_.forward(assemble(Vector::Constant(x.rows(), t), x));
  }

  /// v(t_i, x_i) row-wise.
  Matrix evaluate(const Vector& t, const Matrix& x) const { return net_.forward(assemble(t, x)); }

  Var forward(Tape& tape, const Vector& t, const Matrix& x) {
    return net_.forward(tape, tape.constant(assemble(t, x)));
  }

 private:
  Matrix assemble(const Vector& t, const Matrix& x) const {
    if (static_cast<std::size_t>(x.cols()) != dim())
      fail(ErrorKind::shape, "velocity field of dimension " + std::to_string(dim()) +
                                 " given points of width " + std::to_string(x.cols()));
    if (t.size() != x.rows()) fail(ErrorKind::shape, "one time value per row required");
    Matrix in(x.rows(), x.cols() + 1);
    in.leftCols(x.cols()) = x;
    in.col(x.cols()) = t;
    return in;
  }

  Mlp net_;
};

}  // namespace cflow::diffcore
