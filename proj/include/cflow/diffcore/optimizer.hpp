#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cflow/diffcore/mlp.hpp"

namespace cflow::diffcore {

enum class UpdateRule { sgd, adam };

struct OptimizerConfig {
  UpdateRule rule = UpdateRule::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First-order optimizer. `step` consumes the gradients it applies: every
/// parameter must carry a fresh gradient, and all gradients are cleared
/// afterwards, so a second step without a new backward pass is rejected.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {
    if (!(config_.learning_rate > 0.0)) fail(ErrorKind::precondition, "learning rate must be positive");
  }

  const OptimizerConfig& config() const { return config_; }
  std::uint64_t step_count() const { return steps_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

  void step(std::span<Tensor* const> params) {
    for (const Tensor* p : params)
      if (!p->has_grad()) fail(ErrorKind::state, "optimizer step without a fresh gradient (stale-gradient)");
    if (config_.rule == UpdateRule::adam) init_moments(params);
    ++steps_;
    const double lr = config_.learning_rate;
    if (config_.rule == UpdateRule::sgd) {
      for (Tensor* p : params) p->value() -= lr * p->grad();
    } else {
      const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
      const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix& g = params[i]->grad();
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
        params[i]->value().array() -=
            lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.epsilon);
      }
    }
    for (Tensor* p : params) {
      check_finite(p->value(), "optimizer step");
      p->clear_grad();
    }
  }

  void step(Mlp& net) {
    const std::vector<Tensor*> params = net.parameters();
    step(std::span<Tensor* const>(params));
  }

 private:
  void init_moments(std::span<Tensor* const> params) {
    if (m_.empty()) {
      for (const Tensor* p : params) {
        m_.push_back(Matrix::Zero(p->value().rows(), p->value().cols()));
        v_.push_back(Matrix::Zero(p->value().rows(), p->value().cols()));
      }
      return;
    }
    if (m_.size() != params.size()) fail(ErrorKind::shape, "optimizer bound to a different parameter set");
    for (std::size_t i = 0; i < params.size(); ++i)
      if (m_[i].rows() != params[i]->value().rows() || m_[i].cols() != params[i]->value().cols())
        fail(ErrorKind::shape, "optimizer moment shape does not match parameter");
  }

  OptimizerConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::uint64_t steps_ = 0;
};

}  // namespace cflow::diffcore
