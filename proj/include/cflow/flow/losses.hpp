#pragma once

#include "cflow/diffcore/mlp.hpp"
#include "cflow/energy/energy.hpp"
#include "cflow/flow/coupling.hpp"

namespace cflow::flow {

using diffcore::Tape;
using diffcore::Var;
using diffcore::VelocityField;

/// Raw weight sums below this are treated as a fully suppressed batch.
inline constexpr double kMinWeightSum = 1e-12;

/// Regression inputs shared by every flow-matching objective: the sampled
/// times, the (possibly noisy) interpolants, and the per-pair targets.
struct RegressionBatch {
  Vector t;
  Batch xt;
  Batch target;
  Batch x1;
};

inline RegressionBatch make_regression_batch(const Coupling& c, const Vector& t, double sigma, Rng& rng) {
  if (c.x0.rows() == 0) fail(ErrorKind::precondition, "empty coupling");
  return {t, conditional_sample(c.x0, c.x1, t, sigma, rng), target_velocity(c.x0, c.x1), c.x1};
}

/// Per-row squared residual |v(t, x_t) - (x1 - x0)|^2 as an (n x 1) node.
inline Var squared_residuals(Tape& tape, VelocityField& field, const RegressionBatch& b) {
  Var v = field.forward(tape, b.t, b.xt);
  return tape.row_squared_norm(tape.sub(v, tape.constant(b.target)));
}

/// Mean squared regression error.
inline Var cfm_objective(Tape& tape, VelocityField& field, const RegressionBatch& b) {
  return tape.mean(squared_residuals(tape, field, b));
}

/// Pair weights sigma(-lambda F(x1)), rescaled by their maximum.
///
/// The normalised objective is invariant to a common factor, and after the
/// rescale a constant energy yields weights of exactly 1, so the weighted mean
/// reduces to the plain mean bit for bit. Throws a `suppressed` Error when the
/// raw weights sum below kMinWeightSum.
inline Vector normalized_weights(const energy::EnergySpec& f, const Batch& x1) {
  Vector w = f.weight(x1);
  const double total = w.sum();
  if (!(total >= kMinWeightSum))
    fail(ErrorKind::suppressed, "fully suppressed batch (weight sum " + std::to_string(total) + ")");
  const double top = w.maxCoeff();
  for (Eigen::Index i = 0; i < w.size(); ++i) w(i) /= top;
  return w;
}

/// Energy-reweighted objective: sum_j w_j e_j / sum_j w_j with w_j = sigma(-lambda F(x1_j)).
inline Var erfm_objective(Tape& tape, VelocityField& field, const RegressionBatch& b, const energy::EnergySpec& f) {
  const Vector w = normalized_weights(f, b.x1);
  return tape.weighted_mean(squared_residuals(tape, field, b), w);
}

/// Unnormalised expectation form (1/n) sum_j w_j e_j.
inline Var erfm_objective_unnormalized(Tape& tape, VelocityField& field, const RegressionBatch& b,
                                       const energy::EnergySpec& f) {
  const Vector w = f.weight(b.x1);
  const double n = static_cast<double>(b.x1.rows());
  return tape.scale(tape.weighted_sum(squared_residuals(tape, field, b), w), 1.0 / n);
}

/// Value of the CFM loss on a coupling, with interpolation noise sigma.
inline double cfm_loss(VelocityField& field, const Coupling& c, const Vector& t, double sigma, Rng& rng) {
  Tape tape;
  return tape.value(cfm_objective(tape, field, make_regression_batch(c, t, sigma, rng)))(0, 0);
}

/// Value of the normalised ERFM loss on a coupling.
inline double erfm_loss(VelocityField& field, const Coupling& c, const Vector& t, const energy::EnergySpec& f,
                        double sigma, Rng& rng) {
  Tape tape;
  return tape.value(erfm_objective(tape, field, make_regression_batch(c, t, sigma, rng), f))(0, 0);
}

}  // namespace cflow::flow
