#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "cflow/flow/assignment.hpp"
#include "cflow/flow/paths.hpp"

namespace cflow::flow {

enum class CouplingPlan { independent, ot };

inline std::string_view to_string(CouplingPlan p) { return p == CouplingPlan::ot ? "ot" : "independent"; }

inline CouplingPlan parse_coupling(std::string_view s) {
  if (s == "independent") return CouplingPlan::independent;
  if (s == "ot") return CouplingPlan::ot;
  fail(ErrorKind::config, "unknown coupling '" + std::string(s) + "' (expected independent or ot)");
}

/// Row-aligned source/target pairs.
struct Coupling {
  Batch x0;
  Batch x1;
  CouplingPlan plan = CouplingPlan::independent;
  /// Total squared transport cost sum_i |x0_i - x1_i|^2 of the pairing.
  double cost = 0.0;
};

inline double pairing_cost(const Batch& x0, const Batch& x1) {
  detail::check_pair(x0, x1);
  return (x0 - x1).rowwise().squaredNorm().sum();
}

inline Coupling independent_coupling(Batch x0, Batch x1) {
  const double c = pairing_cost(x0, x1);
  return {std::move(x0), std::move(x1), CouplingPlan::independent, c};
}

/// Squared-Euclidean optimal pairing of two equally sized batches: x1 is
/// permuted so that row i of x0 is matched with row i of the result.
inline Coupling ot_coupling(const Batch& x0, const Batch& x1) {
  if (x0.rows() != x1.rows()) fail(ErrorKind::shape, "ot_coupling needs equal batch sizes");
  if (x0.cols() != x1.cols()) fail(ErrorKind::shape, "ot_coupling needs equal point dimensions");
  if (x0.rows() == 0) fail(ErrorKind::precondition, "ot_coupling of empty batches");
  const Eigen::Index n = x0.rows();
  Matrix cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    cost.row(i) = (x1.rowwise() - x0.row(i)).rowwise().squaredNorm().transpose();
  const std::vector<std::size_t> match = solve_assignment(cost);
  Batch paired(n, x1.cols());
  for (Eigen::Index i = 0; i < n; ++i) paired.row(i) = x1.row(static_cast<Eigen::Index>(match[static_cast<std::size_t>(i)]));
  const double c = pairing_cost(x0, paired);
  return {x0, std::move(paired), CouplingPlan::ot, c};
}

inline Coupling make_coupling(CouplingPlan plan, Batch x0, Batch x1) {
  return plan == CouplingPlan::ot ? ot_coupling(x0, x1) : independent_coupling(std::move(x0), std::move(x1));
}

}  // namespace cflow::flow
