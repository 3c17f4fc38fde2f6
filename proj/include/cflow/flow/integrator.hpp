#pragma once

#include <cstddef>
#include <vector>

#include "cflow/diffcore/tensor.hpp"

namespace cflow::flow {

/// Forward Euler over t in [0, 1] with dt = 1 / n_steps. `field(t, x)` returns
/// the velocity of every row; `observe(k, t_k, x_k)` sees the state after k
/// steps for k = 0..n_steps.
template <class Field, class Observer>
diffcore::Batch euler(const Field& field, diffcore::Batch x, std::size_t n_steps, Observer&& observe) {
  if (n_steps < 1) fail(ErrorKind::precondition, "integration needs at least one step");
  const double dt = 1.0 / static_cast<double>(n_steps);
  observe(std::size_t{0}, 0.0, x);
  for (std::size_t k = 0; k < n_steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(n_steps);
    x += dt * field(t, x);
    observe(k + 1, static_cast<double>(k + 1) / static_cast<double>(n_steps), x);
  }
  return x;
}

template <class Field>
diffcore::Batch euler(const Field& field, diffcore::Batch x, std::size_t n_steps) {
  return euler(field, std::move(x), n_steps, [](std::size_t, double, const diffcore::Batch&) {});
}

/// A state captured during integration.
struct Snapshot {
  std::size_t step;
  double t;
  diffcore::Batch x;
};

/// `k_snapshots` evenly spaced states including t = 0 and t = 1.
template <class Field>
std::vector<Snapshot> trajectory(const Field& field, diffcore::Batch x0, std::size_t n_steps,
                                 std::size_t k_snapshots) {
  if (n_steps < 1) fail(ErrorKind::precondition, "integration needs at least one step");
  if (k_snapshots < 2 || k_snapshots > n_steps + 1)
    fail(ErrorKind::precondition, "snapshot count must lie in [2, n_steps + 1]");
  std::vector<std::size_t> wanted;
  for (std::size_t i = 0; i < k_snapshots; ++i) wanted.push_back(i * n_steps / (k_snapshots - 1));
  std::vector<Snapshot> out;
  std::size_t next = 0;
  euler(field, std::move(x0), n_steps, [&](std::size_t k, double t, const diffcore::Batch& x) {
    if (next < wanted.size() && wanted[next] == k) {
      out.push_back({k, t, x});
      ++next;
    }
  });
  return out;
}

}  // namespace cflow::flow
