#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <vector>

#include "cflow/diffcore/tensor.hpp"

namespace cflow::flow {

/// Exact minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting path method with row/column potentials (the
/// Hungarian algorithm in its O(n^3) Jonker-Volgenant form). Rows are added
/// one at a time; each insertion grows a Dijkstra-like alternating tree on the
/// reduced costs until a free column is reached, then flips the path.
/// Returns `column_of_row`.
inline std::vector<std::size_t> solve_assignment(const diffcore::Matrix& cost) {
  if (cost.rows() != cost.cols()) fail(ErrorKind::shape, "assignment needs a square cost matrix");
  if (!cost.allFinite()) fail(ErrorKind::numeric, "assignment costs must be finite");
  const auto n = static_cast<std::size_t>(cost.rows());
  constexpr double inf = std::numeric_limits<double>::infinity();

  // 1-based with index 0 as the virtual source column
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), min_slack(n + 1);
  std::vector<std::size_t> row_of_col(n + 1, 0), prev_col(n + 1, 0);
  std::vector<char> visited(n + 1);

  for (std::size_t row = 1; row <= n; ++row) {
    row_of_col[0] = row;
    std::size_t col = 0;
    std::fill(min_slack.begin(), min_slack.end(), inf);
    std::fill(visited.begin(), visited.end(), 0);
    do {
      visited[col] = 1;
      const std::size_t r = row_of_col[col];
      double delta = inf;
      std::size_t next = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (visited[j]) continue;
        const double reduced = cost(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(j - 1)) - u[r] - v[j];
        if (reduced < min_slack[j]) {
          min_slack[j] = reduced;
          prev_col[j] = col;
        }
        if (min_slack[j] < delta) {
          delta = min_slack[j];
          next = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (visited[j]) {
          u[row_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          min_slack[j] -= delta;
        }
      }
      col = next;
    } while (row_of_col[col] != 0);
    do {
      const std::size_t p = prev_col[col];
      row_of_col[col] = row_of_col[p];
      col = p;
    } while (col != 0);
  }

  std::vector<std::size_t> column_of_row(n);
  for (std::size_t j = 1; j <= n; ++j) column_of_row[row_of_col[j] - 1] = j - 1;
  return column_of_row;
}

}  // namespace cflow::flow
