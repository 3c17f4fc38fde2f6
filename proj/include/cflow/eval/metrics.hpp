#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cflow/energy/classifier.hpp"
#include "cflow/flow/model.hpp"

namespace cflow::eval {

using diffcore::Batch;
using diffcore::Vector;

/// RBF kernel k(x, y) = exp(-|x - y|^2 / (2 bandwidth^2)).
struct KernelConfig {
  double bandwidth = 1.0;

  void validate() const {
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) fail(ErrorKind::precondition, "kernel bandwidth must be positive");
  }

  double operator()(const Eigen::Ref<const Eigen::RowVectorXd>& x, const Eigen::Ref<const Eigen::RowVectorXd>& y) const {
    return std::exp(-(x - y).squaredNorm() / (2.0 * bandwidth * bandwidth));
  }
};

namespace detail {

/// sum_{i,j} k(a_i, b_j), accumulated row by row of a in a fixed order.
inline double kernel_sum(const Batch& a, const Batch& b, const KernelConfig& k) {
  const double scale = -1.0 / (2.0 * k.bandwidth * k.bandwidth);
  double total = 0.0;
  Eigen::ArrayXd d2(b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    d2.setZero();
    for (Eigen::Index c = 0; c < a.cols(); ++c) d2 += (b.col(c).array() - a(i, c)).square();
    total += (scale * d2).exp().sum();
  }
  return total;
}

/// Strict weak order on batches by shape then contents; used to orient the
/// cross term so mmd2(X, Y) and mmd2(Y, X) evaluate identically.
inline bool batch_less(const Batch& a, const Batch& b) {
  if (a.rows() != b.rows()) return a.rows() < b.rows();
  if (a.cols() != b.cols()) return a.cols() < b.cols();
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

}  // namespace detail

/// Biased (V-statistic) squared MMD, with all index pairs including the diagonal:
///   (1/n^2) sum k(x, x') + (1/m^2) sum k(y, y') - (2/nm) sum k(x, y).
inline double mmd2(const Batch& x, const Batch& y, const KernelConfig& k = {}) {
  k.validate();
  if (x.rows() < 1 || y.rows() < 1) fail(ErrorKind::precondition, "MMD of an empty set");
  if (x.cols() != y.cols()) fail(ErrorKind::shape, "MMD of sets with different point dimensions");
  const double n = static_cast<double>(x.rows()), m = static_cast<double>(y.rows());
  const double xx = detail::kernel_sum(x, x, k) / (n * n);
  const double yy = detail::kernel_sum(y, y, k) / (m * m);
  const bool swap = detail::batch_less(y, x);
  const double xy = detail::kernel_sum(swap ? y : x, swap ? x : y, k) / (n * m);
  // Non-negative in exact arithmetic; clamp away rounding residue.
  return std::max(0.0, (xx + yy) - 2.0 * xy);
}

/// Fraction of retained points the classifier places in the retain class.
inline double retention_accuracy(const energy::BinaryClassifier& c, const Batch& retained) {
  if (retained.rows() < 1) fail(ErrorKind::precondition, "retention accuracy of an empty set");
  return energy::classification_accuracy(
      c, retained, std::vector<datasets::Label>(static_cast<std::size_t>(retained.rows()), datasets::Label::retain));
}

/// Fraction of generated samples with C(x) > 0.5.
inline double forget_rate(const energy::BinaryClassifier& c, const Batch& generated) {
  if (generated.rows() < 1) fail(ErrorKind::precondition, "forget rate of an empty set");
  const Vector p = c.probability(generated);
  return static_cast<double>((p.array() > 0.5).count()) / static_cast<double>(p.size());
}

/// Mean forget-class confidence over generated samples.
inline double leakage(const energy::BinaryClassifier& c, const Batch& generated) {
  if (generated.rows() < 1) fail(ErrorKind::precondition, "leakage of an empty set");
  return c.probability(generated).mean();
}

struct TimingStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t repeats = 0;
};

inline TimingStats summarize(const std::vector<double>& xs) {
  TimingStats s;
  s.repeats = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

/// Mean per-sample generation time in milliseconds, over `repeats` runs of
/// `n` samples at `n_steps` integration steps.
inline TimingStats inference_ms_per_sample(const flow::FlowModel& model, std::size_t n = 5000,
                                           std::size_t n_steps = 10, std::size_t repeats = 3,
                                           std::uint64_t seed = 0) {
  if (n < 1 || repeats < 1) fail(ErrorKind::precondition, "timing needs at least one sample and one repeat");
  std::vector<double> ms;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const Batch out = model.sample(n, n_steps, seed + r);
    const auto t1 = std::chrono::steady_clock::now();
    if (out.rows() != static_cast<Eigen::Index>(n)) fail(ErrorKind::state, "sampler returned the wrong count");
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(n));
  }
  return summarize(ms);
}

/// One evaluated run. Absent metrics stay empty and are written as NA.
struct MetricsReport {
  std::string dataset;
  std::string method;
  std::uint64_t seed = 0;
  std::optional<double> lambda;
  std::optional<double> mmd_retain;
  std::optional<double> retention_accuracy;
  std::optional<double> forget_rate;
  std::optional<double> leakage;
  std::optional<double> train_time_s;
  std::optional<double> inference_ms_per_sample;
  std::optional<double> inference_ms_std;

  void validate() const {
    for (const auto& rate : {retention_accuracy, forget_rate, leakage})
      if (rate && !(*rate >= 0.0 && *rate <= 1.0)) fail(ErrorKind::state, "rate metric outside [0, 1]");
    if (mmd_retain && !(*mmd_retain >= 0.0)) fail(ErrorKind::state, "negative MMD");
    for (const auto& t : {train_time_s, inference_ms_per_sample, inference_ms_std})
      if (t && !(*t >= 0.0)) fail(ErrorKind::state, "negative timing");
  }
};

}  // namespace cflow::eval
