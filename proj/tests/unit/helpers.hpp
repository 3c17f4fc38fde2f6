#pragma once

#include <algorithm>
#include <array>
#include <initializer_list>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "cflow/diffcore/mlp.hpp"
#include "cflow/energy/classifier.hpp"

namespace cflow::testing {

using diffcore::Matrix;
using diffcore::Tensor;

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "cflow-" + tag;
    if (info) name += std::string("-") + info->test_suite_name() + "-" + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Asserts that `fn` throws a cflow::Error of the given kind.
inline void expect_error(ErrorKind kind, const std::function<void()>& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected a " << to_string(kind) << " error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

struct GradCheck {
  double worst = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
};

/// Compares the analytic gradients already accumulated in `params` against
/// central differences of `loss` with step h. Relative error tolerance 1e-4,
/// widened to 1e-3 where both magnitudes are below 1e-6.
inline GradCheck finite_difference_check(const std::vector<Tensor*>& params, const std::function<double()>& loss,
                                         double h = 1e-5) {
  GradCheck out;
  for (Tensor* p : params) {
    const Matrix analytic = p->grad();
    for (Eigen::Index i = 0; i < p->value().size(); ++i) {
      double& x = p->value().data()[i];
      const double saved = x;
      x = saved + h;
      const double up = loss();
      x = saved - h;
      const double down = loss();
      x = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.data()[i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double rel = scale == 0.0 ? 0.0 : std::abs(a - numeric) / scale;
      const double tol = scale < 1e-6 ? 1e-3 : 1e-4;
      // Below this both values are rounding noise of the difference quotient.
      const bool ok = rel <= tol || std::abs(a - numeric) < 1e-10;
      if (!ok) ++out.failures;
      if (std::abs(a - numeric) >= 1e-10) out.worst = std::max(out.worst, rel);
      ++out.checked;
    }
  }
  return out;
}

inline diffcore::Batch points(std::initializer_list<std::array<double, 2>> rows) {
  diffcore::Batch b(static_cast<Eigen::Index>(rows.size()), 2);
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    b(i, 0) = r[0];
    b(i, 1) = r[1];
    ++i;
  }
  return b;
}

/// Classifier whose raw logit is wx*x + wy*y + b, so its energy is that affine
/// function up to the probability clamp.
inline energy::BinaryClassifier linear_classifier(double wx, double wy, double b) {
  diffcore::Mlp net = diffcore::Mlp::zeros({2, 1});
  net.weight(0).value() << wx, wy;
  net.bias(0).value()(0, 0) = b;
  return energy::BinaryClassifier(std::move(net), "synthetic", 0, 1.0);
}

/// A default-config classifier on 10000 circles points, trained once per process.
inline const energy::BinaryClassifier& circles_classifier() {
  static const energy::BinaryClassifier c = [] {
    energy::ClassifierConfig cfg;
    cfg.seed = 1;
    return energy::train_classifier(datasets::generate(datasets::Benchmark::circles, 10000, 1), cfg);
  }();
  return c;
}

}  // namespace cflow::testing
