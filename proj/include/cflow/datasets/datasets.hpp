#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "cflow/diffcore/tensor.hpp"
#include "cflow/rng.hpp"

namespace cflow::datasets {

using diffcore::Batch;
using diffcore::Matrix;

enum class Benchmark { circles, moons, gaussians6, checkerboard };

inline constexpr std::array<Benchmark, 4> kAllBenchmarks{Benchmark::circles, Benchmark::moons,
                                                         Benchmark::gaussians6, Benchmark::checkerboard};

inline std::string_view to_string(Benchmark b) {
  switch (b) {
    case Benchmark::circles: return "circles";
    case Benchmark::moons: return "moons";
    case Benchmark::gaussians6: return "gaussians6";
    case Benchmark::checkerboard: return "checkerboard";
  }
  return "unknown";
}

inline Benchmark parse_benchmark(std::string_view name) {
  for (Benchmark b : kAllBenchmarks)
    if (to_string(b) == name) return b;
  fail(ErrorKind::precondition, "unknown benchmark '" + std::string(name) +
                                    "' (expected circles, moons, gaussians6 or checkerboard)");
}

enum class Label : std::uint8_t { retain = 0, forget = 1 };

inline std::string_view to_string(Label l) { return l == Label::retain ? "retain" : "forget"; }

/// Generator constants, in the final [-2, 2]^2 coordinates.
namespace geometry {
inline constexpr double kCircleInner = 0.5;
inline constexpr double kCircleOuter = 1.0;
inline constexpr double kCircleNoise = 0.05;

// Standard two-moons: upper arc centred at the origin, lower arc centred at
// (1, 0.5), both radius 1, then shifted by -kMoonCentre so the pair is centred.
inline constexpr double kMoonNoise = 0.05;
inline constexpr std::array<double, 2> kMoonCentre{0.5, 0.25};
inline constexpr std::array<double, 2> kMoonUpper{0.0 - kMoonCentre[0], 0.0 - kMoonCentre[1]};
inline constexpr std::array<double, 2> kMoonLower{1.0 - kMoonCentre[0], 0.5 - kMoonCentre[1]};

// Six clusters on a radius-2 circle with sigma 0.1, scaled by 0.8 so that the
// clusters' 3-sigma extent stays inside [-2, 2]^2.
inline constexpr double kGaussianScale = 0.8;
inline constexpr double kGaussianRadius = 2.0 * kGaussianScale;
inline constexpr double kGaussianSigma = 0.1 * kGaussianScale;

// 4 x 4 unit cells on [-2, 2]^2; cell (column i, row j) counted from the
// bottom-left is occupied when i + j is even.
inline constexpr int kGridCells = 4;
inline constexpr double kGridLow = -2.0;

inline std::array<double, 2> gaussian_centre(int cluster) {  // cluster in 1..6, counterclockwise from angle 0
  const double angle = (cluster - 1) * std::numbers::pi / 3.0;
  return {kGaussianRadius * std::cos(angle), kGaussianRadius * std::sin(angle)};
}

inline bool gaussian_cluster_retained(int cluster) { return cluster % 2 == 1; }

inline bool cell_occupied(int column, int row) { return (column + row) % 2 == 0; }

inline bool cell_forgotten(int column, int row) {
  return cell_occupied(column, row) && (row == kGridCells - 1 || column == kGridCells - 1);
}

inline double arc_distance(double x, double y, std::array<double, 2> centre, bool upper) {
  const double dx = x - centre[0], dy = y - centre[1];
  const bool on_side = upper ? dy >= 0.0 : dy <= 0.0;
  if (on_side) return std::abs(std::hypot(dx, dy) - 1.0);
  // nearest endpoint at (centre.x +- 1, centre.y)
  return std::min(std::hypot(dx - 1.0, dy), std::hypot(dx + 1.0, dy));
}

inline double box_distance(double x, double y, int column, int row) {
  const double x0 = kGridLow + column, y0 = kGridLow + row;
  const double dx = std::max({x0 - x, 0.0, x - (x0 + 1.0)});
  const double dy = std::max({y0 - y, 0.0, y - (y0 + 1.0)});
  return std::hypot(dx, dy);
}
}  // namespace geometry

/// Distances from a point to the retain and forget regions of a benchmark.
/// The region of a label is the support of the generator for that label
/// (ring, arc, cluster centres, or occupied cells).
struct RegionDistances {
  double retain;
  double forget;
};

inline RegionDistances region_distances(Benchmark b, double x, double y) {
  using namespace geometry;
  switch (b) {
    case Benchmark::circles: {
      const double r = std::hypot(x, y);
      return {std::abs(r - kCircleInner), std::abs(r - kCircleOuter)};
    }
    case Benchmark::moons:
      return {arc_distance(x, y, kMoonLower, false), arc_distance(x, y, kMoonUpper, true)};
    case Benchmark::gaussians6: {
      RegionDistances d{1e300, 1e300};
      for (int c = 1; c <= 6; ++c) {
        const auto m = gaussian_centre(c);
        const double dist = std::hypot(x - m[0], y - m[1]);
        double& slot = gaussian_cluster_retained(c) ? d.retain : d.forget;
        slot = std::min(slot, dist);
      }
      return d;
    }
    case Benchmark::checkerboard: {
      RegionDistances d{1e300, 1e300};
      for (int i = 0; i < kGridCells; ++i)
        for (int j = 0; j < kGridCells; ++j) {
          if (!cell_occupied(i, j)) continue;
          double& slot = cell_forgotten(i, j) ? d.forget : d.retain;
          slot = std::min(slot, box_distance(x, y, i, j));
        }
      return d;
    }
  }
  return {0.0, 0.0};
}

/// Nearest-region label of a point.
inline Label region_label(Benchmark b, double x, double y) {
  const RegionDistances d = region_distances(b, x, y);
  return d.forget < d.retain ? Label::forget : Label::retain;
}

struct LabeledDataset {
  Benchmark name = Benchmark::circles;
  std::uint64_t seed = 0;
  Batch points;
  std::vector<Label> labels;

  std::size_t size() const { return labels.size(); }

  std::size_t count(Label l) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), l));
  }

  Batch subset(Label l) const {
    Batch out(static_cast<Eigen::Index>(count(l)), points.cols());
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == l) out.row(k++) = points.row(static_cast<Eigen::Index>(i));
    return out;
  }

  Batch retain() const { return subset(Label::retain); }
  Batch forget() const { return subset(Label::forget); }
};

/// Draws n labelled points of a benchmark. Labels come from the mixture
/// component that produced each point.
inline LabeledDataset generate(Benchmark name, std::size_t n, std::uint64_t seed) {
  using namespace geometry;
  if (n < 1) fail(ErrorKind::precondition, "dataset size must be at least 1");
  Rng rng(seed);
  LabeledDataset ds{name, seed, Batch(static_cast<Eigen::Index>(n), 2), {}};
  ds.labels.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    double x = 0.0, y = 0.0;
    Label label = Label::retain;
    switch (name) {
      case Benchmark::circles: {
        const bool outer = rng.bernoulli(0.5);
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double r = (outer ? kCircleOuter : kCircleInner) + kCircleNoise * rng.normal();
        x = r * std::cos(angle);
        y = r * std::sin(angle);
        label = outer ? Label::forget : Label::retain;
        break;
      }
      case Benchmark::moons: {
        const bool lower = rng.bernoulli(0.5);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        if (lower) {
          x = kMoonLower[0] - std::cos(theta);
          y = kMoonLower[1] - std::sin(theta);
        } else {
          x = kMoonUpper[0] + std::cos(theta);
          y = kMoonUpper[1] + std::sin(theta);
        }
        x += kMoonNoise * rng.normal();
        y += kMoonNoise * rng.normal();
        label = lower ? Label::retain : Label::forget;
        break;
      }
      case Benchmark::gaussians6: {
        const int cluster = 1 + static_cast<int>(rng.index(6));
        const auto m = gaussian_centre(cluster);
        x = m[0] + kGaussianSigma * rng.normal();
        y = m[1] + kGaussianSigma * rng.normal();
        label = gaussian_cluster_retained(cluster) ? Label::retain : Label::forget;
        break;
      }
      case Benchmark::checkerboard: {
        // 8 occupied cells, pick one uniformly then a uniform point inside it
        const auto cell = static_cast<int>(rng.index(8));
        const int row = cell / 2;
        const int column = 2 * (cell % 2) + (row % 2);
        x = kGridLow + column + rng.uniform();
        y = kGridLow + row + rng.uniform();
        label = cell_forgotten(column, row) ? Label::forget : Label::retain;
        break;
      }
    }
    ds.points(i, 0) = x;
    ds.points(i, 1) = y;
    ds.labels.push_back(label);
  }
  return ds;
}

/// Anything that can produce i.i.d. draws (e.g. a trained flow).
class Generator {
 public:
  virtual ~Generator() = default;
  virtual Batch generate(std::size_t n, Rng& rng) const = 0;
};

/// Source distribution for a coupling: a standard Gaussian, uniform
/// resampling of a fixed point set, or draws from a generator.
class BaseSampler {
 public:
  enum class Kind { gaussian, empirical, model };

  static BaseSampler gaussian(std::size_t dim = 2) {
    BaseSampler s;
    s.kind_ = Kind::gaussian;
    s.dim_ = dim;
    return s;
  }

  static BaseSampler empirical(Batch points) {
    if (points.rows() < 1) fail(ErrorKind::precondition, "empirical sampler needs at least one point");
    BaseSampler s;
    s.kind_ = Kind::empirical;
    s.dim_ = static_cast<std::size_t>(points.cols());
    s.points_ = std::make_shared<const Batch>(std::move(points));
    return s;
  }

  static BaseSampler model(std::shared_ptr<const Generator> generator, std::size_t dim = 2) {
    BaseSampler s;
    s.kind_ = Kind::model;
    s.dim_ = dim;
    s.generator_ = std::move(generator);
    return s;
  }

  Kind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  const std::shared_ptr<const Generator>& generator() const { return generator_; }
  const Batch& points() const {
    if (!points_) fail(ErrorKind::state, "sampler has no backing point set");
    return *points_;
  }

  Batch sample(std::size_t n, Rng& rng) const {
    if (n < 1) fail(ErrorKind::precondition, "sample size must be at least 1");
    const auto rows = static_cast<Eigen::Index>(n);
    switch (kind_) {
      case Kind::gaussian:
        return rng.normal_matrix<Batch>(rows, static_cast<Eigen::Index>(dim_));
      case Kind::empirical: {
        Batch out(rows, points_->cols());
        for (Eigen::Index i = 0; i < rows; ++i)
          out.row(i) = points_->row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(points_->rows()))));
        return out;
      }
      case Kind::model:
        if (!generator_) fail(ErrorKind::state, "model sampler has no loaded checkpoint");
        return generator_->generate(n, rng);
    }
    return {};
  }

 private:
  BaseSampler() = default;
  Kind kind_ = Kind::gaussian;
  std::size_t dim_ = 2;
  std::shared_ptr<const Batch> points_;
  std::shared_ptr<const Generator> generator_;
};

/// CSV with header `x,y,label`.
inline void write_csv(const std::filesystem::path& path, const LabeledDataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "x,y,label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out << ds.points(r, 0) << ',' << ds.points(r, 1) << ',' << to_string(ds.labels[i]) << '\n';
  }
  if (!out) fail(ErrorKind::io, "failed writing " + path.string());
}

/// Reads the x and y columns of a CSV with a header row naming them.
inline Batch read_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::format, path.string() + " is empty");
  std::vector<std::string> header;
  {
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      header.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  for (auto& h : header)
    if (!h.empty() && h.back() == '\r') h.pop_back();
  const auto xi = std::find(header.begin(), header.end(), "x") - header.begin();
  const auto yi = std::find(header.begin(), header.end(), "y") - header.begin();
  if (xi == static_cast<long>(header.size()) || yi == static_cast<long>(header.size()))
    fail(ErrorKind::format, path.string() + " needs x and y columns");
  std::vector<std::array<double, 2>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cells.size() != header.size())
      fail(ErrorKind::format, path.string() + ":" + std::to_string(line_no) + " has the wrong column count");
    try {
      rows.push_back({std::stod(cells[static_cast<std::size_t>(xi)]), std::stod(cells[static_cast<std::size_t>(yi)])});
    } catch (const std::exception&) {
      fail(ErrorKind::format, path.string() + ":" + std::to_string(line_no) + " is not numeric");
    }
  }
  Batch out(static_cast<Eigen::Index>(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out(static_cast<Eigen::Index>(i), 0) = rows[i][0];
    out(static_cast<Eigen::Index>(i), 1) = rows[i][1];
  }
  return out;
}

inline void write_points_csv(const std::filesystem::path& path, const Batch& points) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "x,y\n";
  for (Eigen::Index i = 0; i < points.rows(); ++i) out << points(i, 0) << ',' << points(i, 1) << '\n';
  if (!out) fail(ErrorKind::io, "failed writing " + path.string());
}

}  // namespace cflow::datasets
