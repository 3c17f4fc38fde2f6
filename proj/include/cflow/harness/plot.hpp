#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cflow/flow/integrator.hpp"

namespace cflow::harness {

using diffcore::Batch;

/// Trajectory snapshots as CSV with header snapshot_index,t,x,y.
inline void write_trajectory_csv(const std::filesystem::path& path, const std::vector<flow::Snapshot>& snaps) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out.precision(17);
  out << "snapshot_index,t,x,y\n";
  for (std::size_t k = 0; k < snaps.size(); ++k) {
    const Batch& x = snaps[k].x;
    if (x.cols() != 2) fail(ErrorKind::shape, "trajectory CSV expects 2D points");
    for (Eigen::Index i = 0; i < x.rows(); ++i) out << k << ',' << snaps[k].t << ',' << x(i, 0) << ',' << x(i, 1) << '\n';
  }
  if (!out) fail(ErrorKind::io, "failed writing " + path.string());
}

struct ScatterLayer {
  Batch points;
  std::string colour;
};

/// Static SVG scatter of 2D point layers on a fixed [-extent, extent]^2 frame.
inline void write_scatter_svg(const std::filesystem::path& path, const std::vector<ScatterLayer>& layers,
                              const std::string& title, double extent = 2.5, int size = 480) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  const double s = size / (2.0 * extent);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size + 24
      << "\" viewBox=\"0 0 " << size << ' ' << size + 24 << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"8\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n"
      << "<g transform=\"translate(0,24)\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"none\" stroke=\"#999\"/>\n";
  char buf[128];
  for (const auto& layer : layers) {
    out << "<g fill=\"" << layer.colour << "\" fill-opacity=\"0.5\">\n";
    for (Eigen::Index i = 0; i < layer.points.rows(); ++i) {
      const double px = (layer.points(i, 0) + extent) * s, py = (extent - layer.points(i, 1)) * s;
      if (px < 0 || py < 0 || px > size || py > size) continue;
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"1.5\"/>\n", px, py);
      out << buf;
    }
    out << "</g>\n";
  }
  out << "</g>\n</svg>\n";
}

}  // namespace cflow::harness
