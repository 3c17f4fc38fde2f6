#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cflow/datasets/datasets.hpp"
#include "cflow/diffcore/checkpoint.hpp"
#include "cflow/flow/integrator.hpp"

namespace cflow::flow {

using datasets::BaseSampler;
using diffcore::Batch;

inline constexpr std::size_t kDefaultIntegrationSteps = 10;

/// A trained velocity field together with the source it integrates from.
///
/// Sampling draws x0 from the base (a Gaussian, a stored point set, or
/// another FlowModel, whose own samples are then transported further) and
/// runs forward Euler. An unlearned model therefore keeps a reference to the
/// pretrained model it was fitted against. Immutable once built; const
/// members are safe to call from several threads.
class FlowModel : public datasets::Generator {
 public:
  FlowModel(diffcore::VelocityField field, BaseSampler base, std::size_t n_steps = kDefaultIntegrationSteps,
            nlohmann::json provenance = nlohmann::json::object())
      : field_(std::move(field)), base_(std::move(base)), n_steps_(n_steps), provenance_(std::move(provenance)) {
    if (n_steps_ < 1) fail(ErrorKind::precondition, "integration steps must be at least 1");
    if (base_.kind() == BaseSampler::Kind::model && !std::dynamic_pointer_cast<const FlowModel>(base_.generator()))
      fail(ErrorKind::precondition, "a flow model can only chain onto another flow model");
  }

  const diffcore::VelocityField& field() const { return field_; }
  const BaseSampler& base() const { return base_; }
  std::size_t n_steps() const { return n_steps_; }
  const nlohmann::json& provenance() const { return provenance_; }

  std::shared_ptr<const FlowModel> base_model() const {
    return std::dynamic_pointer_cast<const FlowModel>(base_.generator());
  }

  /// Number of flows applied per sample, counting this one.
  std::size_t depth() const {
    auto parent = base_model();
    return 1 + (parent ? parent->depth() : 0);
  }

  Batch transport(Batch x0, std::size_t n_steps) const {
    return euler([this](double t, const Batch& x) { return field_(t, x); }, std::move(x0), n_steps);
  }

  Batch generate(std::size_t n, Rng& rng) const override { return transport(base_.sample(n, rng), n_steps_); }

  Batch sample(std::size_t n, std::size_t n_steps, std::uint64_t seed) const {
    if (n_steps < 1) fail(ErrorKind::precondition, "integration steps must be at least 1");
    Rng rng(seed);
    return transport(base_.sample(n, rng), n_steps);
  }

  std::vector<Snapshot> trajectory(const Batch& x0, std::size_t n_steps, std::size_t k_snapshots) const {
    return flow::trajectory([this](double t, const Batch& x) { return field_(t, x); }, x0, n_steps, k_snapshots);
  }

  void write(std::ostream& out) const {
    const char* base_kind = base_.kind() == BaseSampler::Kind::gaussian    ? "gaussian"
                            : base_.kind() == BaseSampler::Kind::empirical ? "empirical"
                                                                           : "model";
    const nlohmann::json meta{{"n_steps", n_steps_}, {"base", base_kind}, {"provenance", provenance_}};
    diffcore::write_checkpoint(out, {diffcore::CheckpointKind::flow_model, field_.net(), meta.dump()});
    if (base_.kind() == BaseSampler::Kind::empirical) {
      const Batch& pts = base_.points();
      diffcore::detail::put_u64(out, static_cast<std::uint64_t>(pts.rows()));
      diffcore::detail::put_u64(out, static_cast<std::uint64_t>(pts.cols()));
      for (Eigen::Index i = 0; i < pts.size(); ++i) diffcore::detail::put_f64(out, pts.data()[i]);
    } else if (base_.kind() == BaseSampler::Kind::model) {
      base_model()->write(out);
    }
    if (!out) fail(ErrorKind::io, "failed writing flow model");
  }

  static FlowModel read(std::istream& in, int depth = 0) {
    if (depth > 16) fail(ErrorKind::format, "flow model chain too deep");
    diffcore::CheckpointRecord rec = diffcore::read_checkpoint(in);
    if (rec.kind != diffcore::CheckpointKind::flow_model) fail(ErrorKind::format, "not a flow model checkpoint");
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(rec.metadata);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, std::string("flow model metadata: ") + e.what());
    }
    const std::string base_kind = meta.value("base", "");
    BaseSampler base = BaseSampler::gaussian(rec.net.output_dim());
    if (base_kind == "empirical") {
      const std::uint64_t rows = diffcore::detail::get_u64(in);
      const std::uint64_t cols = diffcore::detail::get_u64(in);
      if (rows == 0 || rows > (1ULL << 26) || cols != rec.net.output_dim())
        fail(ErrorKind::format, "implausible empirical base in flow checkpoint");
      Batch pts(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = diffcore::detail::get_f64(in);
      base = BaseSampler::empirical(std::move(pts));
    } else if (base_kind == "model") {
      base = BaseSampler::model(std::make_shared<const FlowModel>(read(in, depth + 1)), rec.net.output_dim());
    } else if (base_kind != "gaussian") {
      fail(ErrorKind::format, "unknown flow base kind '" + base_kind + "'");
    }
    return FlowModel(diffcore::VelocityField(std::move(rec.net)), std::move(base),
                     meta.value("n_steps", kDefaultIntegrationSteps), meta.value("provenance", nlohmann::json::object()));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out = diffcore::open_for_write(path);
    write(out);
  }

  static FlowModel load(const std::filesystem::path& path) {
    std::ifstream in = diffcore::open_for_read(path);
    return read(in);
  }

 private:
  diffcore::VelocityField field_;
  BaseSampler base_;
  std::size_t n_steps_;
  nlohmann::json provenance_;
};

}  // namespace cflow::flow
