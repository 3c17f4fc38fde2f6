#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "cflow/datasets/datasets.hpp"
#include "cflow/diffcore/checkpoint.hpp"
#include "cflow/diffcore/optimizer.hpp"

namespace cflow::energy {

using diffcore::Batch;
using diffcore::Matrix;
using diffcore::Vector;

/// Probabilities are clamped to [kProbabilityClamp, 1 - kProbabilityClamp]
/// before any logit is taken.
inline constexpr double kProbabilityClamp = 1e-6;

struct ClassifierConfig {
  std::vector<std::size_t> hidden = diffcore::default_hidden();
  std::size_t steps = 1500;
  std::size_t batch = 256;
  double learning_rate = 1e-3;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// Estimates P(forget | x) with a sigmoid on a scalar MLP output.
class BinaryClassifier {
 public:
  BinaryClassifier() = default;

  BinaryClassifier(diffcore::Mlp net, std::string dataset, std::uint64_t seed, double holdout_accuracy)
      : net_(std::move(net)), dataset_(std::move(dataset)), seed_(seed),
        holdout_accuracy_(holdout_accuracy), trained_(true) {
    if (net_.output_dim() != 1) fail(ErrorKind::shape, "classifier network must have a scalar output");
  }

  bool trained() const { return trained_; }
  const diffcore::Mlp& net() const { return net_; }
  const std::string& dataset() const { return dataset_; }
  std::uint64_t seed() const { return seed_; }
  double holdout_accuracy() const { return holdout_accuracy_; }

  /// Raw network output (unclamped log-odds).
  Vector raw_logit(const Batch& x) const {
    require_trained();
    return net_.forward(x).col(0);
  }

  /// C(x), clamped into [eps, 1 - eps].
  Vector probability(const Batch& x) const {
    Vector z = raw_logit(x);
    for (Eigen::Index i = 0; i < z.size(); ++i)
      z(i) = std::clamp(diffcore::sigmoid(z(i)), kProbabilityClamp, 1.0 - kProbabilityClamp);
    return z;
  }

  /// logit(C(x)) of the clamped probability.
  Vector logit(const Batch& x) const {
    Vector p = probability(x);
    for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = diffcore::logit(p(i));
    return p;
  }

  void save(const std::filesystem::path& path) const {
    require_trained();
    const nlohmann::json meta{{"dataset", dataset_}, {"seed", seed_}, {"holdout_accuracy", holdout_accuracy_}};
    diffcore::save_checkpoint(path, {diffcore::CheckpointKind::classifier, net_, meta.dump()});
  }

  static BinaryClassifier load(const std::filesystem::path& path) {
    diffcore::CheckpointRecord rec = diffcore::load_checkpoint(path);
    if (rec.kind != diffcore::CheckpointKind::classifier)
      fail(ErrorKind::format, path.string() + " is not a classifier checkpoint");
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(rec.metadata);
      return BinaryClassifier(std::move(rec.net), meta.at("dataset").get<std::string>(),
                              meta.at("seed").get<std::uint64_t>(), meta.at("holdout_accuracy").get<double>());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, "classifier metadata in " + path.string() + ": " + e.what());
    }
  }

 private:
  void require_trained() const {
    if (!trained_) fail(ErrorKind::state, "classifier has not been trained");
  }

  diffcore::Mlp net_;
  std::string dataset_;
  std::uint64_t seed_ = 0;
  double holdout_accuracy_ = 0.0;
  bool trained_ = false;
};

/// Fraction of points whose thresholded prediction (C > 0.5 means forget) matches the label.
inline double classification_accuracy(const BinaryClassifier& c, const Batch& points,
                                      const std::vector<datasets::Label>& labels) {
  if (points.rows() == 0) fail(ErrorKind::precondition, "accuracy of an empty set");
  if (static_cast<std::size_t>(points.rows()) != labels.size())
    fail(ErrorKind::shape, "one label per point required");
  const Vector p = c.probability(points);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool forget = p(static_cast<Eigen::Index>(i)) > 0.5;
    correct += forget == (labels[i] == datasets::Label::forget) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Trains a retain/forget classifier with binary cross-entropy and Adam on a
/// shuffled split of `data`; the remaining fraction is used to report
/// held-out accuracy.
inline BinaryClassifier train_classifier(const datasets::LabeledDataset& data, const ClassifierConfig& cfg) {
  const std::size_t n_forget = data.count(datasets::Label::forget);
  if (n_forget == 0 || n_forget == data.size())
    fail(ErrorKind::precondition, "classifier training needs both retain and forget points");
  if (cfg.steps < 1 || cfg.batch < 1) fail(ErrorKind::precondition, "classifier steps and batch must be positive");
  if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0))
    fail(ErrorKind::precondition, "holdout fraction must lie in (0, 1)");

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng.engine());
  const auto n_holdout = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(data.size())));
  if (n_holdout >= data.size()) fail(ErrorKind::precondition, "dataset too small for a held-out split");
  const std::size_t n_train = data.size() - n_holdout;

  std::vector<std::size_t> widths{2};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(1);
  diffcore::Mlp net(widths, rng);
  diffcore::Optimizer opt({diffcore::UpdateRule::adam, cfg.learning_rate});

  const auto b = static_cast<Eigen::Index>(cfg.batch);
  Batch x(b, 2);
  Vector y(b);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (Eigen::Index i = 0; i < b; ++i) {
      const std::size_t k = order[rng.index(n_train)];
      x.row(i) = data.points.row(static_cast<Eigen::Index>(k));
      y(i) = data.labels[k] == datasets::Label::forget ? 1.0 : 0.0;
    }
    diffcore::Tape tape;
    diffcore::Var loss = tape.bce_with_logits(net.forward(tape, tape.constant(x)), y);
    tape.backward(loss);
    opt.step(net);
  }

  Batch hx(static_cast<Eigen::Index>(n_holdout), 2);
  std::vector<datasets::Label> hy;
  for (std::size_t i = 0; i < n_holdout; ++i) {
    hx.row(static_cast<Eigen::Index>(i)) = data.points.row(static_cast<Eigen::Index>(order[n_train + i]));
    hy.push_back(data.labels[order[n_train + i]]);
  }
  BinaryClassifier trained(std::move(net), std::string(datasets::to_string(data.name)), cfg.seed, 0.0);
  const double acc = classification_accuracy(trained, hx, hy);
  return BinaryClassifier(trained.net(), trained.dataset(), cfg.seed, acc);
}

}  // namespace cflow::energy
