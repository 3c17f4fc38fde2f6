#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cflow/diffcore/optimizer.hpp"
#include "cflow/flow/losses.hpp"
#include "cflow/flow/model.hpp"

namespace cflow::flow {

enum class TrainMode { learn, unlearn_erfm, refit_ot, finetune };

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::learn: return "learn";
    case TrainMode::unlearn_erfm: return "unlearn-erfm";
    case TrainMode::refit_ot: return "refit-ot";
    case TrainMode::finetune: return "finetune";
  }
  return "unknown";
}

inline TrainMode parse_train_mode(std::string_view s) {
  for (TrainMode m : {TrainMode::learn, TrainMode::unlearn_erfm, TrainMode::refit_ot, TrainMode::finetune})
    if (to_string(m) == s) return m;
  fail(ErrorKind::config, "unknown training mode '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 256;
  double learning_rate = 1e-3;
  double lambda = energy::kDefaultLambda;
  double sigma = 0.0;
  CouplingPlan coupling = CouplingPlan::independent;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::learn;
  std::vector<std::size_t> hidden = diffcore::default_hidden();
  std::size_t n_steps = kDefaultIntegrationSteps;
  /// When q0 is a model, draw this many samples once and resample them
  /// uniformly each step (0 draws fresh model samples every step).
  std::size_t q0_pool = 50000;

  void validate() const {
    if (batch < 1) fail(ErrorKind::precondition, "batch size must be at least 1");
    if (!(learning_rate > 0.0)) fail(ErrorKind::precondition, "learning rate must be positive");
    if (!(sigma >= 0.0)) fail(ErrorKind::precondition, "interpolation noise must be non-negative");
    if (mode == TrainMode::unlearn_erfm && !(lambda > 0.0))
      fail(ErrorKind::precondition, "lambda must be positive for unlearning");
    if (n_steps < 1) fail(ErrorKind::precondition, "integration steps must be at least 1");
  }
};

/// A target point set (learn, finetune, refit-ot) or an energy (unlearn-erfm).
using TrainTarget = std::variant<Batch, energy::EnergySpec>;

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  /// Raw sum of suppression weights (NaN outside unlearn-erfm).
  double weight_sum = std::numeric_limits<double>::quiet_NaN();
  /// Transport cost of the pairing used, and of the unpermuted pairing of the same draws.
  double coupling_cost = 0.0;
  double independent_cost = 0.0;
};

struct TrainResult {
  FlowModel model;
  std::vector<StepRecord> trace;
  double seconds = 0.0;
  std::size_t resampled_batches = 0;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},   {"batch", c.batch},   {"learning_rate", c.learning_rate},
          {"lambda", c.lambda}, {"sigma", c.sigma},   {"coupling", to_string(c.coupling)},
          {"seed", c.seed},     {"mode", to_string(c.mode)}, {"hidden", c.hidden},
          {"n_steps", c.n_steps}, {"q0_pool", c.q0_pool}};
}

/// Parses a TrainConfig; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  if (!j.is_object()) fail(ErrorKind::config, "train config must be an object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "steps") c.steps = value.get<std::size_t>();
      else if (key == "batch") c.batch = value.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "lambda") c.lambda = value.get<double>();
      else if (key == "sigma") c.sigma = value.get<double>();
      else if (key == "coupling") c.coupling = parse_coupling(value.get<std::string>());
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "mode") c.mode = parse_train_mode(value.get<std::string>());
      else if (key == "hidden") c.hidden = value.get<std::vector<std::size_t>>();
      else if (key == "n_steps") c.n_steps = value.get<std::size_t>();
      else if (key == "q0_pool") c.q0_pool = value.get<std::size_t>();
      else fail(ErrorKind::config, "unknown train config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("train config: ") + e.what());
  }
  return c;
}

/// The weighted flow-matching training loop.
///
/// Each step draws B source points from q0 and B targets (from the target set,
/// or again from q0 in unlearn-erfm mode), pairs them (independently, or by
/// exact minibatch OT), draws one uniform time per pair, and takes one
/// optimizer step on the CFM loss or the normalised ERFM loss. A batch whose
/// suppression weights all vanish is redrawn. The result's base is q0, so
/// sampling it composes with whatever produced q0.
inline TrainResult train(const TrainConfig& cfg, const BaseSampler& q0, const TrainTarget& target,
                         const std::optional<diffcore::VelocityField>& init = std::nullopt) {
  cfg.validate();
  const bool wants_energy = cfg.mode == TrainMode::unlearn_erfm;
  if (wants_energy != std::holds_alternative<energy::EnergySpec>(target))
    fail(ErrorKind::precondition, std::string("training mode ") + std::string(to_string(cfg.mode)) +
                                      (wants_energy ? " needs an energy target" : " needs a point-set target"));
  if (cfg.mode == TrainMode::finetune && !init)
    fail(ErrorKind::precondition, "finetune needs an initial velocity field");
  const std::size_t dim = q0.dim();
  if (const Batch* pts = std::get_if<Batch>(&target)) {
    if (pts->rows() < 1) fail(ErrorKind::precondition, "empty training target");
    if (static_cast<std::size_t>(pts->cols()) != dim) fail(ErrorKind::shape, "target and source dimensions differ");
  }

  const auto start = std::chrono::steady_clock::now();
  Rng init_rng(Rng::derive(cfg.seed, 1));
  Rng rng(Rng::derive(cfg.seed, 2));
  diffcore::VelocityField field = init ? *init : diffcore::VelocityField(dim, cfg.hidden, init_rng);
  if (field.dim() != dim) fail(ErrorKind::shape, "initial field dimension does not match q0");

  BaseSampler source = q0;
  if (q0.kind() == BaseSampler::Kind::model && cfg.q0_pool > 0) {
    Rng pool_rng(Rng::derive(cfg.seed, 3));
    source = BaseSampler::empirical(q0.sample(cfg.q0_pool, pool_rng));
  }
  const BaseSampler target_sampler =
      wants_energy ? source : BaseSampler::empirical(std::get<Batch>(target));
  std::optional<energy::EnergySpec> energy_fn;
  if (wants_energy) energy_fn = std::get<energy::EnergySpec>(target).with_lambda(cfg.lambda);
  const CouplingPlan plan = cfg.mode == TrainMode::refit_ot ? CouplingPlan::ot : cfg.coupling;

  diffcore::Optimizer opt({diffcore::UpdateRule::adam, cfg.learning_rate});
  std::vector<StepRecord> trace;
  trace.reserve(cfg.steps);
  std::size_t resampled = 0;
  constexpr std::size_t kMaxRedraws = 1000;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t attempt = 0;; ++attempt) {
      Batch x0 = source.sample(cfg.batch, rng);
      Batch x1 = target_sampler.sample(cfg.batch, rng);
      const double independent = pairing_cost(x0, x1);
      Coupling coupling = make_coupling(plan, std::move(x0), std::move(x1));
      const Vector t = rng.uniform_vector(static_cast<Eigen::Index>(cfg.batch));
      const RegressionBatch batch = make_regression_batch(coupling, t, cfg.sigma, rng);

      StepRecord rec;
      rec.step = step;
      rec.coupling_cost = coupling.cost;
      rec.independent_cost = independent;
      diffcore::Tape tape;
      std::optional<Var> loss;
      if (energy_fn) {
        try {
          loss = erfm_objective(tape, field, batch, *energy_fn);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::suppressed || attempt + 1 >= kMaxRedraws) throw;
          ++resampled;
          continue;
        }
        rec.weight_sum = energy_fn->weight(batch.x1).sum();
      } else {
        loss = cfm_objective(tape, field, batch);
      }
      rec.loss = tape.value(*loss)(0, 0);
      tape.backward(*loss);
      opt.step(field.net());
      trace.push_back(rec);
      break;
    }
  }

  nlohmann::json provenance = to_json(cfg);
  TrainResult result{FlowModel(std::move(field), q0, cfg.n_steps, std::move(provenance)), std::move(trace), 0.0,
                     resampled};
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace cflow::flow
