#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cflow/eval/report.hpp"
#include "cflow/flow/train.hpp"
#include "cflow/harness/plot.hpp"

namespace cflow::harness {

namespace fs = std::filesystem;
using datasets::BaseSampler;
using flow::FlowModel;

enum class Pipeline { learn, unlearn_erfm, refit_ot, finetune, retrain, sweep_lambda, invert };

inline constexpr std::array<Pipeline, 7> kAllPipelines{Pipeline::learn,    Pipeline::unlearn_erfm, Pipeline::refit_ot,
                                                       Pipeline::finetune, Pipeline::retrain,      Pipeline::sweep_lambda,
                                                       Pipeline::invert};

inline std::string_view to_string(Pipeline p) {
  switch (p) {
    case Pipeline::learn: return "learn";
    case Pipeline::unlearn_erfm: return "unlearn-erfm";
    case Pipeline::refit_ot: return "refit-ot";
    case Pipeline::finetune: return "finetune";
    case Pipeline::retrain: return "retrain";
    case Pipeline::sweep_lambda: return "sweep-lambda";
    case Pipeline::invert: return "invert";
  }
  return "unknown";
}

inline Pipeline parse_pipeline(std::string_view s) {
  for (Pipeline p : kAllPipelines)
    if (to_string(p) == s) return p;
  fail(ErrorKind::config, "unknown pipeline '" + std::string(s) + "'");
}

/// Where the energy of unlearn-style stages comes from.
enum class EnergySource { analytic, classifier };
/// What q0 is for unlearn-erfm: samples of the learned model, or D_full itself.
enum class UnlearnSource { model, data };

/// One experiment: a benchmark, the pipeline to run on it, and everything
/// needed to reproduce it. Serialised as JSON; unknown keys are errors.
struct ExperimentSpec {
  std::string name = "experiment";
  datasets::Benchmark benchmark = datasets::Benchmark::circles;
  Pipeline pipeline = Pipeline::learn;
  flow::TrainConfig train;
  EnergySource energy = EnergySource::analytic;
  UnlearnSource unlearn_source = UnlearnSource::model;
  std::vector<std::uint64_t> eval_seeds{0, 1, 2};
  /// Only for sweep-lambda.
  std::vector<double> lambdas;
  fs::path out = "runs";
  std::size_t data_n = 20000;
  std::uint64_t data_seed = 1;
  std::size_t eval_n = 1000;
  std::size_t classifier_n = 10000;
  std::size_t classifier_steps = 1500;
  std::size_t timing_samples = 5000;
  std::size_t timing_repeats = 3;
  std::size_t snapshots = 5;
  std::size_t traj_points = 1000;
  bool svg = false;

  fs::path run_dir() const { return out / name; }
  fs::path stage_dir(const std::string& stage) const { return run_dir() / stage; }

  void validate() const {
    if (name.empty() || name.find_first_of("/\\") != std::string::npos || name == "." || name == "..")
      fail(ErrorKind::config, "experiment name must be a plain directory name");
    train.validate();
    if (eval_seeds.empty()) fail(ErrorKind::config, "at least one evaluation seed is required");
    if (pipeline == Pipeline::sweep_lambda) {
      if (lambdas.empty()) fail(ErrorKind::config, "sweep-lambda needs a lambda grid");
      for (double l : lambdas)
        if (!(l > 0.0) || !std::isfinite(l)) fail(ErrorKind::config, "sweep lambdas must be positive and finite");
    } else if (!lambdas.empty()) {
      fail(ErrorKind::config, "a lambda grid is only valid for the sweep-lambda pipeline");
    }
    if (data_n < 2 || eval_n < 1 || classifier_n < 2 || classifier_steps < 1)
      fail(ErrorKind::config, "dataset, evaluation and classifier sizes must be positive");
    if (timing_samples < 1 || timing_repeats < 1) fail(ErrorKind::config, "timing needs samples and repeats");
    if (snapshots < 2 || snapshots > train.n_steps + 1)
      fail(ErrorKind::config, "snapshots must lie in [2, n_steps + 1]");
    if (traj_points < 1) fail(ErrorKind::config, "traj_points must be positive");
  }

  nlohmann::json to_json() const {
    return {{"name", name},
            {"benchmark", datasets::to_string(benchmark)},
            {"pipeline", to_string(pipeline)},
            {"train", flow::to_json(train)},
            {"energy", energy == EnergySource::analytic ? "analytic" : "classifier"},
            {"unlearn_source", unlearn_source == UnlearnSource::model ? "model" : "data"},
            {"eval_seeds", eval_seeds},
            {"lambdas", lambdas},
            {"out", out.generic_string()},
            {"data_n", data_n},
            {"data_seed", data_seed},
            {"eval_n", eval_n},
            {"classifier_n", classifier_n},
            {"classifier_steps", classifier_steps},
            {"timing_samples", timing_samples},
            {"timing_repeats", timing_repeats},
            {"snapshots", snapshots},
            {"traj_points", traj_points},
            {"svg", svg}};
  }
};

inline ExperimentSpec spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::config, "experiment config must be an object");
  ExperimentSpec s;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "name") s.name = v.get<std::string>();
      else if (key == "benchmark") s.benchmark = datasets::parse_benchmark(v.get<std::string>());
      else if (key == "pipeline") s.pipeline = parse_pipeline(v.get<std::string>());
      else if (key == "train") s.train = flow::train_config_from_json(v);
      else if (key == "energy") {
        const auto e = v.get<std::string>();
        if (e == "analytic") s.energy = EnergySource::analytic;
        else if (e == "classifier") s.energy = EnergySource::classifier;
        else fail(ErrorKind::config, "energy must be analytic or classifier, got '" + e + "'");
      } else if (key == "unlearn_source") {
        const auto u = v.get<std::string>();
        if (u == "model") s.unlearn_source = UnlearnSource::model;
        else if (u == "data") s.unlearn_source = UnlearnSource::data;
        else fail(ErrorKind::config, "unlearn_source must be model or data, got '" + u + "'");
      } else if (key == "eval_seeds") s.eval_seeds = v.get<std::vector<std::uint64_t>>();
      else if (key == "lambdas") s.lambdas = v.get<std::vector<double>>();
      else if (key == "out") s.out = v.get<std::string>();
      else if (key == "data_n") s.data_n = v.get<std::size_t>();
      else if (key == "data_seed") s.data_seed = v.get<std::uint64_t>();
      else if (key == "eval_n") s.eval_n = v.get<std::size_t>();
      else if (key == "classifier_n") s.classifier_n = v.get<std::size_t>();
      else if (key == "classifier_steps") s.classifier_steps = v.get<std::size_t>();
      else if (key == "timing_samples") s.timing_samples = v.get<std::size_t>();
      else if (key == "timing_repeats") s.timing_repeats = v.get<std::size_t>();
      else if (key == "snapshots") s.snapshots = v.get<std::size_t>();
      else if (key == "traj_points") s.traj_points = v.get<std::size_t>();
      else if (key == "svg") s.svg = v.get<bool>();
      else fail(ErrorKind::config, "unknown experiment key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("experiment config: ") + e.what());
  }
  s.validate();
  return s;
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, path.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) fail(ErrorKind::io, "failed writing " + path.string());
}

inline ExperimentSpec load_spec(const fs::path& path) { return spec_from_json(read_json_file(path)); }

/// 64-bit FNV-1a over the compact JSON dump (keys are sorted by nlohmann::json).
inline std::uint64_t config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// What one stage left on disk.
struct StageArtifact {
  std::string stage;
  fs::path dir;
  nlohmann::json config;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  fs::path checkpoint;
  double train_time_s = 0.0;
  std::size_t resampled_batches = 0;
  std::vector<eval::MetricsReport> rows;
};

struct RunArtifact {
  ExperimentSpec spec;
  std::vector<StageArtifact> stages;

  std::vector<eval::MetricsReport> rows() const {
    std::vector<eval::MetricsReport> all;
    for (const auto& s : stages) all.insert(all.end(), s.rows.begin(), s.rows.end());
    return all;
  }
};

// Seed streams for everything the harness draws besides training itself.
namespace streams {
inline constexpr std::uint64_t classifier_data = 101;
inline constexpr std::uint64_t classifier_init = 102;
inline constexpr std::uint64_t heldout = 103;
inline constexpr std::uint64_t samples = 104;
inline constexpr std::uint64_t trajectory = 105;
inline constexpr std::uint64_t timing = 106;
inline constexpr std::uint64_t energy_classifier = 107;
}  // namespace streams

inline fs::path classifier_cache_path(const fs::path& dir, datasets::Benchmark b, std::size_t n, std::size_t steps,
                                      std::uint64_t seed, std::uint64_t data_seed) {
  const nlohmann::json key{{"benchmark", datasets::to_string(b)}, {"n", n},
                           {"steps", steps}, {"seed", seed}, {"data_seed", data_seed}};
  return dir / ("classifier-" + std::string(datasets::to_string(b)) + "-" + hex(config_hash(key)) + ".ckpt");
}

/// Trains (or loads a cached) classifier. The cache file name encodes
/// everything that determines the weights.
inline std::shared_ptr<const energy::BinaryClassifier> cached_classifier(const fs::path& path,
                                                                          datasets::Benchmark b, std::size_t n,
                                                                          std::size_t steps, std::uint64_t seed,
                                                                          std::uint64_t data_seed) {
  if (fs::exists(path)) return std::make_shared<const energy::BinaryClassifier>(energy::BinaryClassifier::load(path));
  energy::ClassifierConfig cfg;
  cfg.steps = steps;
  cfg.seed = seed;
  auto c = std::make_shared<const energy::BinaryClassifier>(
      energy::train_classifier(datasets::generate(b, n, data_seed), cfg));
  c->save(path);
  return c;
}

/// Evaluation classifier for one evaluation seed, shared across stages.
inline std::shared_ptr<const energy::BinaryClassifier> eval_classifier(const ExperimentSpec& spec, std::uint64_t seed) {
  const std::uint64_t init = Rng::derive(seed, streams::classifier_init);
  const std::uint64_t data = Rng::derive(seed, streams::classifier_data);
  const fs::path path = classifier_cache_path(spec.run_dir() / "classifiers", spec.benchmark, spec.classifier_n,
                                              spec.classifier_steps, init, data);
  return cached_classifier(path, spec.benchmark, spec.classifier_n, spec.classifier_steps, init, data);
}

/// Held-out real retain points for one evaluation seed.
inline Batch heldout_retain(datasets::Benchmark b, std::size_t n, std::uint64_t seed) {
  const auto held = datasets::generate(b, 4 * n + 64, Rng::derive(seed, streams::heldout));
  Batch retain = held.retain();
  if (static_cast<std::size_t>(retain.rows()) < n) fail(ErrorKind::state, "too few held-out retain points");
  return retain.topRows(static_cast<Eigen::Index>(n));
}

struct EvalOptions {
  std::size_t eval_n = 1000;
  std::size_t timing_samples = 5000;
  std::size_t timing_repeats = 3;
};

/// Metric rows for a model, one per evaluation seed. Inference timing is
/// measured once and shared by the rows.
inline std::vector<eval::MetricsReport> evaluate_model(
    const FlowModel& model, datasets::Benchmark b, const std::string& method, std::optional<double> lambda,
    std::optional<double> train_time_s, const std::vector<std::uint64_t>& seeds, const EvalOptions& opt,
    const std::function<std::shared_ptr<const energy::BinaryClassifier>(std::uint64_t)>& classifier_for) {
  const eval::TimingStats timing =
      eval::inference_ms_per_sample(model, opt.timing_samples, flow::kDefaultIntegrationSteps, opt.timing_repeats,
                                    Rng::derive(seeds.front(), streams::timing));
  std::vector<eval::MetricsReport> rows;
  for (std::uint64_t s : seeds) {
    const auto clf = classifier_for(s);
    const Batch ref = heldout_retain(b, opt.eval_n, s);
    const Batch gen = model.sample(opt.eval_n, model.n_steps(), Rng::derive(s, streams::samples));
    eval::MetricsReport r;
    r.dataset = std::string(datasets::to_string(b));
    r.method = method;
    r.seed = s;
    r.lambda = lambda;
    r.mmd_retain = eval::mmd2(gen, ref);
    r.retention_accuracy = eval::retention_accuracy(*clf, ref);
    r.forget_rate = eval::forget_rate(*clf, gen);
    r.leakage = eval::leakage(*clf, gen);
    r.train_time_s = train_time_s;
    r.inference_ms_per_sample = timing.mean;
    r.inference_ms_std = timing.stddev;
    r.validate();
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_loss_csv(const fs::path& path, const std::vector<flow::StepRecord>& trace) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << "step,loss,weight_sum,coupling_cost,independent_cost\n";
  for (const auto& r : trace)
    out << r.step << ',' << eval::detail::format_number(r.loss) << ','
        << (std::isnan(r.weight_sum) ? std::string("NA") : eval::detail::format_number(r.weight_sum)) << ','
        << eval::detail::format_number(r.coupling_cost) << ',' << eval::detail::format_number(r.independent_cost)
        << '\n';
  if (!out) fail(ErrorKind::io, "failed writing " + path.string());
}

/// Runs experiment pipelines and writes their artifacts under
/// <out>/<name>/<stage>/.
class Runner {
 public:
  explicit Runner(ExperimentSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    spec_json_ = spec_.to_json();
    hash_ = config_hash(spec_json_);
  }

  const ExperimentSpec& spec() const { return spec_; }

  RunArtifact run() {
    RunArtifact art{spec_, {}};
    const std::string method(to_string(spec_.pipeline));
    const double lambda = spec_.train.lambda;
    switch (spec_.pipeline) {
      case Pipeline::learn:
        art.stages.push_back(stage(method, flow::TrainMode::learn, BaseSampler::gaussian(2), full().points, {},
                                   spec_.train, std::nullopt));
        break;
      case Pipeline::retrain:
        art.stages.push_back(stage(method, flow::TrainMode::learn, BaseSampler::gaussian(2), full().retain(), {},
                                   spec_.train, std::nullopt));
        break;
      case Pipeline::finetune: {
        auto pre = require_stage("learn");
        flow::TrainConfig cfg = spec_.train;
        cfg.steps = std::max<std::size_t>(1, spec_.train.steps / 5);
        art.stages.push_back(stage(method, flow::TrainMode::finetune, pre->base(), full().retain(), pre->field(), cfg,
                                   std::nullopt));
        break;
      }
      case Pipeline::unlearn_erfm: {
        auto pre = require_stage("learn");
        art.stages.push_back(stage(method, flow::TrainMode::unlearn_erfm, unlearn_q0(pre), energy(lambda), {},
                                   spec_.train, lambda));
        break;
      }
      case Pipeline::refit_ot: {
        auto pre = require_stage("learn");
        art.stages.push_back(stage(method, flow::TrainMode::refit_ot, BaseSampler::model(pre, 2), full().retain(), {},
                                   spec_.train, std::nullopt));
        break;
      }
      case Pipeline::sweep_lambda: {
        auto pre = require_stage("learn");
        const BaseSampler q0 = unlearn_q0(pre);
        std::vector<eval::MetricsReport> all;
        for (double l : spec_.lambdas) {
          flow::TrainConfig cfg = spec_.train;
          cfg.lambda = l;
          StageArtifact a = stage(method + "/lambda-" + eval::detail::format_number(l), flow::TrainMode::unlearn_erfm,
                                  q0, energy(l), {}, cfg, l, "unlearn-erfm");
          all.insert(all.end(), a.rows.begin(), a.rows.end());
          art.stages.push_back(std::move(a));
        }
        eval::write_report_csv(spec_.stage_dir(method) / "report.csv", all);
        break;
      }
      case Pipeline::invert: {
        auto unlearned = require_stage("unlearn-erfm");
        art.stages.push_back(stage(method, flow::TrainMode::unlearn_erfm, BaseSampler::model(unlearned, 2),
                                   energy(lambda).inverted(), {}, spec_.train, lambda));
        break;
      }
    }
    return art;
  }

 private:
  const datasets::LabeledDataset& full() {
    if (!full_) full_ = datasets::generate(spec_.benchmark, spec_.data_n, spec_.data_seed);
    return *full_;
  }

  std::shared_ptr<const FlowModel> require_stage(const std::string& prior) const {
    const fs::path ckpt = spec_.stage_dir(prior) / "model.ckpt";
    if (!fs::exists(ckpt))
      fail(ErrorKind::dependency, std::string(to_string(spec_.pipeline)) + " needs the checkpoint of the '" + prior +
                                      "' stage at " + ckpt.string() + "; run the " + prior + " pipeline first");
    return std::make_shared<const FlowModel>(FlowModel::load(ckpt));
  }

  BaseSampler unlearn_q0(const std::shared_ptr<const FlowModel>& pre) {
    if (spec_.unlearn_source == UnlearnSource::data) return BaseSampler::empirical(full().points);
    return BaseSampler::model(pre, 2);
  }

  energy::EnergySpec energy(double lambda) {
    if (spec_.energy == EnergySource::analytic) return energy::EnergySpec::analytic(spec_.benchmark, lambda);
    const std::uint64_t init = Rng::derive(spec_.train.seed, streams::energy_classifier);
    const fs::path path = classifier_cache_path(spec_.run_dir() / "energy", spec_.benchmark, spec_.data_n,
                                                spec_.classifier_steps, init, spec_.data_seed);
    auto c = cached_classifier(path, spec_.benchmark, spec_.data_n, spec_.classifier_steps, init, spec_.data_seed);
    return energy::EnergySpec::from_classifier(std::move(c), lambda, path.string());
  }

  StageArtifact stage(const std::string& stage_name, flow::TrainMode mode, const BaseSampler& q0,
                      const flow::TrainTarget& target, const std::optional<diffcore::VelocityField>& init,
                      flow::TrainConfig cfg, std::optional<double> lambda, std::string method = {}) {
    if (method.empty()) method = stage_name;
    cfg.mode = mode;
    const fs::path dir = spec_.stage_dir(stage_name);
    fs::create_directories(dir);
    flow::TrainResult result = flow::train(cfg, q0, target, init);

    nlohmann::json provenance{{"train", flow::to_json(cfg)},
                              {"experiment_hash", hex(hash_)},
                              {"stage", stage_name},
                              {"seed", cfg.seed}};
    FlowModel model(result.model.field(), result.model.base(), result.model.n_steps(), provenance);

    StageArtifact a;
    a.stage = stage_name;
    a.dir = dir;
    a.config = spec_json_;
    a.config_hash = hash_;
    a.seed = cfg.seed;
    a.checkpoint = dir / "model.ckpt";
    a.train_time_s = result.seconds;
    a.resampled_batches = result.resampled_batches;

    write_json_file(dir / "config.json", spec_json_);
    model.save(a.checkpoint);
    write_loss_csv(dir / "loss.csv", result.trace);

    Rng traj_rng(Rng::derive(cfg.seed, streams::trajectory));
    const Batch x0 = model.base().sample(spec_.traj_points, traj_rng);
    write_trajectory_csv(dir / "traj.csv", model.trajectory(x0, model.n_steps(), spec_.snapshots));

    const EvalOptions opt{spec_.eval_n, spec_.timing_samples, spec_.timing_repeats};
    a.rows = evaluate_model(model, spec_.benchmark, method, lambda, result.seconds, spec_.eval_seeds, opt,
                            [this](std::uint64_t s) { return eval_classifier(spec_, s); });
    eval::write_report_csv(dir / "report.csv", a.rows);

    write_json_file(dir / "artifact.json", {{"stage", stage_name},
                                            {"method", method},
                                            {"seed", cfg.seed},
                                            {"config_hash", hex(hash_)},
                                            {"train", flow::to_json(cfg)},
                                            {"checkpoint", "model.ckpt"},
                                            {"train_time_s", result.seconds},
                                            {"resampled_batches", result.resampled_batches}});
    if (spec_.svg) {
      const Batch gen = model.sample(spec_.eval_n, model.n_steps(), Rng::derive(spec_.eval_seeds.front(), streams::samples));
      write_scatter_svg(dir / "samples.svg",
                        {{heldout_retain(spec_.benchmark, spec_.eval_n, spec_.eval_seeds.front()), "#999999"},
                         {gen, "#1f77b4"}},
                        std::string(datasets::to_string(spec_.benchmark)) + " / " + stage_name);
    }
    return a;
  }

  ExperimentSpec spec_;
  nlohmann::json spec_json_;
  std::uint64_t hash_ = 0;
  std::optional<datasets::LabeledDataset> full_;
};

inline RunArtifact run(const ExperimentSpec& spec) { return Runner(spec).run(); }

/// Runs the inversion pipeline: retrain from the unlearned model's samples
/// with the inverted energy. The result's rows are tagged `invert`.
inline RunArtifact invert_experiment(ExperimentSpec spec) {
  spec.pipeline = Pipeline::invert;
  return run(spec);
}

/// Consolidated table over artifacts.
inline std::vector<eval::SummaryRow> report(const std::vector<RunArtifact>& artifacts) {
  if (artifacts.empty()) fail(ErrorKind::precondition, "report needs at least one artifact");
  std::vector<eval::MetricsReport> rows;
  for (const auto& a : artifacts) {
    const auto r = a.rows();
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return eval::aggregate(rows);
}

}  // namespace cflow::harness
