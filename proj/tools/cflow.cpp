// cflow command-line front end.
//
// Every subcommand accepts --seed, --config and --out. Errors exit nonzero
// with a code per error category (see cflow::exit_code).

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cflow/harness/experiment.hpp"

namespace {

using namespace cflow;
namespace fs = std::filesystem;

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

CLI::App* with_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--config", c.config, "Config file (JSON)");
  sub->add_option("--out", c.out, "Output path");
  return sub;
}

void no_config(const Common& c, const char* cmd) {
  if (!c.config.empty()) fail(ErrorKind::usage, std::string(cmd) + " does not read a --config file");
}

std::string need_out(const Common& c, const char* cmd) {
  if (c.out.empty()) fail(ErrorKind::usage, std::string(cmd) + " needs --out");
  return c.out;
}

flow::TrainConfig train_config(const Common& c) {
  flow::TrainConfig cfg;
  if (!c.config.empty()) cfg = flow::train_config_from_json(harness::read_json_file(c.config));
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

harness::ExperimentSpec experiment(const Common& c, std::optional<harness::Pipeline> force = std::nullopt,
                                   const std::vector<double>& lambdas = {}) {
  if (c.config.empty()) fail(ErrorKind::usage, "an experiment --config file is required");
  nlohmann::json j = harness::read_json_file(c.config);
  if (force) j["pipeline"] = std::string(harness::to_string(*force));
  if (!lambdas.empty()) j["lambdas"] = lambdas;
  harness::ExperimentSpec s = harness::spec_from_json(j);
  if (c.seed) s.train.seed = *c.seed;
  if (!c.out.empty()) s.out = c.out;
  s.validate();
  return s;
}

datasets::Batch dataset_points(const std::string& name, const std::string& subset, std::size_t n,
                               std::uint64_t data_seed, const std::string& csv) {
  if (!csv.empty()) return datasets::read_points_csv(csv);
  if (name.empty()) fail(ErrorKind::usage, "a --dataset or --data source is required");
  const auto ds = datasets::generate(datasets::parse_benchmark(name), n, data_seed);
  if (subset == "full") return ds.points;
  if (subset == "retain") return ds.retain();
  if (subset == "forget") return ds.forget();
  fail(ErrorKind::usage, "--subset must be full, retain or forget");
}

void print_stage_rows(const harness::RunArtifact& art) {
  for (const auto& s : art.stages) {
    std::cout << s.stage << " -> " << s.dir.string() << " (" << s.train_time_s << " s)\n";
    for (const auto& r : s.rows) std::cout << "  " << eval::report_row(r) << "\n";
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Energy-reweighted flow matching for 2D unlearning experiments"};
  app.require_subcommand(1);
  Common c;

  // datasets export
  auto* ds_cmd = app.add_subcommand("datasets", "Synthetic benchmark datasets");
  ds_cmd->require_subcommand(1);
  std::string ds_name;
  std::size_t ds_n = 1000;
  auto* ds_export = with_common(ds_cmd->add_subcommand("export", "Write a labeled dataset as CSV (x,y,label)"), c);
  ds_export->add_option("--name", ds_name, "Benchmark id")->required();
  ds_export->add_option("--n", ds_n, "Number of points");

  // energy eval
  auto* en_cmd = app.add_subcommand("energy", "Energy functions");
  en_cmd->require_subcommand(1);
  std::string en_spec, en_points;
  std::optional<double> en_lambda;
  auto* en_eval = with_common(en_cmd->add_subcommand("eval", "Evaluate F and weights at points (x,y,F,weight)"), c);
  en_eval->add_option("--spec", en_spec, "Energy spec JSON file")->required();
  en_eval->add_option("--points", en_points, "CSV with x,y columns")->required();
  en_eval->add_option("--lambda", en_lambda, "Override the suppression scale");

  // classifier train
  auto* cl_cmd = app.add_subcommand("classifier", "Retain/forget classifiers");
  cl_cmd->require_subcommand(1);
  std::string cl_dataset;
  std::size_t cl_n = 10000, cl_steps = 1500;
  auto* cl_train = with_common(cl_cmd->add_subcommand("train", "Train a classifier checkpoint"), c);
  cl_train->add_option("--dataset", cl_dataset, "Benchmark id")->required();
  cl_train->add_option("--n", cl_n, "Training points");
  cl_train->add_option("--steps", cl_steps, "Optimizer steps");

  // train / unlearn / refit
  std::string tr_dataset, tr_subset = "full", tr_data, tr_base = "gaussian", tr_init, tr_loss, tr_energy;
  std::size_t tr_n = 20000;
  std::uint64_t tr_data_seed = 1;
  std::optional<double> tr_lambda;
  auto add_target = [&](CLI::App* sub) {
    sub->add_option("--dataset", tr_dataset, "Benchmark id for the target set");
    sub->add_option("--subset", tr_subset, "full, retain or forget");
    sub->add_option("--data", tr_data, "Target points from a CSV with x,y columns");
    sub->add_option("--n", tr_n, "Generated dataset size");
    sub->add_option("--data-seed", tr_data_seed, "Seed of the generated dataset");
    sub->add_option("--loss", tr_loss, "Write the loss trace CSV here");
  };
  auto* tr_cmd = with_common(app.add_subcommand("train", "Train a flow (learn, finetune or refit-ot mode)"), c);
  add_target(tr_cmd);
  tr_cmd->add_option("--base", tr_base, "gaussian, or a flow checkpoint whose samples are q0");
  tr_cmd->add_option("--init", tr_init, "Initial velocity field checkpoint (finetune)");
  auto* un_cmd = with_common(app.add_subcommand("unlearn", "Energy-reweighted unlearning from a pretrained flow"), c);
  un_cmd->add_option("--ckpt", tr_base, "Pretrained flow checkpoint")->required();
  un_cmd->add_option("--energy", tr_energy, "Energy spec JSON (default: analytic energy of --dataset)");
  un_cmd->add_option("--dataset", tr_dataset, "Benchmark id for the analytic energy");
  un_cmd->add_option("--lambda", tr_lambda, "Suppression scale");
  un_cmd->add_option("--loss", tr_loss, "Write the loss trace CSV here");
  auto* rf_cmd = with_common(app.add_subcommand("refit", "OT refit from a pretrained flow to a target set"), c);
  add_target(rf_cmd);
  rf_cmd->add_option("--ckpt", tr_base, "Pretrained flow checkpoint")->required();

  // sample / traj
  std::string sm_ckpt;
  std::size_t sm_n = 1000, sm_steps = flow::kDefaultIntegrationSteps, sm_snapshots = 5;
  auto* sm_cmd = with_common(app.add_subcommand("sample", "Draw samples from a flow (x,y)"), c);
  sm_cmd->add_option("--ckpt", sm_ckpt, "Flow checkpoint")->required();
  sm_cmd->add_option("--n", sm_n, "Number of samples");
  sm_cmd->add_option("--steps", sm_steps, "Euler steps");
  auto* tj_cmd = with_common(app.add_subcommand("traj", "Trajectory snapshots (snapshot_index,t,x,y)"), c);
  tj_cmd->add_option("--ckpt", sm_ckpt, "Flow checkpoint")->required();
  tj_cmd->add_option("--n", sm_n, "Number of trajectories");
  tj_cmd->add_option("--steps", sm_steps, "Euler steps");
  tj_cmd->add_option("--snapshots", sm_snapshots, "Snapshots including t=0 and t=1");

  // eval run
  std::string ev_ckpt, ev_dataset, ev_classifier, ev_method = "model";
  std::size_t ev_n = 1000, ev_timing = 5000;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a flow");
  ev_cmd->require_subcommand(1);
  auto* ev_run = with_common(ev_cmd->add_subcommand("run", "Write a report.csv row for a checkpoint"), c);
  ev_run->add_option("--ckpt", ev_ckpt, "Flow checkpoint")->required();
  ev_run->add_option("--dataset", ev_dataset, "Benchmark id")->required();
  ev_run->add_option("--classifier", ev_classifier, "Classifier checkpoint")->required();
  ev_run->add_option("--method", ev_method, "Method label for the report");
  ev_run->add_option("--n", ev_n, "Generated and reference sample count");
  ev_run->add_option("--timing-samples", ev_timing, "Samples for the inference timing");

  // experiment pipelines
  auto* sw_cmd = with_common(app.add_subcommand("sweep", "Run the sweep-lambda pipeline of an experiment"), c);
  std::vector<double> sw_lambdas;
  sw_cmd->add_option("--lambdas", sw_lambdas, "Override the lambda grid");
  auto* iv_cmd = with_common(app.add_subcommand("invert", "Run the inversion pipeline of an experiment"), c);
  auto* rn_cmd = with_common(app.add_subcommand("run", "Run the pipeline named in an experiment config"), c);

  // report
  std::vector<std::string> rp_inputs;
  std::string rp_format = "csv";
  auto* rp_cmd = with_common(app.add_subcommand("report", "Aggregate report.csv files (mean ± std)"), c);
  rp_cmd->add_option("inputs", rp_inputs, "report.csv files or stage directories")->required();
  rp_cmd->add_option("--format", rp_format, "csv or md")->check(CLI::IsMember({"csv", "md"}));

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      app.exit(e);
      return exit_code(ErrorKind::usage);
    }

    if (ds_export->parsed()) {
      no_config(c, "datasets export");
      const auto ds = datasets::generate(datasets::parse_benchmark(ds_name), ds_n, c.seed.value_or(0));
      datasets::write_csv(need_out(c, "datasets export"), ds);
    } else if (en_eval->parsed()) {
      no_config(c, "energy eval");
      const fs::path spec_path = en_spec;
      energy::EnergySpec f = energy::EnergySpec::from_json(harness::read_json_file(spec_path), spec_path.parent_path());
      if (en_lambda) f = f.with_lambda(*en_lambda);
      const auto pts = datasets::read_points_csv(en_points);
      const auto F = f.evaluate(pts);
      const auto w = f.weight(pts);
      std::string text = "x,y,F,weight\n";
      for (Eigen::Index i = 0; i < pts.rows(); ++i)
        text += eval::detail::format_number(pts(i, 0)) + "," + eval::detail::format_number(pts(i, 1)) + "," +
                eval::detail::format_number(F(i)) + "," + eval::detail::format_number(w(i)) + "\n";
      write_text(c.out, text);
    } else if (cl_train->parsed()) {
      no_config(c, "classifier train");
      const std::uint64_t seed = c.seed.value_or(0);
      energy::ClassifierConfig cfg;
      cfg.steps = cl_steps;
      cfg.seed = seed;
      const auto clf = energy::train_classifier(
          datasets::generate(datasets::parse_benchmark(cl_dataset), cl_n, Rng::derive(seed, 101)), cfg);
      clf.save(need_out(c, "classifier train"));
      std::cout << "holdout accuracy " << clf.holdout_accuracy() << "\n";
    } else if (tr_cmd->parsed() || rf_cmd->parsed() || un_cmd->parsed()) {
      const char* cmd = tr_cmd->parsed() ? "train" : rf_cmd->parsed() ? "refit" : "unlearn";
      const std::string out = need_out(c, cmd);
      flow::TrainConfig cfg = train_config(c);
      datasets::BaseSampler q0 = datasets::BaseSampler::gaussian(2);
      std::shared_ptr<const flow::FlowModel> pre;
      if (tr_base != "gaussian") {
        pre = std::make_shared<const flow::FlowModel>(flow::FlowModel::load(tr_base));
        q0 = datasets::BaseSampler::model(pre, 2);
      }
      std::optional<diffcore::VelocityField> init;
      flow::TrainTarget target = datasets::Batch();
      if (un_cmd->parsed()) {
        cfg.mode = flow::TrainMode::unlearn_erfm;
        if (tr_lambda) cfg.lambda = *tr_lambda;
        if (!tr_energy.empty()) {
          const fs::path p = tr_energy;
          target = energy::EnergySpec::from_json(harness::read_json_file(p), p.parent_path());
        } else if (!tr_dataset.empty()) {
          target = energy::EnergySpec::analytic(datasets::parse_benchmark(tr_dataset));
        } else {
          fail(ErrorKind::usage, "unlearn needs --energy or --dataset");
        }
      } else {
        if (rf_cmd->parsed()) cfg.mode = flow::TrainMode::refit_ot;
        if (tr_cmd->parsed() && cfg.mode == flow::TrainMode::unlearn_erfm)
          fail(ErrorKind::usage, "use the unlearn subcommand for unlearn-erfm training");
        if (!tr_init.empty()) init = flow::FlowModel::load(tr_init).field();
        target = dataset_points(tr_dataset, tr_subset, tr_n, tr_data_seed, tr_data);
      }
      const auto result = flow::train(cfg, q0, target, init);
      result.model.save(out);
      if (!tr_loss.empty()) harness::write_loss_csv(tr_loss, result.trace);
      std::cout << cmd << ": " << result.trace.size() << " steps in " << result.seconds << " s";
      if (!result.trace.empty()) std::cout << ", final loss " << result.trace.back().loss;
      std::cout << "\n";
    } else if (sm_cmd->parsed()) {
      no_config(c, "sample");
      const auto model = flow::FlowModel::load(sm_ckpt);
      datasets::write_points_csv(need_out(c, "sample"), model.sample(sm_n, sm_steps, c.seed.value_or(0)));
    } else if (tj_cmd->parsed()) {
      no_config(c, "traj");
      const auto model = flow::FlowModel::load(sm_ckpt);
      Rng rng(c.seed.value_or(0));
      const auto x0 = model.base().sample(sm_n, rng);
      harness::write_trajectory_csv(need_out(c, "traj"), model.trajectory(x0, sm_steps, sm_snapshots));
    } else if (ev_run->parsed()) {
      no_config(c, "eval run");
      const auto model = flow::FlowModel::load(ev_ckpt);
      const auto clf = std::make_shared<const energy::BinaryClassifier>(energy::BinaryClassifier::load(ev_classifier));
      harness::EvalOptions opt{ev_n, ev_timing, 3};
      const auto rows = harness::evaluate_model(model, datasets::parse_benchmark(ev_dataset), ev_method, std::nullopt,
                                                std::nullopt, {c.seed.value_or(0)}, opt,
                                                [&](std::uint64_t) { return clf; });
      eval::write_report_csv(need_out(c, "eval run"), rows);
      for (const auto& r : rows) std::cout << eval::report_row(r) << "\n";
    } else if (sw_cmd->parsed()) {
      print_stage_rows(harness::run(experiment(c, harness::Pipeline::sweep_lambda, sw_lambdas)));
    } else if (iv_cmd->parsed()) {
      print_stage_rows(harness::run(experiment(c, harness::Pipeline::invert)));
    } else if (rn_cmd->parsed()) {
      print_stage_rows(harness::run(experiment(c)));
    } else if (rp_cmd->parsed()) {
      no_config(c, "report");
      std::vector<eval::MetricsReport> rows;
      for (const auto& in : rp_inputs) {
        fs::path p = in;
        if (fs::is_directory(p)) p /= "report.csv";
        const auto r = eval::read_report_csv(p);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      const auto table = eval::aggregate(rows);
      write_text(c.out, rp_format == "md" ? eval::summary_markdown(table) : eval::summary_csv(table));
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "cflow: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "cflow: " << e.what() << "\n";
    return 1;
  }
}
