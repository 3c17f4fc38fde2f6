#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "cflow/harness/experiment.hpp"
#include "helpers.hpp"

namespace {

using namespace cflow;
using namespace cflow::harness;
using cflow::testing::expect_error;
using cflow::testing::TempDir;

ExperimentSpec tiny_spec(const fs::path& out, Pipeline p = Pipeline::learn) {
  ExperimentSpec s;
  s.name = "tiny";
  s.benchmark = datasets::Benchmark::circles;
  s.pipeline = p;
  s.out = out;
  s.train.steps = 30;
  s.train.batch = 32;
  s.train.hidden = {16, 16};
  s.train.q0_pool = 2000;
  s.train.seed = 3;
  s.eval_seeds = {0, 1};
  s.data_n = 2000;
  s.eval_n = 200;
  s.classifier_n = 1000;
  s.classifier_steps = 50;
  s.timing_samples = 100;
  s.timing_repeats = 2;
  s.traj_points = 40;
  s.snapshots = 3;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Report rows with the timing columns blanked.
std::vector<std::string> untimed(const std::vector<eval::MetricsReport>& rows) {
  std::vector<std::string> out;
  for (auto r : rows) {
    r.train_time_s.reset();
    r.inference_ms_per_sample.reset();
    r.inference_ms_std.reset();
    out.push_back(eval::report_row(r));
  }
  return out;
}

TEST(Pipeline, NamesRoundTrip) {
  for (Pipeline p : kAllPipelines) EXPECT_EQ(parse_pipeline(to_string(p)), p);
  expect_error(ErrorKind::config, [] { (void)parse_pipeline("distill"); });
}

TEST(Spec, JsonRoundTrip) {
  ExperimentSpec s = tiny_spec("runs", Pipeline::sweep_lambda);
  s.lambdas = {0.5, 2, 5, 1000};
  s.energy = EnergySource::classifier;
  s.svg = true;
  const ExperimentSpec back = spec_from_json(s.to_json());
  EXPECT_EQ(back.to_json(), s.to_json());
  EXPECT_EQ(config_hash(back.to_json()), config_hash(s.to_json()));
}

TEST(Spec, UnknownKeysAreErrors) {
  nlohmann::json j = tiny_spec("runs").to_json();
  j["learning_rate"] = 0.1;
  expect_error(ErrorKind::config, [&] { (void)spec_from_json(j); });
  j = tiny_spec("runs").to_json();
  j["train"]["warmup"] = 3;
  expect_error(ErrorKind::config, [&] { (void)spec_from_json(j); });
  j = tiny_spec("runs").to_json();
  j["energy"] = "oracle";
  expect_error(ErrorKind::config, [&] { (void)spec_from_json(j); });
  expect_error(ErrorKind::config, [] { (void)spec_from_json(nlohmann::json::array()); });
}

TEST(Spec, LambdaGridConsistency) {
  ExperimentSpec s = tiny_spec("runs", Pipeline::sweep_lambda);
  expect_error(ErrorKind::config, [&] { s.validate(); });
  s.lambdas = {1.0, -2.0};
  expect_error(ErrorKind::config, [&] { s.validate(); });
  s.lambdas = {1.0, 2.0};
  s.validate();
  s.pipeline = Pipeline::learn;
  expect_error(ErrorKind::config, [&] { s.validate(); });
}

TEST(Spec, OtherValidation) {
  ExperimentSpec s = tiny_spec("runs");
  s.name = "../escape";
  expect_error(ErrorKind::config, [&] { s.validate(); });
  s = tiny_spec("runs");
  s.snapshots = 20;
  expect_error(ErrorKind::config, [&] { s.validate(); });
  s = tiny_spec("runs");
  s.eval_seeds.clear();
  expect_error(ErrorKind::config, [&] { s.validate(); });
}

TEST(Run, MissingDependencyNamesStage) {
  TempDir dir("dep");
  for (Pipeline p : {Pipeline::unlearn_erfm, Pipeline::refit_ot, Pipeline::finetune, Pipeline::sweep_lambda}) {
    ExperimentSpec s = tiny_spec(dir.path(), p);
    if (p == Pipeline::sweep_lambda) s.lambdas = {1.0};
    try {
      (void)run(s);
      ADD_FAILURE() << "expected a dependency error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::dependency);
      EXPECT_NE(std::string(e.what()).find("'learn' stage"), std::string::npos) << e.what();
    }
  }
  try {
    (void)invert_experiment(tiny_spec(dir.path()));
    ADD_FAILURE() << "expected a dependency error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dependency);
    EXPECT_NE(std::string(e.what()).find("'unlearn-erfm' stage"), std::string::npos) << e.what();
  }
}

class TinyPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("pipeline");
    learn_ = new RunArtifact(run(tiny_spec(dir_->path(), Pipeline::learn)));
  }
  static void TearDownTestSuite() {
    delete learn_;
    delete dir_;
  }
  static TempDir* dir_;
  static RunArtifact* learn_;
};
TempDir* TinyPipeline::dir_ = nullptr;
RunArtifact* TinyPipeline::learn_ = nullptr;

TEST_F(TinyPipeline, LearnStageLayout) {
  ASSERT_EQ(learn_->stages.size(), 1u);
  const StageArtifact& st = learn_->stages[0];
  EXPECT_EQ(st.dir, dir_->path() / "tiny" / "learn");
  for (const char* f : {"config.json", "model.ckpt", "loss.csv", "traj.csv", "report.csv", "artifact.json"})
    EXPECT_TRUE(fs::exists(st.dir / f)) << f;
  EXPECT_EQ(slurp(st.dir / "loss.csv").substr(0, 49), "step,loss,weight_sum,coupling_cost,independent_co");
  EXPECT_EQ(slurp(st.dir / "traj.csv").substr(0, 20), "snapshot_index,t,x,y");
  const auto j = read_json_file(st.dir / "artifact.json");
  EXPECT_EQ(j.at("config_hash"), hex(st.config_hash));
  EXPECT_EQ(j.at("seed"), 3u);
  EXPECT_EQ(read_json_file(st.dir / "config.json"), st.config);
  const auto model = flow::FlowModel::load(st.checkpoint);
  EXPECT_EQ(model.provenance().at("experiment_hash"), hex(st.config_hash));
  ASSERT_EQ(st.rows.size(), 2u);
  EXPECT_EQ(st.rows[0].method, "learn");
  EXPECT_EQ(st.rows[1].seed, 1u);
  for (const auto& r : st.rows) {
    EXPECT_TRUE(r.mmd_retain && r.retention_accuracy && r.forget_rate && r.leakage && r.train_time_s &&
                r.inference_ms_per_sample && r.inference_ms_std);
    EXPECT_FALSE(r.lambda.has_value());
  }
  // trajectory CSV: 3 snapshots of 40 points plus a header
  std::ifstream in(st.dir / "traj.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 1u + 3u * 40u);
}

TEST_F(TinyPipeline, RerunFromConfigIsBitExact) {
  const StageArtifact& st = learn_->stages[0];
  TempDir copy("rerun");
  const fs::path cfg = copy / "config.json";
  fs::copy_file(st.dir / "config.json", cfg);
  ExperimentSpec again = load_spec(cfg);
  again.out = copy.path();
  const RunArtifact art = run(again);
  EXPECT_EQ(untimed(art.rows()), untimed(learn_->rows()));
  // provenance carries the config hash, which includes the output root
  const auto a = flow::FlowModel::load(art.stages[0].checkpoint), b = flow::FlowModel::load(st.checkpoint);
  EXPECT_TRUE((a.sample(100, 10, 1).array() == b.sample(100, 10, 1).array()).all());
  const RunArtifact same_place = run(load_spec(cfg));
  EXPECT_EQ(slurp(same_place.stages[0].checkpoint), slurp(st.checkpoint));
}

TEST_F(TinyPipeline, DownstreamStages) {
  ExperimentSpec s = tiny_spec(dir_->path(), Pipeline::unlearn_erfm);
  const RunArtifact un = run(s);
  ASSERT_EQ(un.stages.size(), 1u);
  EXPECT_EQ(un.stages[0].rows[0].method, "unlearn-erfm");
  EXPECT_EQ(un.stages[0].rows[0].lambda, 5.0);
  EXPECT_EQ(flow::FlowModel::load(un.stages[0].checkpoint).depth(), 2u);

  const RunArtifact inv = invert_experiment(s);
  EXPECT_EQ(inv.stages[0].stage, "invert");
  EXPECT_EQ(inv.stages[0].rows[0].method, "invert");
  EXPECT_EQ(flow::FlowModel::load(inv.stages[0].checkpoint).depth(), 3u);

  s.pipeline = Pipeline::sweep_lambda;
  s.lambdas = {0.5, 1000};
  const RunArtifact sw = run(s);
  ASSERT_EQ(sw.stages.size(), 2u);
  EXPECT_EQ(sw.stages[1].stage, "sweep-lambda/lambda-1000");
  const auto combined = eval::read_report_csv(dir_->path() / "tiny" / "sweep-lambda" / "report.csv");
  EXPECT_EQ(combined.size(), 4u);
  EXPECT_EQ(combined[2].lambda, 1000.0);

  s.lambdas.clear();
  s.pipeline = Pipeline::finetune;
  const RunArtifact ft = run(s);
  EXPECT_EQ(ft.stages[0].rows[0].method, "finetune");
  EXPECT_EQ(read_json_file(ft.stages[0].dir / "artifact.json").at("train").at("steps"), 6u);
  s.pipeline = Pipeline::refit_ot;
  const RunArtifact rf = run(s);
  EXPECT_EQ(rf.stages[0].rows[0].method, "refit-ot");
  s.pipeline = Pipeline::retrain;
  s.svg = true;
  const RunArtifact rt = run(s);
  EXPECT_TRUE(fs::exists(rt.stages[0].dir / "samples.svg"));

  const auto table = report({*learn_, un, rt});
  ASSERT_EQ(table.size(), 3u);
  EXPECT_EQ(table[1].method, "unlearn-erfm");
  EXPECT_EQ(table[1].n_seeds, 2u);
  expect_error(ErrorKind::precondition, [] { (void)report({}); });
}

TEST_F(TinyPipeline, ClassifierEnergyIsCached) {
  ExperimentSpec s = tiny_spec(dir_->path(), Pipeline::unlearn_erfm);
  s.name = "tiny";
  s.energy = EnergySource::classifier;
  const RunArtifact a = run(s);
  std::size_t cached = 0;
  for (const auto& e : fs::directory_iterator(dir_->path() / "tiny" / "energy")) cached += e.path().extension() == ".ckpt";
  EXPECT_EQ(cached, 1u);
  const RunArtifact b = run(s);
  EXPECT_EQ(untimed(a.rows()), untimed(b.rows()));
}

// ---- command line ----

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CFLOW_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  const fs::path log = dir / "log.txt";
  EXPECT_EQ(cli("", log), exit_code(ErrorKind::usage));
  EXPECT_EQ(cli("frobnicate", log), exit_code(ErrorKind::usage));
  EXPECT_EQ(cli("datasets export --name circles --n 10", log), exit_code(ErrorKind::usage));  // no --out
  EXPECT_EQ(cli("datasets export --name spirals --out " + (dir / "x.csv").string(), log),
            exit_code(ErrorKind::precondition));
  EXPECT_EQ(cli("sample --ckpt " + (dir / "none.ckpt").string() + " --out " + (dir / "s.csv").string(), log),
            exit_code(ErrorKind::io));
  std::ofstream(dir / "bad.json") << "{\"name\": \"x\", \"colour\": 1}";
  EXPECT_EQ(cli("run --config " + (dir / "bad.json").string(), log), exit_code(ErrorKind::config));
  std::ofstream(dir / "unlearn.json") << "{\"name\": \"u\", \"pipeline\": \"unlearn-erfm\"}";
  EXPECT_EQ(cli("run --config " + (dir / "unlearn.json").string() + " --out " + (dir / "runs").string(), log),
            exit_code(ErrorKind::dependency));
  EXPECT_NE(slurp(log).find("learn"), std::string::npos);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint at all";
  EXPECT_EQ(cli("sample --ckpt " + (dir / "junk.ckpt").string() + " --out " + (dir / "s.csv").string(), log),
            exit_code(ErrorKind::format));
}

TEST(Cli, EndToEnd) {
  TempDir dir("cli-e2e");
  const fs::path log = dir / "log.txt";
  const std::string d = dir.path().string();
  ASSERT_EQ(cli("datasets export --name moons --n 300 --seed 2 --out " + d + "/moons.csv", log), 0) << slurp(log);
  EXPECT_EQ(slurp(dir / "moons.csv").substr(0, 10), "x,y,label\n");
  std::ofstream(dir / "train.json") << R"({"steps": 20, "batch": 32, "hidden": [16]})";
  ASSERT_EQ(cli("train --config " + d + "/train.json --data " + d + "/moons.csv --out " + d + "/pre.ckpt --loss " + d +
                    "/loss.csv",
                log),
            0)
      << slurp(log);
  ASSERT_EQ(cli("unlearn --config " + d + "/train.json --ckpt " + d + "/pre.ckpt --dataset moons --lambda 2 --out " + d +
                    "/un.ckpt",
                log),
            0)
      << slurp(log);
  ASSERT_EQ(cli("sample --ckpt " + d + "/un.ckpt --n 50 --seed 1 --out " + d + "/s.csv", log), 0) << slurp(log);
  EXPECT_EQ(datasets::read_points_csv(dir / "s.csv").rows(), 50);
  ASSERT_EQ(cli("traj --ckpt " + d + "/un.ckpt --n 5 --steps 4 --snapshots 3 --out " + d + "/t.csv", log), 0)
      << slurp(log);
  ASSERT_EQ(cli("classifier train --dataset moons --n 500 --steps 30 --out " + d + "/c.ckpt", log), 0) << slurp(log);
  ASSERT_EQ(cli("eval run --ckpt " + d + "/un.ckpt --dataset moons --classifier " + d +
                    "/c.ckpt --method unlearn-erfm --n 100 --timing-samples 50 --out " + d + "/r.csv",
                log),
            0)
      << slurp(log);
  ASSERT_EQ(cli("report " + d + "/r.csv --format md --out " + d + "/table.md", log), 0) << slurp(log);
  EXPECT_NE(slurp(dir / "table.md").find("unlearn-erfm"), std::string::npos);
  std::ofstream(dir / "energy.json") << R"({"kind": "inverted", "inner": {"kind": "analytic", "benchmark": "moons"}})";
  ASSERT_EQ(cli("energy eval --spec " + d + "/energy.json --points " + d + "/s.csv --out " + d + "/e.csv", log), 0)
      << slurp(log);
  EXPECT_EQ(slurp(dir / "e.csv").substr(0, 13), "x,y,F,weight\n");
  EXPECT_EQ(cli("train --config " + d + "/train.json --data " + d + "/moons.csv", log), exit_code(ErrorKind::usage));
}

}  // namespace
