#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <gtest/gtest.h>

#include "cflow/flow/train.hpp"
#include "helpers.hpp"

namespace {

using namespace cflow;
using namespace cflow::flow;
using cflow::testing::expect_error;
using cflow::testing::linear_classifier;
using cflow::testing::points;
using cflow::testing::TempDir;
using diffcore::Matrix;
using diffcore::Mlp;
using diffcore::VelocityField;

VelocityField zero_field() { return VelocityField(Mlp::zeros({3, 8, 2})); }

VelocityField constant_field(double vx, double vy) {
  Mlp net = Mlp::zeros({3, 8, 2});
  net.bias(1).value() << vx, vy;
  return VelocityField(std::move(net));
}

energy::EnergySpec linear_energy(double wx, double wy, double b, double lambda) {
  return energy::EnergySpec::from_classifier(
      std::make_shared<const energy::BinaryClassifier>(linear_classifier(wx, wy, b)), lambda);
}

Vector times(Eigen::Index n, double t) { return Vector::Constant(n, t); }

TEST(Paths, InterpolateExamples) {
  const Batch a = points({{0, 0}}), b = points({{2, 4}});
  EXPECT_TRUE((interpolate(a, b, 0.0).array() == a.array()).all());
  EXPECT_TRUE((interpolate(a, b, 1.0).array() == b.array()).all());
  const Batch mid = interpolate(a, b, 0.5);
  EXPECT_EQ(mid(0, 0), 1.0);
  EXPECT_EQ(mid(0, 1), 2.0);
  expect_error(ErrorKind::precondition, [&] { (void)interpolate(a, b, 1.5); });
  expect_error(ErrorKind::precondition, [&] { (void)interpolate(a, b, -0.1); });
  expect_error(ErrorKind::shape, [&] { (void)interpolate(a, points({{1, 1}, {2, 2}}), 0.5); });
}

TEST(Paths, ConditionalSample) {
  Rng rng(0);
  const Batch a = points({{0, 0}}), b = points({{2, 4}});
  EXPECT_TRUE((conditional_sample(a, b, 0.3, 0.0, rng).array() == interpolate(a, b, 0.3).array()).all());
  expect_error(ErrorKind::precondition, [&] { (void)conditional_sample(a, b, 0.3, -1.0, rng); });
  const Eigen::Index n = 100000;
  const Batch x0 = Batch::Zero(n, 2), x1 = Batch::Constant(n, 2, 1.0);
  const Batch xt = conditional_sample(x0, x1, times(n, 0.5), 1.0, rng);
  for (int c = 0; c < 2; ++c) {
    const double mean = xt.col(c).mean();
    EXPECT_NEAR(mean, 0.5, 0.02);
    EXPECT_NEAR((xt.col(c).array() - mean).square().mean(), 1.0, 0.02);
  }
}

TEST(Paths, TargetVelocity) {
  const Batch a = points({{0, 0}}), b = points({{1, 2}});
  EXPECT_TRUE(target_velocity(a, a).isZero(0.0));
  EXPECT_TRUE((target_velocity(a, b).array() == b.array()).all());
  Rng rng(1);
  const Batch p = rng.normal_matrix<Batch>(10, 2), q = rng.normal_matrix<Batch>(10, 2);
  EXPECT_TRUE((target_velocity(p, q).array() == -target_velocity(q, p).array()).all());
}

TEST(Cfm, ZeroFieldSinglePair) {
  VelocityField v = zero_field();
  Rng rng(0);
  const Coupling c = independent_coupling(points({{0, 0}}), points({{1, 0}}));
  for (double t : {0.0, 0.4, 1.0}) EXPECT_EQ(cfm_loss(v, c, times(1, t), 0.0, rng), 1.0);
}

TEST(Cfm, OracleFieldIsZero) {
  VelocityField v = constant_field(1.0, 2.0);
  Rng rng(0);
  const Coupling c = independent_coupling(points({{0, 0}}), points({{1, 2}}));
  EXPECT_EQ(cfm_loss(v, c, times(1, 0.7), 0.0, rng), 0.0);
}

TEST(Cfm, NonNegativeAndRejectsEmpty) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    VelocityField v(2, {16, 16}, rng);
    const Coupling c = independent_coupling(rng.normal_matrix<Batch>(32, 2), rng.normal_matrix<Batch>(32, 2));
    EXPECT_GE(cfm_loss(v, c, rng.uniform_vector(32), 0.1, rng), 0.0);
  }
  VelocityField v = zero_field();
  const Coupling empty = independent_coupling(Batch(0, 2), Batch(0, 2));
  expect_error(ErrorKind::precondition, [&] { (void)cfm_loss(v, empty, Vector(0), 0.0, rng); });
}

TEST(Erfm, SinglePairHalfWeight) {
  VelocityField v = zero_field();
  Rng rng(0);
  const Coupling c = independent_coupling(points({{0, 0}}), points({{1, 0}}));
  // F(x1) = 0 exactly, so w = 0.5
  const auto f = linear_energy(0.0, 0.0, 0.0, 5.0);
  EXPECT_EQ(f.weight(c.x1)(0), 0.5);
  EXPECT_NEAR(erfm_loss(v, c, times(1, 0.2), f, 0.0, rng), 1.0, 1e-15);
}

TEST(Erfm, TwoPairArithmetic) {
  VelocityField v = zero_field();
  Rng rng(0);
  const double ln3 = std::log(3.0);
  // x1 energies 0 and ln 3 give weights 0.5 and 0.25 at lambda 1; residuals 1 and 4
  const Coupling c = independent_coupling(points({{0, 1}, {ln3, 2}}), points({{0, 0}, {ln3, 0}}));
  const auto f = linear_energy(1.0, 0.0, 0.0, 1.0);
  const Vector w = f.weight(c.x1);
  EXPECT_NEAR(w(0), 0.5, 1e-12);
  EXPECT_NEAR(w(1), 0.25, 1e-12);
  EXPECT_NEAR(erfm_loss(v, c, times(2, 0.5), f, 0.0, rng), 2.0, 1e-12);
  // the unnormalised form is (0.5*1 + 0.25*4) / 2
  Tape tape;
  const auto batch = make_regression_batch(c, times(2, 0.5), 0.0, rng);
  EXPECT_NEAR(tape.value(erfm_objective_unnormalized(tape, v, batch, f))(0, 0), 0.75, 1e-12);
}

TEST(Erfm, ConstantEnergyDegeneratesBitExactly) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    VelocityField v(2, diffcore::default_hidden(), rng);
    const Coupling c = independent_coupling(rng.normal_matrix<Batch>(64, 2), rng.normal_matrix<Batch>(64, 2));
    const Vector t = rng.uniform_vector(64);
    for (double bias : {-3.0, 0.0, 0.7}) {
      const auto f = linear_energy(0.0, 0.0, bias, 5.0);
      Rng r1(seed + 100), r2(seed + 100);
      const RegressionBatch b1 = make_regression_batch(c, t, 0.05, r1), b2 = make_regression_batch(c, t, 0.05, r2);
      v.net().clear_grads();
      Tape t1;
      Var l1 = cfm_objective(t1, v, b1);
      const double cfm = t1.value(l1)(0, 0);
      t1.backward(l1);
      std::vector<Matrix> g1;
      for (auto* p : v.net().parameters()) g1.push_back(p->grad());
      v.net().clear_grads();
      Tape t2;
      Var l2 = erfm_objective(t2, v, b2, f);
      EXPECT_EQ(t2.value(l2)(0, 0), cfm);
      t2.backward(l2);
      std::size_t k = 0;
      for (auto* p : v.net().parameters()) EXPECT_TRUE((p->grad().array() == g1[k++].array()).all());
    }
  }
}

TEST(Erfm, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  VelocityField v(2, {8, 8}, rng);
  const Coupling c = independent_coupling(rng.normal_matrix<Batch>(16, 2), rng.normal_matrix<Batch>(16, 2));
  const Vector t = rng.uniform_vector(16);
  const auto f = energy::EnergySpec::analytic(datasets::Benchmark::circles, 1.0);
  Rng r(3);
  const RegressionBatch b = make_regression_batch(c, t, 0.1, r);
  auto value = [&] {
    Tape tape;
    return tape.value(erfm_objective(tape, v, b, f))(0, 0);
  };
  v.net().clear_grads();
  Tape tape;
  tape.backward(erfm_objective(tape, v, b, f));
  const auto res = cflow::testing::finite_difference_check(v.net().parameters(), value);
  EXPECT_EQ(res.failures, 0u) << res.worst;
}

TEST(Erfm, FullySuppressedBatch) {
  VelocityField v = zero_field();
  Rng rng(0);
  const Coupling c = independent_coupling(points({{0, 0}, {1, 1}}), points({{1, 0}, {2, 2}}));
  // clamped probability 1 - 1e-6 gives F ~ 13.8; at lambda 1000 every weight underflows
  const auto f = linear_energy(0.0, 0.0, 50.0, 1000.0);
  EXPECT_LT(f.weight(c.x1).sum(), kMinWeightSum);
  expect_error(ErrorKind::suppressed, [&] { (void)erfm_loss(v, c, times(2, 0.5), f, 0.0, rng); });
}

TEST(Ot, CrossingExample) {
  const Coupling c = ot_coupling(points({{0, 0}, {2, 0}}), points({{2, 0}, {0, 0}}));
  EXPECT_EQ(c.cost, 0.0);
  EXPECT_TRUE((c.x1.array() == c.x0.array()).all());
  EXPECT_EQ(c.plan, CouplingPlan::ot);
  EXPECT_EQ(independent_coupling(points({{0, 0}, {2, 0}}), points({{2, 0}, {0, 0}})).cost, 8.0);
}

TEST(Ot, SinglePoint) {
  const Coupling c = ot_coupling(points({{1, 1}}), points({{4, 5}}));
  EXPECT_EQ(c.cost, 25.0);
}

TEST(Ot, MatchesBruteForceOnSixPoints) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Batch x0 = rng.normal_matrix<Batch>(6, 2), x1 = rng.normal_matrix<Batch>(6, 2);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double cost = 0;
      for (int i = 0; i < 6; ++i) cost += (x0.row(i) - x1.row(perm[static_cast<std::size_t>(i)])).squaredNorm();
      best = std::min(best, cost);
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_NEAR(ot_coupling(x0, x1).cost, best, 1e-12);
  }
}

TEST(Ot, PreservesMarginalsAndBeatsIndependent) {
  Rng rng(4);
  for (Eigen::Index n : {32, 256}) {
    const Batch x0 = rng.normal_matrix<Batch>(n, 2), x1 = 3.0 * rng.normal_matrix<Batch>(n, 2);
    const Coupling c = ot_coupling(x0, x1);
    EXPECT_TRUE((c.x0.array() == x0.array()).all());
    auto sorted = [](const Batch& b) {
      std::vector<std::pair<double, double>> v;
      for (Eigen::Index i = 0; i < b.rows(); ++i) v.emplace_back(b(i, 0), b(i, 1));
      std::sort(v.begin(), v.end());
      return v;
    };
    EXPECT_EQ(sorted(c.x1), sorted(x1));
    EXPECT_LE(c.cost, pairing_cost(x0, x1));
  }
  expect_error(ErrorKind::shape, [] { (void)ot_coupling(Batch::Zero(3, 2), Batch::Zero(4, 2)); });
}

TEST(Ot, AssignmentOnKnownMatrix) {
  Matrix cost(3, 3);
  cost << 4, 1, 3, 2, 0, 5, 3, 2, 2;
  const auto m = solve_assignment(cost);
  EXPECT_EQ(m, (std::vector<std::size_t>{1, 0, 2}));
}

TEST(Euler, ConstantFieldIsExact) {
  const VelocityField v = constant_field(1.0, 0.0);
  for (std::size_t n : {1u, 3u, 10u, 100u}) {
    const Batch x = euler(v, points({{0, 0}}), n);
    EXPECT_NEAR(x(0, 0), 1.0, 1e-12) << n;
    EXPECT_EQ(x(0, 1), 0.0);
  }
}

TEST(Euler, ZeroFieldIsIdentity) {
  Rng rng(2);
  const Batch x0 = rng.normal_matrix<Batch>(20, 2);
  EXPECT_TRUE((euler(zero_field(), x0, 10).array() == x0.array()).all());
}

TEST(Euler, LinearFieldRecurrence) {
  const auto field = [](double, const Batch& x) { return Batch(x); };
  const Batch x = euler(field, points({{1, 0}}), 10);
  EXPECT_NEAR(x(0, 0), std::pow(1.1, 10), 1e-12);
  EXPECT_NEAR(x(0, 0), 2.5937, 1e-4);
  EXPECT_EQ(x(0, 1), 0.0);
  expect_error(ErrorKind::precondition, [&] { (void)euler(field, points({{1, 0}}), 0); });
}

TEST(Euler, UsesLeftEndpointTimes) {
  std::vector<double> seen;
  const auto field = [&](double t, const Batch& x) {
    seen.push_back(t);
    return Batch(Batch::Zero(x.rows(), x.cols()));
  };
  (void)euler(field, points({{0, 0}}), 4);
  EXPECT_EQ(seen, (std::vector<double>{0.0, 0.25, 0.5, 0.75}));
}

TEST(Euler, FirstOrderConvergence) {
  // x' = t x, exact x(1) = exp(1/2)
  const auto field = [](double t, const Batch& x) { return Batch(t * x); };
  const double truth = std::exp(0.5);
  const double e1 = std::abs(euler(field, points({{1, 0}}), 50)(0, 0) - truth);
  const double e2 = std::abs(euler(field, points({{1, 0}}), 100)(0, 0) - truth);
  EXPECT_NEAR(e1 / e2, 2.0, 0.1);
}

TEST(Trajectory, SnapshotExamples) {
  Rng rng(6);
  VelocityField v(2, {16}, rng);
  const FlowModel m(v, BaseSampler::gaussian());
  Rng draw(21);
  const Batch x0 = draw.normal_matrix<Batch>(30, 2);
  const auto two = m.trajectory(x0, 10, 2);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_TRUE((two[0].x.array() == x0.array()).all());
  EXPECT_EQ(two[1].t, 1.0);
  EXPECT_TRUE((two[1].x.array() == m.sample(30, 10, 21).array()).all());
  const auto five = m.trajectory(x0, 8, 5);
  ASSERT_EQ(five.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(five[k].t, 0.25 * static_cast<double>(k));
  const FlowModel still(zero_field(), BaseSampler::gaussian());
  for (const auto& s : still.trajectory(x0, 10, 11)) EXPECT_TRUE((s.x.array() == x0.array()).all());
  expect_error(ErrorKind::precondition, [&] { (void)m.trajectory(x0, 3, 5); });
  expect_error(ErrorKind::precondition, [&] { (void)m.trajectory(x0, 3, 1); });
}

TEST(FlowModel, SampleAndSaveLoadChain) {
  TempDir dir("model");
  Rng rng(7);
  auto pre = std::make_shared<const FlowModel>(VelocityField(2, {16}, rng), BaseSampler::gaussian());
  const FlowModel post(VelocityField(2, {16}, rng), BaseSampler::model(pre), 10, {{"tag", "post"}});
  EXPECT_EQ(post.depth(), 2u);
  expect_error(ErrorKind::precondition, [&] { (void)post.sample(5, 0, 1); });
  post.save(dir / "post.ckpt");
  const FlowModel back = FlowModel::load(dir / "post.ckpt");
  EXPECT_EQ(back.depth(), 2u);
  EXPECT_EQ(back.provenance().at("tag"), "post");
  EXPECT_TRUE((back.sample(100, 10, 3).array() == post.sample(100, 10, 3).array()).all());
  // chained sampling transports the base model's draws
  Rng a(3);
  const Batch via_pre = post.transport(pre->generate(100, a), 10);
  EXPECT_TRUE((via_pre.array() == post.sample(100, 10, 3).array()).all());

  Batch pts = points({{0.5, 0.5}, {-1, 2}});
  const FlowModel emp(zero_field(), BaseSampler::empirical(pts));
  emp.save(dir / "emp.ckpt");
  EXPECT_TRUE((FlowModel::load(dir / "emp.ckpt").base().points().array() == pts.array()).all());
}

TrainConfig tiny(TrainMode mode, std::size_t steps = 30) {
  TrainConfig c;
  c.mode = mode;
  c.steps = steps;
  c.batch = 32;
  c.hidden = {16, 16};
  c.seed = 5;
  return c;
}

TEST(Train, ModeTargetMismatch) {
  const Batch data = datasets::generate(datasets::Benchmark::circles, 100, 0).points;
  const auto f = energy::EnergySpec::analytic(datasets::Benchmark::circles);
  expect_error(ErrorKind::precondition, [&] { (void)train(tiny(TrainMode::learn), BaseSampler::gaussian(), f); });
  expect_error(ErrorKind::precondition,
               [&] { (void)train(tiny(TrainMode::unlearn_erfm), BaseSampler::gaussian(), data); });
  expect_error(ErrorKind::precondition, [&] { (void)train(tiny(TrainMode::finetune), BaseSampler::gaussian(), data); });
  expect_error(ErrorKind::shape,
               [&] { (void)train(tiny(TrainMode::learn), BaseSampler::gaussian(3), data); });
}

TEST(Train, SameSeedGivesIdenticalCheckpoints) {
  TempDir dir("train");
  const Batch data = datasets::generate(datasets::Benchmark::moons, 500, 0).points;
  train(tiny(TrainMode::learn), BaseSampler::gaussian(), data).model.save(dir / "a.ckpt");
  train(tiny(TrainMode::learn), BaseSampler::gaussian(), data).model.save(dir / "b.ckpt");
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  auto other = tiny(TrainMode::learn);
  other.seed = 6;
  train(other, BaseSampler::gaussian(), data).model.save(dir / "c.ckpt");
  EXPECT_NE(slurp(dir / "a.ckpt"), slurp(dir / "c.ckpt"));
}

TEST(Train, RefitOtNeverCostsMoreThanIndependent) {
  const Batch data = datasets::generate(datasets::Benchmark::circles, 1000, 0).retain();
  const auto res = train(tiny(TrainMode::refit_ot, 40), BaseSampler::gaussian(), data);
  ASSERT_EQ(res.trace.size(), 40u);
  for (const auto& r : res.trace) EXPECT_LE(r.coupling_cost, r.independent_cost + 1e-9);
}

TEST(Train, SuppressedEverywhereFails) {
  auto cfg = tiny(TrainMode::unlearn_erfm, 1);
  cfg.lambda = 1000;
  expect_error(ErrorKind::suppressed,
               [&] { (void)train(cfg, BaseSampler::gaussian(), linear_energy(0, 0, 50.0, 1000.0)); });
}

TEST(Train, UnlearnRecordsWeightSums) {
  auto cfg = tiny(TrainMode::unlearn_erfm, 10);
  const auto res = train(cfg, BaseSampler::gaussian(), energy::EnergySpec::analytic(datasets::Benchmark::circles));
  for (const auto& r : res.trace) {
    EXPECT_GT(r.weight_sum, 0.0);
    EXPECT_LE(r.weight_sum, 32.0);
  }
  EXPECT_EQ(res.model.provenance().at("mode"), "unlearn-erfm");
}

TEST(Train, FinetuneStartsFromInit) {
  const Batch data = datasets::generate(datasets::Benchmark::circles, 500, 0).points;
  Rng rng(0);
  const VelocityField init(2, {16, 16}, rng);
  auto cfg = tiny(TrainMode::finetune, 1);
  cfg.learning_rate = 1e-12;
  const auto res = train(cfg, BaseSampler::gaussian(), data, init);
  const Batch x = rng.normal_matrix<Batch>(5, 2);
  EXPECT_LT((res.model.field()(0.5, x) - init(0.5, x)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Train, LearnCirclesLossDrops) {
  TrainConfig cfg;
  cfg.seed = 0;
  const auto data = datasets::generate(datasets::Benchmark::circles, 20000, 1);
  const auto res = train(cfg, BaseSampler::gaussian(), data.points);
  ASSERT_EQ(res.trace.size(), 5000u);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 500; ++i) {
    first += res.trace[i].loss;
    last += res.trace[4500 + i].loss;
  }
  // With independent pairs the objective keeps the conditional variance of
  // x1 - x0 given x_t as a floor, so only part of the initial loss can go.
  EXPECT_LT(last, 0.92 * first);
  const Batch gen = res.model.sample(2000, 10, 4);
  const Vector r = gen.rowwise().norm();
  std::size_t near_ring = 0;
  for (Eigen::Index i = 0; i < r.size(); ++i)
    near_ring += std::min(std::abs(r(i) - 0.5), std::abs(r(i) - 1.0)) < 0.3 ? 1 : 0;
  EXPECT_GT(static_cast<double>(near_ring) / 2000.0, 0.9);
}

TEST(TrainConfig, JsonRoundTripAndUnknownKey) {
  auto cfg = tiny(TrainMode::refit_ot);
  cfg.sigma = 0.05;
  cfg.coupling = CouplingPlan::ot;
  const TrainConfig back = train_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  expect_error(ErrorKind::config, [] { (void)train_config_from_json({{"stepz", 3}}); });
  expect_error(ErrorKind::config, [] { (void)train_config_from_json({{"mode", "dance"}}); });
}

}  // namespace
