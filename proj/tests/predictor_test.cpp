#include <gtest/gtest.h>

#include <cmath>

#include "aat/errors.hpp"
#include "aat/predictor.hpp"

using aat::ad::Matrix;
using aat::ad::Rng;
namespace data = aat::data;
namespace env = aat::env;
namespace pred = aat::predictor;
namespace value = aat::value;

namespace {

pred::PredictorConfig linear_config(double kappa = 0.0) {
  pred::PredictorConfig c;
  c.architecture = pred::Architecture::linear;
  c.kappa = kappa;
  c.lambda = 0.05;
  return c;
}

Eigen::VectorXd vec(std::initializer_list<double> xs) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

struct GridFixture {
  env::GridPixels grid;
  data::Dataset dataset;
  value::ValueHeads heads;

  GridFixture() {
    Rng rng(3);
    aat::policy::ToyPolicy pi(784, 4, aat::policy::TrainingAlgorithm::q_learning, rng);
    dataset = data::collect_mix(grid, pi, {{"fgsm", 0.5}, {"random", 0.5}}, 4, 1.5, 21);
    value::ValueConfig vc;
    vc.hidden = {16};
    heads = value::ValueHeads(784, 4, vc, 1.0, rng);
    value::train_stage1(dataset, heads, 20, 1e-3, rng);
  }
};

}  // namespace

TEST(CandidateMu, SoftmaxExamples) {
  EXPECT_NEAR(pred::candidate_mu(vec({3.0})).mu(0), 1.0, 1e-12);
  const auto even = pred::candidate_mu(vec({0.0, 0.0, 0.0})).mu;
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(even(j), 1.0 / 3.0, 1e-12);
  const auto two = pred::candidate_mu(vec({1.0, 0.0})).mu;
  EXPECT_NEAR(two(0), 0.7311, 1e-4);
  EXPECT_NEAR(two(1), 0.2689, 1e-4);
  EXPECT_THROW(pred::candidate_mu(Eigen::VectorXd()), aat::DataError);
}

TEST(CandidateMu, ShiftInvarianceAndValidity) {
  Rng rng(5);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + trial % 16;
    Eigen::VectorXd l(n);
    for (int j = 0; j < n; ++j) l(j) = g(rng);
    const double c = g(rng) * 100.0;
    const auto a = pred::candidate_mu(l).mu;
    const auto b = pred::candidate_mu((l.array() + c).matrix()).mu;
    EXPECT_NEAR(a.sum(), 1.0, 1e-9);
    EXPECT_GT(a.minCoeff(), 0.0);
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-9);
    // 0 <= H <= log N_c.
    const double h = pred::entropy(a);
    EXPECT_GE(h, -1e-12);
    EXPECT_LE(h, std::log(static_cast<double>(n)) + 1e-12);
  }
}

TEST(Entropy, Examples) {
  EXPECT_DOUBLE_EQ(pred::entropy(vec({1.0, 0.0, 0.0})), 0.0);
  EXPECT_NEAR(pred::entropy(vec({0.25, 0.25, 0.25, 0.25})), std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
  EXPECT_NEAR(pred::entropy(vec({0.7311, 0.2689})), 0.5822, 1e-4);
}

TEST(RegressionTarget, Examples) {
  EXPECT_NEAR(pred::regression_target(pred::candidate_mu(vec({2.0}))), 2.0, 1e-12);
  EXPECT_NEAR(pred::regression_target(pred::candidate_mu(vec({1.0, 0.0}))), 0.7311, 1e-4);
  // All negative: products are -0.7311 and -0.5379; the larger one wins.
  const auto neg = pred::candidate_mu(vec({-1.0, -2.0}));
  const double expected = std::max(neg.mu(0) * -1.0, neg.mu(1) * -2.0);
  EXPECT_NEAR(pred::regression_target(neg), expected, 1e-12);
  EXPECT_NEAR(expected, -0.5379, 1e-4);
}

TEST(RegressionTarget, AlternativeRule) {
  const auto set = pred::candidate_mu(vec({-1.0, -2.0}));
  EXPECT_NEAR(pred::regression_target(set, pred::TargetRule::argmax_mu), -1.0, 1e-12);
  EXPECT_EQ(pred::parse_target_rule("argmax_mu"), pred::TargetRule::argmax_mu);
  EXPECT_THROW(pred::parse_target_rule("mean"), aat::ConfigError);
}

TEST(Predictor, ZeroLinearAndDeterminism) {
  Rng rng(1);
  pred::AdvantagePredictor p({1, 3, 1}, linear_config(), rng);
  p.zero();
  EXPECT_DOUBLE_EQ(p.predict_max_advantage(Eigen::RowVector3d(4.0, -2.0, 9.0)), 0.0);

  pred::AdvantagePredictor q({28, 28, 1}, pred::PredictorConfig{}, rng);
  Eigen::RowVectorXd s = Eigen::RowVectorXd::Random(784);
  EXPECT_DOUBLE_EQ(q.predict_max_advantage(s), q.predict_max_advantage(s));
}

TEST(Predictor, ClipRule) {
  Rng rng(1);
  pred::PredictorConfig c = linear_config();
  c.lambda = 0.5;
  pred::AdvantagePredictor p({1, 1, 1}, c, rng);
  p.zero();
  aat::ad::ParameterRefs params;
  p.parameters(params);
  params[1]->value()(0, 0) = 7.0;  // bias
  EXPECT_DOUBLE_EQ(p.raw(Matrix::Zero(1, 1))(0), 7.0);
  EXPECT_DOUBLE_EQ(p.predict_max_advantage(Eigen::RowVectorXd::Zero(1)), 2.0 - 1e-6);
  params[1]->value()(0, 0) = -7.0;
  EXPECT_DOUBLE_EQ(p.predict_max_advantage(Eigen::RowVectorXd::Zero(1)), -(2.0 - 1e-6));
  params[1]->value()(0, 0) = 0.3;
  EXPECT_DOUBLE_EQ(p.predict_max_advantage(Eigen::RowVectorXd::Zero(1)), 0.3);
}

TEST(Fit, FixedTargetConverges) {
  Rng rng(2);
  pred::AdvantagePredictor p({1, 3, 1}, linear_config(), rng);
  pred::PredictorTargets t;
  t.states = Matrix(1, 3);
  t.states << 0.5, -1.0, 0.25;
  t.targets = vec({2.0});
  t.entropies = vec({0.0});
  pred::fit(p, t, 3000, 1e-2, rng);
  EXPECT_NEAR(p.raw(t.states)(0), 2.0, 1e-3);
}

TEST(Fit, ZeroLearningRateKeepsParameters) {
  Rng rng(2);
  pred::AdvantagePredictor p({28, 28, 1}, pred::PredictorConfig{}, rng);
  const nlohmann::json before = p.to_json();
  pred::PredictorTargets t;
  t.states = Matrix::Random(4, 784);
  t.targets = vec({1.0, -1.0, 0.5, 0.0});
  t.entropies = vec({0.1, 0.2, 0.3, 0.4});
  const auto report = pred::fit(p, t, 5, 0.0, rng);
  EXPECT_EQ(p.to_json(), before);
  // Entropy shifts the loss by -kappa * mean(H) only.
  EXPECT_NEAR(report.loss[0], report.regression[0] - 0.1 * 0.25, 1e-12);
}

TEST(Fit, RecoversAffineMaxAdvantage) {
  Rng rng(4);
  const int m = 400;
  const Eigen::Vector3d w(0.4, -0.2, 0.1);
  const double b = 0.3;
  pred::PredictorTargets t;
  t.states = Matrix::Random(m, 3);
  t.targets = (t.states * w).array() + b;
  t.entropies = Eigen::VectorXd::Zero(m);

  // Least-squares oracle on the augmented design matrix.
  Matrix design(m, 4);
  design << t.states, Matrix::Ones(m, 1);
  const Eigen::VectorXd oracle = design.colPivHouseholderQr().solve(t.targets);

  pred::AdvantagePredictor p({1, 3, 1}, linear_config(0.1), rng);
  const auto report = pred::fit(p, t, 4000, 5e-3, rng);
  aat::ad::ParameterRefs params;
  p.parameters(params);
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(params[0]->value()(k, 0), oracle(k), 0.05 * std::abs(oracle(k)));
    EXPECT_NEAR(params[0]->value()(k, 0), w(k), 0.05 * std::abs(w(k)));
  }
  EXPECT_NEAR(params[1]->value()(0, 0), b, 0.05 * b);

  // Smoothed loss is finite and does not increase window to window.
  const int window = 200;
  double prev = INFINITY;
  for (std::size_t start = 0; start + window <= report.loss.size(); start += window) {
    double s = 0.0;
    for (int k = 0; k < window; ++k) s += report.loss[start + k];
    s /= window;
    ASSERT_TRUE(std::isfinite(s));
    EXPECT_LE(s, prev + 1e-9);
    prev = s;
  }
}

TEST(CandidateSampler, NeighboursAndBudget) {
  GridFixture f;
  pred::PredictorConfig c;
  pred::CandidateSampler sampler(f.dataset, c);
  Rng rng(8);
  const auto& tr = f.dataset.trajectories[0];
  const Matrix cands = sampler.candidates(tr.states.row(0), rng);
  ASSERT_EQ(cands.rows(), 16);
  for (Eigen::Index j = 0; j < cands.rows(); ++j) EXPECT_LE(cands.row(j).norm(), 1.5 + 1e-9);
  // The first neighbour comes from a record with exactly this state.
  bool found = false;
  for (const auto& t : f.dataset.trajectories) {
    for (int s = 0; s < t.length(); ++s) {
      if (t.states.row(s) == tr.states.row(0) && t.perturbations.row(s) == cands.row(0)) found = true;
    }
  }
  EXPECT_TRUE(found);
}

TEST(TrainPredictor, TargetsBoundedAndCheckpointRoundTrip) {
  GridFixture f;
  Rng rng(9);
  pred::PredictorConfig c;
  c.max_targets = 40;
  c.lambda = f.heads.config().lambda;
  pred::AdvantagePredictor p({28, 28, 1}, c, rng);
  const auto targets = pred::build_targets(f.dataset, f.heads, c, rng);
  ASSERT_EQ(targets.targets.size(), 40);
  for (Eigen::Index k = 0; k < targets.targets.size(); ++k) {
    EXPECT_LT(std::abs(targets.targets(k)), 1.0 / c.lambda);
    EXPECT_GE(targets.entropies(k), 0.0);
    EXPECT_LE(targets.entropies(k), std::log(16.0) + 1e-12);
  }
  const auto report = pred::fit(p, targets, 30, 1e-3, rng);
  EXPECT_TRUE(std::isfinite(report.loss.back()));
  const auto back = pred::AdvantagePredictor::from_json(p.to_json());
  const Eigen::RowVectorXd s = f.dataset.trajectories[1].states.row(2);
  EXPECT_DOUBLE_EQ(back.predict_max_advantage(s), p.predict_max_advantage(s));
  EXPECT_EQ(p.to_json().at("manifest").at("n_candidates"), 16);

  data::Dataset empty;
  empty.manifest = f.dataset.manifest;
  EXPECT_THROW(pred::train_predictor(empty, f.heads, p, 1, 1e-3, rng), aat::DataError);
}
