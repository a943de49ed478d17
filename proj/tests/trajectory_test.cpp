#include <gtest/gtest.h>

#include <cmath>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "aat/errors.hpp"
#include "aat/trajectory.hpp"

using aat::ad::Matrix;
using aat::ad::Rng;
namespace data = aat::data;
namespace env = aat::env;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("aat_" + name + "_" + std::to_string(::getpid()))).string();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::shared_ptr<aat::policy::ToyPolicy> random_policy(std::uint64_t seed) {
  Rng rng(seed);
  return std::make_shared<aat::policy::ToyPolicy>(784, 4, aat::policy::TrainingAlgorithm::q_learning, rng);
}

}  // namespace

TEST(NormalizeReward, Examples) {
  EXPECT_DOUBLE_EQ(data::normalize_reward(5.0, -1.0, 5.0), 1.0);
  EXPECT_DOUBLE_EQ(data::normalize_reward(-1.0, -1.0, 5.0), 1e-3);
  EXPECT_DOUBLE_EQ(data::normalize_reward(2.0, -1.0, 5.0), 0.5);
  EXPECT_THROW(data::normalize_reward(0.0, 1.0, 1.0), aat::ConfigError);
}

TEST(ReturnsToGo, Examples) {
  EXPECT_EQ(data::returns_to_go({1.0, 1.0, 1.0}, 0), 0.0);
  EXPECT_EQ(data::returns_to_go({1.0, 1.0, 1.0}, 2), 0.0);
  EXPECT_DOUBLE_EQ(data::returns_to_go({0.5}, 0), 1.0);
  EXPECT_DOUBLE_EQ(data::returns_to_go({0.5, 0.25}, 0), 3.0);
  EXPECT_DOUBLE_EQ(data::returns_to_go({0.5, 0.25}, 1), 2.0);
  EXPECT_THROW(data::returns_to_go({0.5, 0.0}, 0), aat::DomainError);
  EXPECT_THROW(data::returns_to_go({1.5}, 0), aat::DomainError);
}

TEST(ReturnsToGo, DecreasingARewardIncreasesEarlierReturns) {
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(8);
    for (auto& x : r) x = u(rng);
    const std::size_t k = rng() % r.size();
    auto lower = r;
    lower[k] *= 0.5;
    const auto a = data::returns_to_go_all(r);
    const auto b = data::returns_to_go_all(lower);
    for (std::size_t t = 0; t < r.size(); ++t) {
      if (t <= k) EXPECT_GT(b[t], a[t]);
      else EXPECT_EQ(b[t], a[t]);
      EXPECT_GE(a[t], 0.0);
    }
  }
}

TEST(Patchify, CountsAndErrors) {
  EXPECT_EQ(data::patchify(Eigen::RowVectorXd::Zero(84 * 84), {84, 84, 1}, 14).count(), 36);
  EXPECT_EQ(data::patchify(Eigen::RowVectorXd::Zero(28 * 28), {28, 28, 1}, 14).count(), 4);
  EXPECT_THROW(data::patchify(Eigen::RowVectorXd::Zero(30 * 28), {30, 28, 1}, 14), aat::ShapeError);
}

TEST(Patchify, RowMajorPatchOrder) {
  Eigen::RowVectorXd img(4 * 4);
  for (int i = 0; i < 16; ++i) img(i) = i;
  const auto g = data::patchify(img, {4, 4, 1}, 2);
  Matrix expected(4, 4);
  expected << 0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15;
  EXPECT_TRUE((g.patches.array() == expected.array()).all());
}

TEST(Patchify, RoundTripIsBitExact) {
  Rng rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<std::pair<env::ObservationShape, int>> shapes = {
      {{28, 28, 1}, 14}, {{28, 28, 3}, 7}, {{84, 84, 1}, 14}, {{6, 4, 2}, 2}};
  for (int trial = 0; trial < 1000; ++trial) {
    const auto& [shape, side] = shapes[trial % shapes.size()];
    Eigen::RowVectorXd img(shape.size());
    for (Eigen::Index i = 0; i < img.size(); ++i) img(i) = u(rng);
    const auto back = data::unpatchify(data::patchify(img, shape, side));
    ASSERT_EQ(std::memcmp(back.data(), img.data(), sizeof(double) * img.size()), 0);
  }
}

TEST(TokenSequence, CountsAndMissingCondition) {
  data::TrajectoryRecord r;
  r.state = Eigen::RowVectorXd::Zero(784);
  r.perturbation = Eigen::RowVectorXd::Zero(784);
  auto seq = data::build_token_sequence({r}, data::Condition::returns_to_go, {28, 28, 1});
  EXPECT_EQ(seq.size(), 7);
  EXPECT_EQ(seq.kinds.front(), data::TokenKind::condition);
  EXPECT_EQ(seq.kinds[5], data::TokenKind::perturbation);
  EXPECT_EQ(seq.kinds.back(), data::TokenKind::action);
  EXPECT_THROW(data::build_token_sequence({r}, data::Condition::weighted_advantage, {28, 28, 1}), aat::DataError);

  data::TrajectoryRecord big;
  big.state = big.perturbation = Eigen::RowVectorXd::Zero(84 * 84);
  auto second = big;
  second.t = 1;
  EXPECT_EQ(data::build_token_sequence({big, second}, data::Condition::returns_to_go, {84, 84, 1}).size(), 78);
  second.t = 3;
  EXPECT_THROW(data::build_token_sequence({big, second}, data::Condition::returns_to_go, {84, 84, 1}), aat::DataError);
}

TEST(Serialization, EmptyDatasetHasOnlyTheManifest) {
  data::Dataset d;
  d.manifest.env_id = "grid";
  d.manifest.collector_mix = {{"random", 1.0}};
  const auto path = temp_path("empty");
  data::serialize(d, path);
  const auto text = read_file(path);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  EXPECT_NE(text.find("\"schema_version\":1"), std::string::npos);
  EXPECT_TRUE(data::deserialize(path).trajectories.empty());
  std::remove(path.c_str());
}

TEST(Serialization, MixFractionsMustSumToOne) {
  data::DatasetManifest m;
  m.collector_mix = {{"random", 0.6}, {"fgsm", 0.5}};
  EXPECT_THROW(m.validate(), aat::DataError);
}

TEST(Serialization, RoundTripPreservesEveryField) {
  env::GridPixels grid;
  auto pi = random_policy(3);
  auto d = data::collect_mix(grid, *pi, {{"random", 0.5}, {"fgsm", 0.5}}, 4, 1.5, 17);
  d.trajectories[1].wadv[3] = -0.25;
  const auto path = temp_path("roundtrip");
  data::serialize(d, path);
  const auto back = data::deserialize(path);
  ASSERT_EQ(back.trajectories.size(), d.trajectories.size());
  EXPECT_EQ(back.manifest.collector_mix, d.manifest.collector_mix);
  EXPECT_EQ(back.manifest.observation_shape, d.manifest.observation_shape);
  for (std::size_t i = 0; i < d.trajectories.size(); ++i) {
    const auto& a = d.trajectories[i];
    const auto& b = back.trajectories[i];
    EXPECT_EQ(a.collector, b.collector);
    EXPECT_EQ(a.seed, b.seed);
    EXPECT_EQ(a.actions, b.actions);
    EXPECT_EQ(a.rewards, b.rewards);
    EXPECT_EQ(a.rtg, b.rtg);
    EXPECT_EQ(a.wadv, b.wadv);
    EXPECT_TRUE((a.states.array() == b.states.array()).all());
    EXPECT_TRUE((a.perturbations.array() == b.perturbations.array()).all());
  }
  std::remove(path.c_str());
}

TEST(Serialization, MalformedLineReportsItsNumber) {
  const auto path = temp_path("bad");
  {
    data::Dataset d;
    d.manifest.collector_mix = {{"random", 1.0}};
    data::serialize(d, path);
    std::ofstream out(path, std::ios::app);
    out << "{\"collector\": [broken\n";
  }
  try {
    data::deserialize(path);
    FAIL() << "expected a parse error";
  } catch (const aat::ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::remove(path.c_str());
}

TEST(Collect, ZeroBudgetEqualsCleanRollout) {
  env::GridPixels grid;
  auto pi = random_policy(4);
  const auto d = data::collect(grid, *pi, data::Collector::random, 3, 0.0, 5);
  for (const auto& t : d.trajectories) {
    EXPECT_EQ(t.perturbations.cwiseAbs().maxCoeff(), 0.0);
    env::GridPixels g;
    auto obs = g.reset(t.seed);
    for (int s = 0; s < t.length(); ++s) {
      EXPECT_EQ(pi->act(obs), t.actions[s]);
      obs = g.step(t.actions[s]).observation;
    }
  }
}

TEST(Collect, BudgetHoldsAndRunsAreByteIdentical) {
  env::GridPixels grid;
  auto pi = random_policy(5);
  const std::map<std::string, double> mix = {{"random", 0.5}, {"fgsm", 0.5}};
  const auto a = data::collect_mix(grid, *pi, mix, 6, 1.5, 9);
  const auto b = data::collect_mix(grid, *pi, mix, 6, 1.5, 9);
  int fgsm = 0;
  for (const auto& t : a.trajectories) {
    fgsm += t.collector == "fgsm";
    for (int s = 0; s < t.length(); ++s) EXPECT_LE(t.perturbations.row(s).norm(), 1.5 + 1e-9);
    EXPECT_EQ(t.length(), 40);
    EXPECT_TRUE(t.truncated);
  }
  EXPECT_EQ(fgsm, 3);
  const auto pa = temp_path("det_a"), pb = temp_path("det_b");
  data::serialize(a, pa);
  data::serialize(b, pb);
  EXPECT_EQ(read_file(pa), read_file(pb));
  std::remove(pa.c_str());
  std::remove(pb.c_str());
}

TEST(Collect, FgsmNeedsWhiteBoxAccess) {
  env::GridPixels grid;
  aat::policy::QueryOnlyPolicy box(random_policy(6));
  EXPECT_THROW(data::collect(grid, box, data::Collector::fgsm, 1, 1.5, 1), aat::CapabilityError);
  EXPECT_NO_THROW(data::collect(grid, box, data::Collector::random, 1, 1.5, 1));
}
