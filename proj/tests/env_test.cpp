#include <gtest/gtest.h>

#include <cstring>

#include "aat/env.hpp"
#include "aat/errors.hpp"
#include "aat/policy.hpp"
#include "aat/trajectory.hpp"

using aat::ad::Matrix;
using aat::ad::Rng;
namespace env = aat::env;
namespace policy = aat::policy;

TEST(DpValue, MyopicDiscount) {
  Rng rng(1);
  auto mdp = env::ChainMDP::random(4, 3, 0.0, rng);
  const Matrix pi = env::random_policy(4, 3, rng);
  const auto v = env::dp_value(mdp, pi);
  for (int s = 0; s < 4; ++s) EXPECT_NEAR(v(s), pi.row(s).dot(mdp.rewards.row(s)), 1e-14);
}

TEST(DpValue, AbsorbingStateIsGeometricSeries) {
  env::ChainMDP mdp;
  mdp.n_states = 1;
  mdp.n_actions = 1;
  mdp.gamma = 0.5;
  mdp.transitions = {Matrix::Ones(1, 1)};
  mdp.rewards = Matrix::Ones(1, 1);
  EXPECT_NEAR(env::dp_value(mdp, Matrix::Ones(1, 1))(0), 2.0, 1e-14);
}

TEST(DpValue, SymmetricTwoStateMdpHasEqualValues) {
  env::ChainMDP mdp;
  mdp.n_states = 2;
  mdp.n_actions = 2;
  mdp.gamma = 0.9;
  Matrix stay(2, 2), swap(2, 2);
  stay << 1, 0, 0, 1;
  swap << 0, 1, 1, 0;
  mdp.transitions = {stay, swap};
  mdp.rewards = Matrix::Constant(2, 2, 0.5);
  mdp.rewards(0, 0) = mdp.rewards(1, 0) = 0.8;
  const auto v = env::dp_value(mdp, env::uniform_policy(2, 2));
  EXPECT_NEAR(v(0), v(1), 1e-12);
}

TEST(DpValue, ResidualAndDomain) {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    auto mdp = env::ChainMDP::random(6, 3, 0.95, rng);
    const Matrix pi = env::random_policy(6, 3, rng);
    EXPECT_LE(env::bellman_residual(mdp, pi, env::dp_value(mdp, pi)), 1e-10);
  }
  auto mdp = env::ChainMDP::chain();
  mdp.gamma = 1.0;
  EXPECT_THROW(env::dp_value(mdp, env::uniform_policy(6, 2)), aat::DomainError);
  mdp.horizon = 5;  // finite horizon allows gamma = 1
  EXPECT_NO_THROW(env::dp_value(mdp, env::uniform_policy(6, 2)));
}

TEST(ChainMDP, TransitionRowsAreDistributions) {
  Rng rng(3);
  for (const auto& mdp : {env::ChainMDP::chain(), env::ChainMDP::random(5, 3, 0.9, rng)}) {
    EXPECT_NO_THROW(mdp.validate());
    for (const auto& p : mdp.transitions)
      for (int s = 0; s < mdp.n_states; ++s) EXPECT_NEAR(p.row(s).sum(), 1.0, 1e-12);
  }
}

TEST(GridPixels, RenderIsPureAndInjective) {
  env::GridPixels grid;
  std::vector<env::Observation> images;
  for (auto c : grid.layout().start_cells()) images.push_back(grid.render(c));
  images.push_back(grid.render(grid.layout().goal()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    EXPECT_EQ(images[i].size(), 784);
    EXPECT_GE(images[i].minCoeff(), 0.0);
    EXPECT_LE(images[i].maxCoeff(), 1.0);
    for (std::size_t j = i + 1; j < images.size(); ++j) EXPECT_GT((images[i] - images[j]).cwiseAbs().maxCoeff(), 0.0);
  }
  const auto a = grid.render({0, 0});
  const auto b = grid.render({0, 0});
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * 784), 0);
  EXPECT_EQ(aat::data::patchify(a, grid.observation_shape(), 14).count(), 4);
}

// Value iteration over cells is an independent route to shortest paths.
TEST(GridPixels, BfsMatchesValueIteration) {
  env::GridPixels grid;
  const auto& layout = grid.layout();
  std::vector<int> dist(layout.height() * layout.width(), 1000);
  const auto goal = layout.goal();
  dist[goal.row * layout.width() + goal.col] = 0;
  for (int sweep = 0; sweep < 40; ++sweep) {
    for (auto c : layout.start_cells()) {
      for (int a = 0; a < 4; ++a) {
        const auto n = grid.move(c, a);
        int& d = dist[c.row * layout.width() + c.col];
        d = std::min(d, dist[n.row * layout.width() + n.col] + 1);
      }
    }
  }
  for (auto c : layout.start_cells()) {
    const int k = dist[c.row * layout.width() + c.col];
    EXPECT_EQ(grid.shortest_path(c), k);
    EXPECT_NEAR(grid.oracle_return(c), 0.1 * (k - 1) + 1.0 * (41 - k), 1e-12);
  }
}

TEST(GridPixels, DynamicsAndDeterminism) {
  env::GridPixels grid;
  auto first = grid.reset(42);
  const auto start = grid.agent();
  std::vector<double> rewards;
  for (int t = 0; t < 40; ++t) rewards.push_back(grid.step(t % 4).reward);
  auto again = grid.reset(42);
  EXPECT_EQ(grid.agent(), start);
  EXPECT_TRUE((first.array() == again.array()).all());
  for (int t = 0; t < 40; ++t) {
    auto s = grid.step(t % 4);
    EXPECT_EQ(s.reward, rewards[t]);
    EXPECT_EQ(s.done, t == 39);
    EXPECT_TRUE(s.reward == 0.1 || s.reward == 1.0);
  }
  // Bumping a wall keeps the agent in place; the goal absorbs.
  EXPECT_EQ(grid.move({0, 0}, env::up), (env::Cell{0, 0}));
  EXPECT_EQ(grid.move(grid.layout().goal(), env::left), grid.layout().goal());
}

TEST(GridPixels, LayoutValidation) {
  EXPECT_THROW(env::GridLayout({{"..."}}).validate(), aat::ConfigError);
  EXPECT_THROW(env::make_environment("atari"), aat::ConfigError);
  EXPECT_EQ(env::make_environment("grid")->id(), "grid");
  EXPECT_EQ(env::make_environment("chain")->observation_shape().size(), 6);
}

TEST(ToyPolicy, ProbabilitiesSumToOne) {
  Rng rng(4);
  policy::ToyPolicy p(784, 4, policy::TrainingAlgorithm::q_learning, rng);
  env::GridPixels grid;
  Matrix obs(3, 784);
  for (int i = 0; i < 3; ++i) obs.row(i) = grid.render(grid.layout().start_cells()[i]);
  const Matrix probs = p.probabilities(obs);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(probs.row(i).sum(), 1.0, 1e-6);
}

TEST(ToyPolicy, QueryOnlyWrapperBlocksGradients) {
  Rng rng(5);
  auto inner = std::make_shared<policy::ToyPolicy>(784, 4, policy::TrainingAlgorithm::q_learning, rng);
  policy::QueryOnlyPolicy box(inner);
  env::GridPixels grid;
  const auto obs = grid.reset(1);
  EXPECT_EQ(box.act(obs), inner->act(obs));
  EXPECT_EQ(box.action_queries(), 1u);
  EXPECT_THROW(box.nll_input_gradient(obs, 0), aat::CapabilityError);
  EXPECT_EQ(box.gradient_attempts(), 1u);
  EXPECT_NO_THROW(inner->nll_input_gradient(obs, 0));
}

TEST(ToyPolicy, QLearningReachesOracleThreshold) {
  env::GridPixels grid;
  policy::TrainOptions opt;
  auto result = policy::train_toy_policy(grid, policy::TrainingAlgorithm::q_learning, opt, 11);
  EXPECT_TRUE(result.reached_threshold) << result.report;

  Rng rng(6);
  policy::ToyPolicy untrained(784, 4, policy::TrainingAlgorithm::q_learning, rng);
  env::GridPixels g2;
  const auto base = policy::evaluate_policy(g2, untrained, 20, 3);
  EXPECT_LT(base.mean_return, base.mean_oracle);

  const auto a = policy::evaluate_policy(g2, result.policy, 20, 99);
  const auto b = policy::evaluate_policy(g2, result.policy, 20, 99);
  EXPECT_EQ(a.returns, b.returns);

  const auto restored = policy::ToyPolicy::from_json(result.policy.to_json());
  EXPECT_EQ(policy::evaluate_policy(g2, restored, 20, 99).returns, a.returns);
}
