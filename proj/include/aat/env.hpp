#pragma once

// Desk environments: a tabular chain MDP (exact oracles) and GridPixels, a
// 7x4-cell maze rendered to a 28x28 grayscale image.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "aat/autodiff.hpp"

namespace aat::env {

using ad::Matrix;
using ad::Rng;
using Observation = Eigen::RowVectorXd;

struct ObservationShape {
  int height = 1;
  int width = 1;
  int channels = 1;

  int size() const { return height * width * channels; }
  bool operator==(const ObservationShape& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string id() const = 0;
  virtual ObservationShape observation_shape() const = 0;
  virtual int num_actions() const = 0;
  virtual int horizon() const = 0;
  /// Raw reward range used for normalisation.
  virtual double reward_min() const { return 0.0; }
  virtual double reward_max() const { return 1.0; }

  /// Starts an episode; the initial state is a pure function of `seed`.
  virtual Observation reset(std::uint64_t seed) = 0;
  virtual StepResult step(int action) = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;
};

// ---------------------------------------------------------------------------
// Chain / tabular MDPs

struct ChainMDP {
  int n_states = 6;
  int n_actions = 2;
  std::vector<Matrix> transitions;  // per action, [S x S]; row s is P(.|s,a)
  Matrix rewards;                   // [S x A], entries in (0, 1]
  double gamma = 0.9;
  int horizon = 0;                  // 0: discounted infinite horizon

  /// Throws DomainError on invalid rows or rewards outside (0, 1].
  void validate() const;
  /// P_pi [S x S] and R_pi [S] for a tabular policy [S x A].
  Matrix policy_transitions(const Matrix& policy) const;
  Eigen::VectorXd policy_rewards(const Matrix& policy) const;

  /// Walk right to reach a rewarding end state; left moves back.
  static ChainMDP chain(int n_states = 6, double gamma = 0.9, double slip = 0.1);
  static ChainMDP random(int n_states, int n_actions, double gamma, Rng& rng);
};

/// Rows must be distributions. Throws DomainError otherwise.
void validate_tabular_policy(const Matrix& policy, int n_states, int n_actions);
Matrix uniform_policy(int n_states, int n_actions);
Matrix random_policy(int n_states, int n_actions, Rng& rng);

/// Exact evaluation. Infinite horizon: solves (I - gamma P_pi) V = R_pi.
/// Finite horizon: `horizon` steps of backward induction.
Eigen::VectorXd dp_value(const ChainMDP& mdp, const Matrix& policy);
/// max_s |R_pi + gamma P_pi V - V| (infinite horizon only).
double bellman_residual(const ChainMDP& mdp, const Matrix& policy, const Eigen::VectorXd& v);
/// Q[s][a] = R[s][a] + gamma sum_s' P(s'|s,a) V(s').
Matrix q_values(const ChainMDP& mdp, const Eigen::VectorXd& v);

/// ChainMDP as an episodic environment with one-hot observations.
class ChainEnv : public Environment {
 public:
  explicit ChainEnv(ChainMDP mdp, int horizon = 50);

  std::string id() const override { return "chain"; }
  ObservationShape observation_shape() const override { return {1, mdp_.n_states, 1}; }
  int num_actions() const override { return mdp_.n_actions; }
  int horizon() const override { return horizon_; }
  Observation reset(std::uint64_t seed) override;
  StepResult step(int action) override;
  std::unique_ptr<Environment> clone() const override { return std::make_unique<ChainEnv>(*this); }

  const ChainMDP& mdp() const { return mdp_; }
  int state() const { return state_; }

 private:
  Observation observe() const;

  ChainMDP mdp_;
  int horizon_;
  int state_ = 0;
  int t_ = 0;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// GridPixels

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell& o) const { return row == o.row && col == o.col; }
  bool operator!=(const Cell& o) const { return !(*this == o); }
};

/// Rows of '.', '#', 'G' (exactly one goal).
struct GridLayout {
  std::vector<std::string> rows;

  static GridLayout default_layout();
  static GridLayout from_json(const nlohmann::json& j);
  void validate() const;
  int height() const { return static_cast<int>(rows.size()); }
  int width() const { return rows.empty() ? 0 : static_cast<int>(rows.front().size()); }
  bool wall(Cell c) const;
  Cell goal() const;
  /// Non-wall, non-goal cells in row-major order.
  std::vector<Cell> start_cells() const;
};

enum GridAction { up = 0, down = 1, left = 2, right = 3 };

class GridPixels : public Environment {
 public:
  static constexpr int kImageSide = 28;
  static constexpr int kHorizon = 40;
  static constexpr double kStepReward = 0.1;
  static constexpr double kGoalReward = 1.0;
  static constexpr double kWallPixel = 0.3;
  static constexpr double kGoalPixel = 0.6;
  static constexpr double kAgentPixel = 1.0;

  explicit GridPixels(GridLayout layout = GridLayout::default_layout());

  std::string id() const override { return "grid"; }
  ObservationShape observation_shape() const override { return {kImageSide, kImageSide, 1}; }
  int num_actions() const override { return 4; }
  int horizon() const override { return kHorizon; }
  Observation reset(std::uint64_t seed) override;
  StepResult step(int action) override;
  std::unique_ptr<Environment> clone() const override { return std::make_unique<GridPixels>(*this); }

  /// Pure: the image only depends on the layout and the agent cell.
  Observation render(Cell agent) const;
  Cell agent() const { return agent_; }
  Cell start_cell(std::uint64_t seed) const;
  Cell move(Cell from, int action) const;
  /// Breadth-first shortest-path length to the goal; -1 when unreachable.
  int shortest_path(Cell from) const;
  /// Best achievable return from `from` within the horizon.
  double oracle_return(Cell from) const;
  const GridLayout& layout() const { return layout_; }

 private:
  GridLayout layout_;
  int cell_height_;
  int cell_width_;
  Cell agent_;
  int t_ = 0;
};

/// Registry ids: "chain", "grid". Options: {"layout": [...rows]} for grid.
std::unique_ptr<Environment> make_environment(const std::string& id, const nlohmann::json& options = {});
std::vector<std::string> registered_environments();

/// SplitMix64 mixing of (seed, index) into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace aat::env
