#pragma once

// Expectile-regression value heads: Q(s, a, delta) and V(s, a), the
// advantage A = Q - V and its weighted form A / (1 + lambda |A|).

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "aat/nn.hpp"
#include "aat/trajectory.hpp"

namespace aat::value {

using ad::Matrix;
using ad::Rng;
using ad::Tape;
using ad::Var;

/// |sigma - 1(nu < 0)| * nu^2. DomainError unless sigma is in (0, 1).
double expectile_loss(double nu, double sigma);
/// Batch mean of the expectile loss over the entries of `nu`.
Var expectile_loss(Var nu, double sigma);
/// argmin_v sum_i L_sigma(q_i - v), solved exactly.
double expectile(const std::vector<double>& samples, double sigma);

/// A / (1 + lambda |A|). DomainError when lambda <= 0.
double weighted_advantage(double advantage, double lambda);

enum class RewardSignal { attacker, victim };

RewardSignal parse_reward_signal(const std::string& s);
std::string to_string(RewardSignal r);

struct ValueConfig {
  double gamma = 0.99;
  double sigma = 0.9;
  double lambda = 0.5;
  int target_refresh = 100;
  std::vector<int> hidden = {64, 64};
  /// attacker: log_{1/2} of the normalised victim reward; victim: the reward itself.
  RewardSignal reward = RewardSignal::attacker;
  int batch_size = 128;

  void validate() const;
};

struct AdvantagePair {
  double raw = 0.0;
  double weighted = 0.0;
};

/// One batch of transitions (s, a, delta, r, s', a', terminal).
struct TransitionBatch {
  Matrix states;
  std::vector<int> actions;
  Matrix perturbations;
  Eigen::VectorXd rewards;  // already mapped through the reward signal
  Matrix next_states;
  std::vector<int> next_actions;
  Eigen::VectorXd live;     // 0 on terminal transitions

  int size() const { return static_cast<int>(actions.size()); }
};

class ValueHeads {
 public:
  ValueHeads() = default;
  /// `delta_scale` multiplies perturbations before they enter Q.
  ValueHeads(int observation_size, int num_actions, ValueConfig config, double delta_scale, Rng& rng);

  Var q(Tape& tape, Var states, const std::vector<int>& actions, Var perturbations, bool frozen = false) const;
  Var v(Tape& tape, Var states, const std::vector<int>& actions, bool frozen = false) const;
  Eigen::VectorXd q_values(const Matrix& states, const std::vector<int>& actions, const Matrix& perturbations) const;
  Eigen::VectorXd v_values(const Matrix& states, const std::vector<int>& actions) const;

  AdvantagePair advantage(const Eigen::RowVectorXd& state, int action, const Eigen::RowVectorXd& perturbation) const;
  Eigen::VectorXd advantages(const Matrix& states, const std::vector<int>& actions, const Matrix& perturbations) const;

  /// Squared TD error against r + gamma * live * V(s', a') with V held fixed.
  Var q_loss(Tape& tape, const TransitionBatch& batch) const;
  /// Expectile loss of Q_target(s, a, delta) - V(s, a).
  Var v_loss(Tape& tape, const TransitionBatch& batch) const;

  void refresh_target() { q_target_ = q_net_; }
  void zero();
  void q_parameters(ad::ParameterRefs& out) { q_net_.parameters(out); }
  void v_parameters(ad::ParameterRefs& out) { v_net_.parameters(out); }

  const ValueConfig& config() const { return config_; }
  ValueConfig& config() { return config_; }
  int observation_size() const { return observation_size_; }
  int num_actions() const { return num_actions_; }
  double delta_scale() const { return delta_scale_; }
  std::int64_t step_count() const { return step_count_; }
  void add_steps(std::int64_t n) { step_count_ += n; }
  nn::Mlp& q_network() { return q_net_; }
  nn::Mlp& v_network() { return v_net_; }

  nlohmann::json to_json() const;
  static ValueHeads from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static ValueHeads load(const std::string& path);

 private:
  Matrix one_hot(const std::vector<int>& actions) const;

  int observation_size_ = 0;
  int num_actions_ = 0;
  ValueConfig config_;
  double delta_scale_ = 1.0;
  nn::Mlp q_net_;
  nn::Mlp q_target_;
  nn::Mlp v_net_;
  std::int64_t step_count_ = 0;
};

/// Flat index of every (trajectory, step) pair.
struct TransitionIndex {
  std::vector<std::pair<int, int>> entries;
  int truncated_terminals = 0;  // horizon cut-offs treated as terminal

  static TransitionIndex build(const data::Dataset& dataset);
};

TransitionBatch make_batch(const data::Dataset& dataset, const TransitionIndex& index,
                           const std::vector<std::size_t>& picks, const ValueConfig& config);

struct TrainReport {
  std::vector<double> q_loss;
  std::vector<double> v_loss;
  int truncated_terminals = 0;
};

TrainReport train_q(const data::Dataset& dataset, ValueHeads& heads, int steps, double lr, Rng& rng);
TrainReport train_v(const data::Dataset& dataset, ValueHeads& heads, int steps, double lr, Rng& rng);
/// Alternates one Q and one V update per step; the Q snapshot used by V is
/// refreshed every `target_refresh` steps.
TrainReport train_stage1(const data::Dataset& dataset, ValueHeads& heads, int steps, double lr, Rng& rng);

/// Fills every record's advantage: weighted (default) or raw A.
void annotate_dataset(data::Dataset& dataset, const ValueHeads& heads, bool weighted = true);

}  // namespace aat::value
