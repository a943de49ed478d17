#pragma once

// Target and substitute policies. A Policy maps flattened observations to
// action probabilities; white-box policies additionally expose differentiable
// logits. QueryOnlyPolicy hides everything except action queries.

#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>

#include "aat/env.hpp"
#include "aat/nn.hpp"

namespace aat::policy {

using ad::Matrix;
using ad::Rng;
using ad::Tape;
using ad::Var;
using env::Observation;

class Policy {
 public:
  virtual ~Policy() = default;

  virtual std::string id() const = 0;
  virtual int input_size() const = 0;
  virtual int num_actions() const = 0;
  /// Row-wise action distribution for [N x input_size] observations.
  virtual Matrix probabilities(const Matrix& observations) const = 0;
  /// Logits whose row-wise softmax is probabilities(); parameters are frozen.
  virtual Var logits(Tape& tape, Var observations) const = 0;
  virtual bool white_box() const { return true; }

  /// Greedy action (lowest index on ties).
  int act(const Observation& observation) const;
  /// Gradient of -log pi(action | s) with respect to s.
  Observation nll_input_gradient(const Observation& observation, int action) const;
};

enum class TrainingAlgorithm { q_learning, policy_gradient };

TrainingAlgorithm parse_training_algorithm(const std::string& s);
std::string to_string(TrainingAlgorithm a);

/// Two affine layers (input -> 64 -> actions) with ReLU between them.
class ToyPolicy : public Policy {
 public:
  ToyPolicy() = default;
  ToyPolicy(int input_size, int num_actions, TrainingAlgorithm algorithm, Rng& rng, int hidden = 64);

  std::string id() const override { return "toy-" + to_string(algorithm_); }
  int input_size() const override { return net_.in(); }
  int num_actions() const override { return net_.out(); }
  Matrix probabilities(const Matrix& observations) const override;
  Var logits(Tape& tape, Var observations) const override;

  /// Raw network output (Q-values for q_learning, logits otherwise).
  Matrix outputs(const Matrix& observations) const { return net_.apply(observations); }
  nn::Mlp& network() { return net_; }
  const nn::Mlp& network() const { return net_; }
  TrainingAlgorithm algorithm() const { return algorithm_; }
  /// Logits are `logit_scale * outputs`.
  double logit_scale() const { return logit_scale_; }

  nlohmann::json to_json() const;
  static ToyPolicy from_json(const nlohmann::json& j);

 private:
  nn::Mlp net_;
  TrainingAlgorithm algorithm_ = TrainingAlgorithm::q_learning;
  double logit_scale_ = 1.0;
};

/// Black-box view: action queries pass through, gradient access throws
/// CapabilityError. Counters make "no leak" checks observable.
class QueryOnlyPolicy : public Policy {
 public:
  explicit QueryOnlyPolicy(std::shared_ptr<const Policy> inner) : inner_(std::move(inner)) {}

  std::string id() const override { return inner_->id() + "/query-only"; }
  int input_size() const override { return inner_->input_size(); }
  int num_actions() const override { return inner_->num_actions(); }
  Matrix probabilities(const Matrix& observations) const override;
  Var logits(Tape& tape, Var observations) const override;
  bool white_box() const override { return false; }

  std::uint64_t action_queries() const { return queries_; }
  std::uint64_t gradient_attempts() const { return gradient_attempts_; }

 private:
  std::shared_ptr<const Policy> inner_;
  mutable std::atomic<std::uint64_t> queries_{0};
  mutable std::atomic<std::uint64_t> gradient_attempts_{0};
};

struct EvaluationResult {
  std::vector<double> returns;
  double mean_return = 0.0;
  double mean_oracle = 0.0;  // grid only; 0 elsewhere
};

/// Greedy rollouts with seeds derive_seed(seed, i).
EvaluationResult evaluate_policy(env::Environment& environment, const Policy& policy, int episodes, std::uint64_t seed);

struct TrainOptions {
  int episodes = 400;
  int batch_size = 32;
  double lr = 1e-3;
  double gamma = 0.9;
  int target_refresh = 100;
  int updates_per_step = 1;
  int eval_episodes = 20;
  double threshold = 0.9;  // fraction of the oracle return
};

struct TrainResult {
  ToyPolicy policy;
  EvaluationResult evaluation;
  bool reached_threshold = false;
  std::string report;
};

/// Trains on GridPixels. Failure to reach the threshold is reported, not thrown.
TrainResult train_toy_policy(const env::GridPixels& grid, TrainingAlgorithm algorithm, const TrainOptions& options,
                             std::uint64_t seed);

}  // namespace aat::policy
