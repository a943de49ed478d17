#pragma once

// Advantage predictor F_phi(s): estimates the in-sample maximum weighted
// advantage of a state from a finite candidate set of perturbations.

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

#include "aat/mscsa.hpp"
#include "aat/trajectory.hpp"
#include "aat/value.hpp"

namespace aat::predictor {

using ad::Matrix;
using ad::Rng;
using ad::Tape;
using ad::Var;

struct AdvantageCandidateSet {
  Eigen::RowVectorXd state;
  int action = 0;
  Matrix candidates;       // [N_c x n]
  Eigen::VectorXd logits;  // Lambda_j
  Eigen::VectorXd mu;      // softmax(Lambda)
};

/// Max-subtracted softmax. DataError on an empty vector.
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);
/// Lambda_j = weighted advantage of (state, action, candidate_j); the raw
/// advantage when `weighted` is false.
AdvantageCandidateSet candidate_mu(const Eigen::RowVectorXd& state, int action, const Matrix& candidates,
                                   const value::ValueHeads& heads, bool weighted = true);
/// Candidate set from precomputed logits (no value heads involved).
AdvantageCandidateSet candidate_mu(const Eigen::VectorXd& logits);
/// -sum mu log mu, with 0 log 0 = 0.
double entropy(const Eigen::VectorXd& mu);

enum class TargetRule { max_product, argmax_mu };

TargetRule parse_target_rule(const std::string& s);
std::string to_string(TargetRule r);

/// max_j mu_j Lambda_j (default) or Lambda at argmax mu.
double regression_target(const AdvantageCandidateSet& set, TargetRule rule = TargetRule::max_product);

enum class Architecture { linear, encoded };

Architecture parse_architecture(const std::string& s);
std::string to_string(Architecture a);

struct PredictorConfig {
  double kappa = 0.1;
  int neighbors = 8;
  int proposals = 8;
  double proposal_scale = 0.25;  // expected proposal norm as a fraction of epsilon
  TargetRule rule = TargetRule::max_product;
  Architecture architecture = Architecture::encoded;
  int model_dim = 32;
  int hidden = 64;
  int patch_side = 14;
  int batch_size = 64;
  int max_targets = 4000;  // states drawn from the dataset to build regression targets
  double lambda = 0.5;     // clip interval is (-1/lambda, 1/lambda)
  bool weighted = true;    // false: targets are raw advantages and nothing is clipped

  void validate() const;
};

class AdvantagePredictor {
 public:
  AdvantagePredictor() = default;
  AdvantagePredictor(const env::ObservationShape& shape, PredictorConfig config, Rng& rng);

  /// Unclipped F_phi for [N x n] states, [N x 1].
  Var forward(Tape& tape, Var states) const;
  Eigen::VectorXd raw(const Matrix& states) const;
  /// Clipped to +-(1/lambda - 1e-6) when weighted.
  double predict_max_advantage(const Eigen::RowVectorXd& state) const;
  double clip(double value) const;

  void parameters(ad::ParameterRefs& out);
  void zero();
  const PredictorConfig& config() const { return config_; }
  PredictorConfig& config() { return config_; }
  const env::ObservationShape& shape() const { return shape_; }

  nlohmann::json to_json() const;
  static AdvantagePredictor from_json(const nlohmann::json& j);

 private:
  env::ObservationShape shape_;
  PredictorConfig config_;
  nn::Linear linear_;
  seq::InputEmbedding embedding_;
  nn::Mlp head_;
};

/// Finds dataset perturbations at the nearest states (raw L2) and adds
/// Gaussian proposals projected to the epsilon ball.
class CandidateSampler {
 public:
  CandidateSampler(const data::Dataset& dataset, const PredictorConfig& config);

  Matrix candidates(const Eigen::RowVectorXd& state, Rng& rng) const;

 private:
  const data::Dataset* dataset_;
  PredictorConfig config_;
  double epsilon_;
  Matrix unique_states_;                                // distinct states
  std::vector<std::vector<std::pair<int, int>>> groups_;  // records per distinct state
};

struct PredictorTargets {
  Matrix states;
  Eigen::VectorXd targets;
  Eigen::VectorXd entropies;
};

PredictorTargets build_targets(const data::Dataset& dataset, const value::ValueHeads& heads,
                               const PredictorConfig& config, Rng& rng);

struct PredictorReport {
  std::vector<double> loss;      // regression - kappa * entropy
  std::vector<double> regression;
  double mean_entropy = 0.0;
};

/// Squared error to fixed targets minus kappa times the (constant) mean entropy.
PredictorReport fit(AdvantagePredictor& predictor, const PredictorTargets& targets, int steps, double lr, Rng& rng);
PredictorReport train_predictor(const data::Dataset& dataset, const value::ValueHeads& heads,
                                AdvantagePredictor& predictor, int steps, double lr, Rng& rng);

}  // namespace aat::predictor
