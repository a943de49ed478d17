#pragma once

// Autoregressive perturbation decoder. Every timestep contributes the tokens
// [condition, patch_1..patch_X, perturbation, action]; the stack of MSCSA
// blocks reads delta_t out at the last patch token of step t, so the
// perturbation and action slots of step t are never visible to it.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "aat/mscsa.hpp"
#include "aat/policy.hpp"
#include "aat/trajectory.hpp"

namespace aat::gen {

using ad::Matrix;
using ad::NormKind;
using ad::Rng;
using ad::Tape;
using ad::Var;

struct GeneratorConfig {
  seq::EmbeddingConfig embedding;
  seq::ScaleConfig scales;
  int context_steps = 20;
  int patch_side = 14;
  double omega = 1.0;
  double epsilon = 1.5;
  NormKind norm = NormKind::l2;
  data::Condition condition = data::Condition::weighted_advantage;
  /// Multiplies the raw condition before it is embedded.
  double condition_scale = 1.0;
  int head_hidden = 128;
  int head_channels = 16;
  int head_stride = 4;
  int batch_size = 8;
  int segment_stride = 10;

  /// d=32, 4 heads, 2 layers: the size used for desk-scale runs.
  static GeneratorConfig desk();
  void validate() const;
};

nlohmann::json config_to_json(const GeneratorConfig& c);
GeneratorConfig config_from_json(const nlohmann::json& j);

struct LossReport {
  double action_loss = 0.0;
  double norm_loss = 0.0;
  double total = 0.0;
};

class GeneratorModel {
 public:
  GeneratorModel() = default;
  GeneratorModel(const data::ObservationShape& shape, int num_actions, GeneratorConfig config, Rng& rng);

  /// Perturbations for every step of `tokens`, each projected to the epsilon
  /// ball, [T x n]. `raw` (optional) receives the pre-projection head output.
  Var decode(Tape& tape, const data::TokenSequence& tokens, Var* raw = nullptr) const;
  /// One decoder pass in evaluation mode; returns delta for the last step.
  data::Observation forward_perturbation(const data::TokenSequence& history) const;
  std::uint64_t forward_count() const { return forward_count_; }
  void reset_forward_count() { forward_count_ = 0; }

  void parameters(ad::ParameterRefs& out);
  const GeneratorConfig& config() const { return config_; }
  GeneratorConfig& config() { return config_; }
  const data::ObservationShape& shape() const { return shape_; }
  int num_actions() const { return num_actions_; }
  int tokens_per_step() const { return patches_ + 3; }
  /// Windows of the MSCSA scales, measured in tokens.
  std::vector<int> token_windows() const;

  nlohmann::json to_json() const;
  static GeneratorModel from_json(const nlohmann::json& j);

 private:
  struct Block {
    seq::MscsaBlock attention;
    nn::LayerNormParams norm1;
    nn::Mlp feed_forward;
    nn::LayerNormParams norm2;
  };

  Var embed(Tape& tape, const data::TokenSequence& tokens) const;
  Var head(Tape& tape, Var readout) const;

  data::ObservationShape shape_;
  int num_actions_ = 0;
  int patches_ = 0;
  GeneratorConfig config_;
  nn::Linear condition_embed_;
  nn::Linear patch_embed_;
  nn::Linear perturbation_embed_;
  nn::Linear action_embed_;
  ad::Parameter positions_;
  nn::LayerNormParams embed_norm_;
  std::vector<Block> blocks_;
  nn::Linear head1_;
  nn::Linear head2_;
  ad::Parameter deconv_weight_;
  ad::Parameter deconv_bias_;
  mutable std::uint64_t forward_count_ = 0;
};

/// Sum over steps and actions of (pi(s + delta) - onehot(a))^2 for one
/// segment. Throws CapabilityError for policies without gradient access.
Var action_loss(Tape& tape, Var perturbations, const Matrix& states, const std::vector<int>& actions,
                const policy::Policy& victim);
/// Mean over rows of ||delta||; subgradient 0 at delta = 0.
Var norm_loss(Var perturbations, NormKind kind);

/// Contiguous steps [start, start + length) of one trajectory.
struct Segment {
  int trajectory = 0;
  int start = 0;
  int length = 0;
  double mean_condition = 0.0;
};

/// Draws segments with probability proportional to exp(omega * mean condition).
class SegmentSampler {
 public:
  SegmentSampler(std::vector<Segment> segments, double omega);

  std::size_t sample(Rng& rng) const;
  const std::vector<Segment>& segments() const { return segments_; }
  std::vector<double> probabilities() const;

 private:
  std::vector<Segment> segments_;
  std::vector<double> weights_;
};

/// Raw per-step condition signal of a trajectory (advantage or returns-to-go).
std::vector<double> condition_values(const data::Trajectory& trajectory, data::Condition condition);
/// Windows of `context` steps every `stride` steps; the tail window ends at the last step.
std::vector<Segment> make_segments(const data::Dataset& dataset, const GeneratorConfig& config);
data::TokenSequence segment_tokens(const data::Dataset& dataset, const Segment& segment, const GeneratorConfig& config);

/// L_a + L_norm over a batch of segments; L_a sums within a segment and
/// averages across segments, L_norm averages over every step.
Var generator_loss(Tape& tape, const GeneratorModel& model, const data::Dataset& dataset,
                   const std::vector<Segment>& batch, const policy::Policy& victim, LossReport* report = nullptr);

struct GeneratorReport {
  std::vector<LossReport> losses;
  double condition_scale = 1.0;
};

GeneratorReport train_generator(const data::Dataset& dataset, GeneratorModel& model, const policy::Policy& victim,
                                int steps, double lr, Rng& rng);

/// Central-difference check of the batch loss on at most `max_entries` parameter entries.
double gradient_check(GeneratorModel& model, const data::Dataset& dataset, const std::vector<Segment>& batch,
                      const policy::Policy& victim, Rng& rng, std::size_t max_entries = 200);

}  // namespace aat::gen
