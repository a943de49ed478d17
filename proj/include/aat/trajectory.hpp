#pragma once

// Attack trajectories, the log-base-1/2 returns-to-go transform, patch
// tokenisation and the JSON-Lines dataset format.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aat/env.hpp"
#include "aat/policy.hpp"

namespace aat::data {

using ad::Matrix;
using env::ObservationShape;
using env::Observation;

constexpr double kRewardFloor = 1e-3;
constexpr int kSchemaVersion = 1;

/// Affine map to [r_floor, 1]; ConfigError when r_max <= r_min.
double normalize_reward(double r_raw, double r_min, double r_max);
/// sum_{u >= from_t} log_{1/2}(r_u); DomainError unless every r_u is in (0, 1].
double returns_to_go(const std::vector<double>& rewards, std::size_t from_t);
/// All suffix sums at once.
std::vector<double> returns_to_go_all(const std::vector<double>& rewards);

struct PatchGrid {
  int patch_side = 14;
  int channels = 1;
  int height = 0;
  int width = 0;
  Matrix patches;  // [X x patch_side^2 * channels], row-major patch order, HWC inside a patch

  int count() const { return static_cast<int>(patches.rows()); }
};

/// `image` is a flattened [H x W x C] array.
PatchGrid patchify(const Eigen::Ref<const Eigen::RowVectorXd>& image, const ObservationShape& shape, int patch_side);
Observation unpatchify(const PatchGrid& grid);
int patch_count(const ObservationShape& shape, int patch_side);

struct TrajectoryRecord {
  int t = 0;
  Observation state;
  int action = 0;
  Observation perturbation;
  double reward = 0.0;
  double returns_to_go = 0.0;
  std::optional<double> weighted_advantage;
};

/// One episode stored column-wise.
struct Trajectory {
  std::string collector;
  std::uint64_t seed = 0;
  bool terminal = true;      // the last step ends the episode (truncation counts as terminal)
  bool truncated = false;    // ended by the horizon rather than by the environment
  Matrix states;             // [T x n]
  Matrix perturbations;      // [T x n]
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<double> rtg;
  std::vector<std::optional<double>> wadv;

  int length() const { return static_cast<int>(actions.size()); }
  TrajectoryRecord record(int t) const;
  /// Throws DataError when column lengths disagree.
  void validate() const;
};

struct RewardNormalization {
  double r_min = 0.0;
  double r_max = 1.0;
};

struct DatasetManifest {
  std::string env_id;
  std::map<std::string, double> collector_mix;
  int episode_count = 0;
  double epsilon = 1.5;
  std::uint64_t seed = 0;
  std::map<std::string, RewardNormalization> reward_normalization;
  ObservationShape observation_shape;
  int num_actions = 0;
  std::string config_hash;  // of the run that produced the file; may be empty

  /// Throws DataError unless the mix fractions sum to 1 within 1e-9.
  void validate() const;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Trajectory> trajectories;

  std::size_t num_steps() const;
};

enum class Condition { returns_to_go, weighted_advantage, ordinary_advantage };

Condition parse_condition(const std::string& s);
std::string to_string(Condition c);

enum class TokenKind { condition, patch, perturbation, action };

/// Raw (un-embedded) token stream: per step [condition, patch_1..patch_X,
/// perturbation, action].
struct TokenSequence {
  int steps = 0;
  int patches_per_step = 0;
  int patch_side = 14;
  ObservationShape shape;
  std::vector<double> conditions;   // [T]
  std::vector<Matrix> patches;      // T x [X x patch_dim]
  Matrix perturbations;             // [T x n]
  std::vector<int> actions;         // [T]
  std::vector<TokenKind> kinds;     // [T * (X + 3)]

  int tokens_per_step() const { return patches_per_step + 3; }
  int size() const { return static_cast<int>(kinds.size()); }
};

TokenSequence build_token_sequence(const std::vector<TrajectoryRecord>& records, Condition condition,
                                   const ObservationShape& shape, int patch_side = 14);

/// Line 0 is the manifest; one trajectory per following line.
void serialize(const Dataset& dataset, const std::string& path);
Dataset deserialize(const std::string& path);
nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
nlohmann::json trajectory_to_json(const Trajectory& t);
Trajectory trajectory_from_json(const nlohmann::json& j);

enum class Collector { random, fgsm };

Collector parse_collector(const std::string& s);
std::string to_string(Collector c);

/// Perturbation for one state; always inside the L2 ball of radius `epsilon`.
Observation collector_perturbation(Collector collector, const policy::Policy& policy, const Observation& state,
                                   double epsilon, ad::Rng& rng);

/// Rolls out `policy` on perturbed observations. Episode i uses seed
/// derive_seed(seed, i); rewards and returns-to-go come from the perturbed run.
Dataset collect(env::Environment& environment, const policy::Policy& policy, Collector collector, int episodes,
                double epsilon, std::uint64_t seed);
/// Deterministic mix: the first round(f_1 * N) episodes use collector 1, and so on.
Dataset collect_mix(env::Environment& environment, const policy::Policy& policy,
                    const std::map<std::string, double>& mix, int episodes, double epsilon, std::uint64_t seed);

}  // namespace aat::data
