#pragma once

// Online attack loop: history buffers D_s, D_a, D_delta feed the decoder one
// step at a time, and the victim acts on s + delta.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "aat/generator.hpp"
#include "aat/predictor.hpp"

namespace aat::attack {

using env::Observation;

enum class AccessMode { white_box, black_box };

std::string to_string(AccessMode m);

enum class BufferEvent { state, perturbation, action };

struct StepTrace {
  int episode = 0;
  int t = 0;
  double reward = 0.0;
  double delta_norm = 0.0;
  double latency_ms = 0.0;
  double condition = 0.0;
};

class AttackSession {
 public:
  /// `target` is wrapped in a QueryOnlyPolicy for black-box sessions.
  AttackSession(std::shared_ptr<const gen::GeneratorModel> generator,
                std::shared_ptr<const predictor::AdvantagePredictor> predictor,
                std::shared_ptr<const policy::Policy> target, double epsilon, AccessMode mode);

  /// Clears the buffers. `rtg_start` seeds the returns-to-go condition.
  void begin_episode(double rtg_start = 0.0);
  /// Appends s_t to D_s and returns the perturbation for it (one decoder pass).
  Observation perturb(const Observation& state);
  /// Appends the action and perturbation of the current step.
  void record(int action, const Observation& delta, double attacker_reward);

  const policy::Policy& target() const { return *target_; }
  AccessMode mode() const { return mode_; }
  double epsilon() const { return epsilon_; }
  int capacity() const { return capacity_; }
  std::size_t states_size() const { return states_.size(); }
  std::size_t actions_size() const { return actions_.size(); }
  std::size_t perturbations_size() const { return perturbations_.size(); }
  const std::vector<BufferEvent>& events() const { return events_; }
  std::uint64_t forward_passes() const { return forward_passes_; }
  double last_latency_ms() const { return last_latency_ms_; }
  double last_condition() const { return conditions_.empty() ? 0.0 : conditions_.back(); }
  /// Gradient attempts against the target; always 0 for white-box sessions.
  std::uint64_t target_gradient_attempts() const;
  const gen::GeneratorModel& generator() const { return *generator_; }

 private:
  double next_condition(const Observation& state) const;

  std::shared_ptr<const gen::GeneratorModel> generator_;
  std::shared_ptr<const predictor::AdvantagePredictor> predictor_;
  std::shared_ptr<const policy::Policy> target_;
  std::shared_ptr<const policy::QueryOnlyPolicy> wall_;
  double epsilon_;
  AccessMode mode_;
  int capacity_;
  std::deque<Observation> states_;
  std::deque<int> actions_;
  std::deque<Observation> perturbations_;
  std::deque<double> conditions_;
  std::vector<BufferEvent> events_;
  int t_ = 0;
  double rtg_ = 0.0;
  std::uint64_t forward_passes_ = 0;
  double last_latency_ms_ = 0.0;
};

/// The target is only queried for actions; training used `substitute`.
AttackSession black_box_session(const policy::Policy& substitute,
                                std::shared_ptr<const policy::Policy> target,
                                std::shared_ptr<const gen::GeneratorModel> generator,
                                std::shared_ptr<const predictor::AdvantagePredictor> predictor, double epsilon);

struct ReturnStats {
  std::vector<double> returns;
  double mean = 0.0;
  double stddev = 0.0;
};

ReturnStats summarize(std::vector<double> returns);

struct AttackReport {
  std::string env_id;
  std::string policy_id;
  std::string mode;
  std::string condition;
  int episodes = 0;
  double epsilon = 0.0;
  ReturnStats attacked;
  ReturnStats clean;
  double reduction = 0.0;
  double mean_delta_norm = 0.0;
  double max_delta_norm = 0.0;
  double mean_latency_ms = 0.0;
  std::uint64_t forward_passes = 0;
  std::uint64_t total_steps = 0;
  std::uint64_t budget_violations = 0;
  std::uint64_t target_gradient_attempts = 0;
  std::vector<StepTrace> trace;
};

/// Episode i uses seed derive_seed(seed, i), like run_clean.
ReturnStats run_clean(env::Environment& environment, const policy::Policy& policy, int episodes, std::uint64_t seed);
/// `rtg_start` is the initial returns-to-go target (ignored for advantage conditions).
AttackReport run_attack(AttackSession& session, env::Environment& environment, int episodes, std::uint64_t seed,
                        double rtg_start = 0.0);

nlohmann::json report_to_json(const AttackReport& r);
void write_report(const AttackReport& r, const std::string& path);
/// t, reward, ||delta||, latency_ms per step.
/// A non-empty `config_hash` is written as a leading `# config_hash=` line.
void write_trace_csv(const AttackReport& r, const std::string& path, const std::string& config_hash = "");

}  // namespace aat::attack
