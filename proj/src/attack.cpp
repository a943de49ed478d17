#include "aat/attack.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "aat/errors.hpp"

namespace aat::attack {

std::string to_string(AccessMode m) { return m == AccessMode::white_box ? "white_box" : "black_box"; }

AttackSession::AttackSession(std::shared_ptr<const gen::GeneratorModel> generator,
                             std::shared_ptr<const predictor::AdvantagePredictor> predictor,
                             std::shared_ptr<const policy::Policy> target, double epsilon, AccessMode mode)
    : generator_(std::move(generator)),
      predictor_(std::move(predictor)),
      epsilon_(epsilon),
      mode_(mode),
      capacity_(generator_ ? generator_->config().context_steps : 0) {
  if (!generator_ || !target) throw ConfigError("attack session: generator and target are required");
  if (!(epsilon_ >= 0.0)) throw ConfigError("attack session: epsilon must be non-negative");
  if (target->input_size() != generator_->shape().size()) {
    throw ConfigError("attack session: target input size does not match the generator's observation shape");
  }
  const bool advantage = generator_->config().condition != data::Condition::returns_to_go;
  if (advantage && !predictor_) throw ConfigError("attack session: advantage conditioning needs a predictor");
  if (mode_ == AccessMode::black_box) {
    wall_ = std::dynamic_pointer_cast<const policy::QueryOnlyPolicy>(target);
    if (!wall_) wall_ = std::make_shared<policy::QueryOnlyPolicy>(target);
    target_ = wall_;
  } else {
    target_ = std::move(target);
  }
}

void AttackSession::begin_episode(double rtg_start) {
  states_.clear();
  actions_.clear();
  perturbations_.clear();
  conditions_.clear();
  events_.clear();
  t_ = 0;
  rtg_ = rtg_start;
}

double AttackSession::next_condition(const Observation& state) const {
  if (generator_->config().condition == data::Condition::returns_to_go) return rtg_;
  return predictor_->predict_max_advantage(state);
}

Observation AttackSession::perturb(const Observation& state) {
  if (state.size() != generator_->shape().size()) throw ShapeError("attack: observation width mismatch");
  states_.push_back(state);
  conditions_.push_back(next_condition(state));
  events_.push_back(BufferEvent::state);
  if (static_cast<int>(states_.size()) > capacity_) {
    states_.pop_front();
    conditions_.pop_front();
  }
  // Earlier steps come from the buffers; the current step's action and
  // perturbation slots are zero-filled.
  std::vector<data::TrajectoryRecord> records;
  const std::size_t n = states_.size();
  const std::size_t history = n - 1;
  for (std::size_t i = 0; i < n; ++i) {
    data::TrajectoryRecord r;
    r.t = static_cast<int>(i);
    r.state = states_[i];
    r.returns_to_go = conditions_[i];
    r.weighted_advantage = conditions_[i];
    if (i < history) {
      // D_a and D_delta may hold one more entry than the trimmed D_s window.
      const std::size_t off = actions_.size() - history;
      r.action = actions_[off + i];
      r.perturbation = perturbations_[off + i];
    } else {
      r.action = -1;
      r.perturbation = Observation::Zero(state.size());
    }
    records.push_back(std::move(r));
  }
  const auto& cfg = generator_->config();
  const auto tokens = data::build_token_sequence(records, cfg.condition, generator_->shape(), cfg.patch_side);
  const auto start = std::chrono::steady_clock::now();
  Observation delta = generator_->forward_perturbation(tokens);
  last_latency_ms_ = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  ++forward_passes_;
  // The session budget may be tighter than the one the model was trained with.
  const double norm = delta.norm();
  if (norm > epsilon_) delta *= norm > 0.0 ? epsilon_ / norm : 0.0;
  return delta;
}

void AttackSession::record(int action, const Observation& delta, double attacker_reward) {
  actions_.push_back(action);
  perturbations_.push_back(delta);
  events_.push_back(BufferEvent::perturbation);
  events_.push_back(BufferEvent::action);
  if (static_cast<int>(actions_.size()) > capacity_) {
    actions_.pop_front();
    perturbations_.pop_front();
  }
  rtg_ -= attacker_reward;
  ++t_;
}

std::uint64_t AttackSession::target_gradient_attempts() const { return wall_ ? wall_->gradient_attempts() : 0; }

AttackSession black_box_session(const policy::Policy& substitute, std::shared_ptr<const policy::Policy> target,
                                std::shared_ptr<const gen::GeneratorModel> generator,
                                std::shared_ptr<const predictor::AdvantagePredictor> predictor, double epsilon) {
  if (!substitute.white_box()) throw CapabilityError("black-box session: the substitute must expose gradients");
  if (substitute.input_size() != target->input_size() || substitute.num_actions() != target->num_actions()) {
    throw ConfigError("black-box session: substitute and target disagree on input or action sizes");
  }
  return AttackSession(std::move(generator), std::move(predictor), std::move(target), epsilon,
                       AccessMode::black_box);
}

ReturnStats summarize(std::vector<double> returns) {
  ReturnStats s;
  s.returns = std::move(returns);
  if (s.returns.empty()) return s;
  const double n = static_cast<double>(s.returns.size());
  s.mean = std::accumulate(s.returns.begin(), s.returns.end(), 0.0) / n;
  double var = 0.0;
  for (double r : s.returns) var += (r - s.mean) * (r - s.mean);
  s.stddev = std::sqrt(var / n);
  return s;
}

ReturnStats run_clean(env::Environment& environment, const policy::Policy& policy, int episodes, std::uint64_t seed) {
  if (episodes <= 0) throw DataError("run_clean: at least one episode is required");
  std::vector<double> returns;
  for (int e = 0; e < episodes; ++e) {
    Observation obs = environment.reset(env::derive_seed(seed, static_cast<std::uint64_t>(e)));
    double total = 0.0;
    for (bool done = false; !done;) {
      auto step = environment.step(policy.act(obs));
      total += step.reward;
      obs = std::move(step.observation);
      done = step.done;
    }
    returns.push_back(total);
  }
  return summarize(std::move(returns));
}

AttackReport run_attack(AttackSession& session, env::Environment& environment, int episodes, std::uint64_t seed,
                        double rtg_start) {
  if (episodes <= 0) throw DataError("run_attack: at least one episode is required");
  const auto& gen = session.generator();
  if (!(environment.observation_shape() == gen.shape()) || environment.num_actions() != gen.num_actions()) {
    throw ConfigError("run_attack: environment '" + environment.id() + "' does not match the model's shapes");
  }
  AttackReport report;
  report.env_id = environment.id();
  report.policy_id = session.target().id();
  report.mode = to_string(session.mode());
  report.condition = data::to_string(gen.config().condition);
  report.episodes = episodes;
  report.epsilon = session.epsilon();
  const double r_min = environment.reward_min();
  const double r_max = environment.reward_max();
  const std::uint64_t passes_before = session.forward_passes();
  std::vector<double> attacked;
  double norm_sum = 0.0;
  double latency_sum = 0.0;
  for (int e = 0; e < episodes; ++e) {
    Observation obs = environment.reset(env::derive_seed(seed, static_cast<std::uint64_t>(e)));
    session.begin_episode(rtg_start);
    double total = 0.0;
    int t = 0;
    for (bool done = false; !done; ++t) {
      const Observation delta = session.perturb(obs);
      const int action = session.target().act(obs + delta);
      auto step = environment.step(action);
      session.record(action, delta, -std::log2(data::normalize_reward(step.reward, r_min, r_max)));
      const double norm = delta.norm();
      if (norm > session.epsilon() + 1e-9) ++report.budget_violations;
      report.max_delta_norm = std::max(report.max_delta_norm, norm);
      norm_sum += norm;
      latency_sum += session.last_latency_ms();
      report.trace.push_back({e, t, step.reward, norm, session.last_latency_ms(), session.last_condition()});
      total += step.reward;
      obs = std::move(step.observation);
      done = step.done;
    }
    attacked.push_back(total);
    report.total_steps += static_cast<std::uint64_t>(t);
  }
  report.attacked = summarize(std::move(attacked));
  report.clean = run_clean(environment, session.target(), episodes, seed);
  report.reduction = report.clean.mean > 0.0 ? 1.0 - report.attacked.mean / report.clean.mean : 0.0;
  report.mean_delta_norm = norm_sum / static_cast<double>(report.total_steps);
  report.mean_latency_ms = latency_sum / static_cast<double>(report.total_steps);
  report.forward_passes = session.forward_passes() - passes_before;
  report.target_gradient_attempts = session.target_gradient_attempts();
  return report;
}

nlohmann::json report_to_json(const AttackReport& r) {
  auto stats = [](const ReturnStats& s) {
    return nlohmann::json{{"mean", s.mean}, {"std", s.stddev}, {"returns", s.returns}};
  };
  return {
      {"schema_version", 1},
      {"env_id", r.env_id},
      {"policy_id", r.policy_id},
      {"mode", r.mode},
      {"condition", r.condition},
      {"episodes", r.episodes},
      {"epsilon", r.epsilon},
      {"attacked_return", stats(r.attacked)},
      {"clean_return", stats(r.clean)},
      {"reduction", r.reduction},
      {"mean_delta_l2", r.mean_delta_norm},
      {"max_delta_l2", r.max_delta_norm},
      {"mean_latency_ms", r.mean_latency_ms},
      {"forward_passes", r.forward_passes},
      {"total_steps", r.total_steps},
      {"budget_violations", r.budget_violations},
      {"target_gradient_attempts", r.target_gradient_attempts},
  };
}

void write_report(const AttackReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << report_to_json(r).dump(2) << "\n";
}

void write_trace_csv(const AttackReport& r, const std::string& path, const std::string& config_hash) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
  out << "episode,t,reward,delta_l2,latency_ms,condition\n";
  for (const StepTrace& s : r.trace) {
    out << s.episode << ',' << s.t << ',' << s.reward << ',' << s.delta_norm << ',' << s.latency_ms << ','
        << s.condition << "\n";
  }
}

}  // namespace aat::attack
