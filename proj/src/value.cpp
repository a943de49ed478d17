#include "aat/value.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "aat/errors.hpp"

namespace aat::value {

namespace {

void check_sigma(double sigma) {
  if (!(sigma > 0.0 && sigma < 1.0)) throw DomainError("expectile sigma must lie in (0, 1)");
}

double attacker_reward(double r, const data::RewardNormalization& norm) {
  return -std::log2(data::normalize_reward(r, norm.r_min, norm.r_max));
}

}  // namespace

double expectile_loss(double nu, double sigma) {
  check_sigma(sigma);
  return std::abs(sigma - (nu < 0.0 ? 1.0 : 0.0)) * nu * nu;
}

Var expectile_loss(Var nu, double sigma) {
  check_sigma(sigma);
  const Matrix weights = nu.value().unaryExpr([sigma](double x) { return x < 0.0 ? 1.0 - sigma : sigma; });
  return ad::mean(ad::mul(nu.tape()->constant(weights), ad::square(nu)));
}

double expectile(const std::vector<double>& samples, double sigma) {
  check_sigma(sigma);
  if (samples.empty()) throw DataError("expectile of an empty sample");
  std::vector<double> q = samples;
  std::sort(q.begin(), q.end());
  const std::size_t n = q.size();
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + q[i];
  // With k samples below v the first-order condition is linear in v.
  for (std::size_t k = 0; k <= n; ++k) {
    const double below = (1.0 - sigma) * prefix[k];
    const double above = sigma * (prefix[n] - prefix[k]);
    const double v = (below + above) / ((1.0 - sigma) * k + sigma * (n - k));
    if ((k == 0 || v >= q[k - 1]) && (k == n || v <= q[k])) return v;
  }
  return q[n / 2];
}

double weighted_advantage(double advantage, double lambda) {
  if (!(lambda > 0.0)) throw DomainError("weighted_advantage: lambda must be positive");
  return advantage / (1.0 + lambda * std::abs(advantage));
}

RewardSignal parse_reward_signal(const std::string& s) {
  if (s == "attacker") return RewardSignal::attacker;
  if (s == "victim") return RewardSignal::victim;
  throw ConfigError("unknown reward signal '" + s + "'");
}

std::string to_string(RewardSignal r) { return r == RewardSignal::attacker ? "attacker" : "victim"; }

void ValueConfig::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("value: gamma must lie in [0, 1)");
  if (!(sigma > 0.0 && sigma < 1.0)) throw ConfigError("value: sigma must lie in (0, 1)");
  if (!(lambda > 0.0)) throw ConfigError("value: lambda must be positive");
  if (target_refresh <= 0 || batch_size <= 0) throw ConfigError("value: refresh and batch size must be positive");
}

ValueHeads::ValueHeads(int observation_size, int num_actions, ValueConfig config, double delta_scale, Rng& rng)
    : observation_size_(observation_size),
      num_actions_(num_actions),
      config_(std::move(config)),
      delta_scale_(delta_scale),
      q_net_("value.q", 2 * observation_size + num_actions, config_.hidden, 1, rng),
      v_net_("value.v", observation_size + num_actions, config_.hidden, 1, rng) {
  config_.validate();
  q_target_ = q_net_;
}

Matrix ValueHeads::one_hot(const std::vector<int>& actions) const {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(actions.size()), num_actions_);
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (actions[i] < 0 || actions[i] >= num_actions_) throw DomainError("value: action out of range");
    m(static_cast<Eigen::Index>(i), actions[i]) = 1.0;
  }
  return m;
}

Var ValueHeads::q(Tape& tape, Var states, const std::vector<int>& actions, Var perturbations, bool frozen) const {
  Var x = ad::concat_cols({states, tape.constant(one_hot(actions)), ad::scale(perturbations, delta_scale_)});
  return frozen ? q_net_.forward_frozen(tape, x) : q_net_.forward(tape, x);
}

Var ValueHeads::v(Tape& tape, Var states, const std::vector<int>& actions, bool frozen) const {
  Var x = ad::concat_cols({states, tape.constant(one_hot(actions))});
  return frozen ? v_net_.forward_frozen(tape, x) : v_net_.forward(tape, x);
}

Eigen::VectorXd ValueHeads::q_values(const Matrix& states, const std::vector<int>& actions,
                                     const Matrix& perturbations) const {
  Matrix x(states.rows(), 2 * observation_size_ + num_actions_);
  x << states, one_hot(actions), delta_scale_ * perturbations;
  return q_net_.apply(x).col(0);
}

Eigen::VectorXd ValueHeads::v_values(const Matrix& states, const std::vector<int>& actions) const {
  Matrix x(states.rows(), observation_size_ + num_actions_);
  x << states, one_hot(actions);
  return v_net_.apply(x).col(0);
}

AdvantagePair ValueHeads::advantage(const Eigen::RowVectorXd& state, int action,
                                    const Eigen::RowVectorXd& perturbation) const {
  const double a = advantages(Matrix(state), {action}, Matrix(perturbation))(0);
  return {a, weighted_advantage(a, config_.lambda)};
}

Eigen::VectorXd ValueHeads::advantages(const Matrix& states, const std::vector<int>& actions,
                                       const Matrix& perturbations) const {
  return q_values(states, actions, perturbations) - v_values(states, actions);
}

Var ValueHeads::q_loss(Tape& tape, const TransitionBatch& batch) const {
  const Eigen::VectorXd next_v = v_values(batch.next_states, batch.next_actions);
  const Matrix target = batch.rewards + config_.gamma * batch.live.cwiseProduct(next_v);
  Var q = this->q(tape, tape.constant(batch.states), batch.actions, tape.constant(batch.perturbations));
  return ad::mean(ad::square(ad::sub(q, tape.constant(target))));
}

Var ValueHeads::v_loss(Tape& tape, const TransitionBatch& batch) const {
  Matrix x(batch.states.rows(), 2 * observation_size_ + num_actions_);
  x << batch.states, one_hot(batch.actions), delta_scale_ * batch.perturbations;
  const Matrix q_hat = q_target_.apply(x);
  Var v = this->v(tape, tape.constant(batch.states), batch.actions);
  return expectile_loss(ad::sub(tape.constant(q_hat), v), config_.sigma);
}

void ValueHeads::zero() {
  q_net_.zero();
  v_net_.zero();
  q_target_.zero();
}

nlohmann::json ValueHeads::to_json() const {
  ad::ParameterRefs q, v;
  const_cast<nn::Mlp&>(q_net_).parameters(q);
  const_cast<nn::Mlp&>(v_net_).parameters(v);
  return {{"manifest",
           {{"sigma", config_.sigma},
            {"lambda", config_.lambda},
            {"gamma", config_.gamma},
            {"step_count", step_count_},
            {"target_refresh", config_.target_refresh},
            {"hidden", config_.hidden},
            {"reward", to_string(config_.reward)},
            {"observation_size", observation_size_},
            {"num_actions", num_actions_},
            {"delta_scale", delta_scale_}}},
          {"q", nn::to_json(q)},
          {"v", nn::to_json(v)}};
}

ValueHeads ValueHeads::from_json(const nlohmann::json& j) {
  const auto& m = j.at("manifest");
  ValueConfig c;
  c.sigma = m.at("sigma").get<double>();
  c.lambda = m.at("lambda").get<double>();
  c.gamma = m.at("gamma").get<double>();
  c.target_refresh = m.at("target_refresh").get<int>();
  c.hidden = m.at("hidden").get<std::vector<int>>();
  c.reward = parse_reward_signal(m.at("reward").get<std::string>());
  Rng rng(0);
  ValueHeads h(m.at("observation_size").get<int>(), m.at("num_actions").get<int>(), c,
               m.at("delta_scale").get<double>(), rng);
  h.step_count_ = m.at("step_count").get<std::int64_t>();
  ad::ParameterRefs q, v;
  h.q_net_.parameters(q);
  h.v_net_.parameters(v);
  nn::from_json(j.at("q"), q);
  nn::from_json(j.at("v"), v);
  h.refresh_target();
  return h;
}

void ValueHeads::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write value heads to '" + path + "'");
  out << to_json().dump() << '\n';
}

ValueHeads ValueHeads::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing value-head checkpoint '" + path + "'");
  return from_json(nlohmann::json::parse(in));
}

TransitionIndex TransitionIndex::build(const data::Dataset& dataset) {
  TransitionIndex idx;
  for (int i = 0; i < static_cast<int>(dataset.trajectories.size()); ++i) {
    const auto& t = dataset.trajectories[i];
    for (int s = 0; s < t.length(); ++s) idx.entries.emplace_back(i, s);
    if (t.length() > 0 && t.truncated) ++idx.truncated_terminals;
  }
  return idx;
}

TransitionBatch make_batch(const data::Dataset& dataset, const TransitionIndex& index,
                           const std::vector<std::size_t>& picks, const ValueConfig& config) {
  const auto n = static_cast<Eigen::Index>(picks.size());
  const Eigen::Index width = dataset.trajectories.empty() ? 0 : dataset.trajectories.front().states.cols();
  const auto norm_it = dataset.manifest.reward_normalization.find(dataset.manifest.env_id);
  const data::RewardNormalization norm =
      norm_it == dataset.manifest.reward_normalization.end() ? data::RewardNormalization{} : norm_it->second;
  TransitionBatch b;
  b.states.resize(n, width);
  b.perturbations.resize(n, width);
  b.next_states.resize(n, width);
  b.rewards.resize(n);
  b.live.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [traj, step] = index.entries[picks[static_cast<std::size_t>(i)]];
    const auto& t = dataset.trajectories[traj];
    const bool last = step + 1 >= t.length();
    b.states.row(i) = t.states.row(step);
    b.perturbations.row(i) = t.perturbations.row(step);
    b.actions.push_back(t.actions[step]);
    b.rewards(i) = config.reward == RewardSignal::attacker ? attacker_reward(t.rewards[step], norm) : t.rewards[step];
    // Terminal transitions bootstrap from nothing; the next slot is a placeholder.
    b.next_states.row(i) = last ? t.states.row(step) : t.states.row(step + 1);
    b.next_actions.push_back(last ? t.actions[step] : t.actions[step + 1]);
    b.live(i) = last ? 0.0 : 1.0;
  }
  return b;
}

namespace {

enum class Phase { q, v, both };

TrainReport train(const data::Dataset& dataset, ValueHeads& heads, int steps, double lr, Rng& rng, Phase phase) {
  const TransitionIndex index = TransitionIndex::build(dataset);
  if (index.entries.empty()) throw DataError("value training needs a non-empty dataset");
  TrainReport report;
  report.truncated_terminals = index.truncated_terminals;
  ad::ParameterRefs q_params, v_params;
  heads.q_parameters(q_params);
  heads.v_parameters(v_params);
  nn::Adam q_opt({.lr = lr}), v_opt({.lr = lr});
  const auto batch_size = static_cast<std::size_t>(heads.config().batch_size);
  std::uniform_int_distribution<std::size_t> pick(0, index.entries.size() - 1);
  for (int step = 0; step < steps; ++step) {
    // Small datasets are used whole; larger ones are sampled with replacement.
    std::vector<std::size_t> picks(std::min(batch_size, index.entries.size()));
    if (picks.size() == index.entries.size()) {
      std::iota(picks.begin(), picks.end(), std::size_t{0});
    } else {
      for (auto& p : picks) p = pick(rng);
    }
    const TransitionBatch batch = make_batch(dataset, index, picks, heads.config());
    if (phase != Phase::v) {
      Tape tape;
      Var loss = heads.q_loss(tape, batch);
      tape.backward(loss);
      q_opt.step(q_params, tape.parameter_gradients());
      report.q_loss.push_back(loss.value()(0, 0));
    }
    if (phase != Phase::q) {
      Tape tape;
      Var loss = heads.v_loss(tape, batch);
      tape.backward(loss);
      v_opt.step(v_params, tape.parameter_gradients());
      report.v_loss.push_back(loss.value()(0, 0));
    }
    heads.add_steps(1);
    if (phase != Phase::v && (step + 1) % heads.config().target_refresh == 0) heads.refresh_target();
  }
  if (phase == Phase::q) heads.refresh_target();
  return report;
}

}  // namespace

TrainReport train_q(const data::Dataset& dataset, ValueHeads& heads, int steps, double lr, Rng& rng) {
  return train(dataset, heads, steps, lr, rng, Phase::q);
}

TrainReport train_v(const data::Dataset& dataset, ValueHeads& heads, int steps, double lr, Rng& rng) {
  return train(dataset, heads, steps, lr, rng, Phase::v);
}

TrainReport train_stage1(const data::Dataset& dataset, ValueHeads& heads, int steps, double lr, Rng& rng) {
  return train(dataset, heads, steps, lr, rng, Phase::both);
}

void annotate_dataset(data::Dataset& dataset, const ValueHeads& heads, bool weighted) {
  for (auto& t : dataset.trajectories) {
    if (t.length() == 0) continue;
    const Eigen::VectorXd a = heads.advantages(t.states, t.actions, t.perturbations);
    for (int s = 0; s < t.length(); ++s) {
      t.wadv[s] = weighted ? weighted_advantage(a(s), heads.config().lambda) : a(s);
    }
  }
}

}  // namespace aat::value
