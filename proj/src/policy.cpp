#include "aat/policy.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aat/errors.hpp"

namespace aat::policy {

namespace {

Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Eigen::RowVectorXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

Matrix one_hot(const std::vector<int>& actions, int n) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(actions.size()), n);
  for (std::size_t i = 0; i < actions.size(); ++i) m(static_cast<Eigen::Index>(i), actions[i]) = 1.0;
  return m;
}

int argmax(const Eigen::RowVectorXd& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return static_cast<int>(best);
}

struct Transition {
  env::Cell from;
  int action;
  double reward;
  env::Cell to;
  bool terminal;
};

}  // namespace

int Policy::act(const Observation& observation) const {
  Matrix obs = observation;
  return argmax(probabilities(obs).row(0));
}

Observation Policy::nll_input_gradient(const Observation& observation, int action) const {
  Tape tape;
  Var x = tape.variable(Matrix(observation));
  Var z = logits(tape, x);
  // d(-log softmax_a)/dz = p - e_a, so seeding with that row reproduces the chain rule.
  Matrix seed = softmax(z.value());
  seed(0, action) -= 1.0;
  tape.backward(ad::sum(ad::mul(z, tape.constant(seed))));
  return tape.grad(x).row(0);
}

TrainingAlgorithm parse_training_algorithm(const std::string& s) {
  if (s == "q_learning") return TrainingAlgorithm::q_learning;
  if (s == "policy_gradient") return TrainingAlgorithm::policy_gradient;
  throw ConfigError("unknown training algorithm '" + s + "'");
}

std::string to_string(TrainingAlgorithm a) {
  return a == TrainingAlgorithm::q_learning ? "q_learning" : "policy_gradient";
}

ToyPolicy::ToyPolicy(int input_size, int num_actions, TrainingAlgorithm algorithm, Rng& rng, int hidden)
    : net_("policy", input_size, {hidden}, num_actions, rng),
      algorithm_(algorithm),
      logit_scale_(algorithm == TrainingAlgorithm::q_learning ? 20.0 : 1.0) {}

Matrix ToyPolicy::probabilities(const Matrix& observations) const {
  return softmax(logit_scale_ * net_.apply(observations));
}

Var ToyPolicy::logits(Tape& tape, Var observations) const {
  return ad::scale(net_.forward_frozen(tape, observations), logit_scale_);
}

nlohmann::json ToyPolicy::to_json() const {
  ad::ParameterRefs params;
  const_cast<nn::Mlp&>(net_).parameters(params);
  return {{"algorithm", to_string(algorithm_)},
          {"input_size", input_size()},
          {"num_actions", num_actions()},
          {"hidden", net_.layers().front().out()},
          {"logit_scale", logit_scale_},
          {"tensors", nn::to_json(params)}};
}

ToyPolicy ToyPolicy::from_json(const nlohmann::json& j) {
  Rng rng(0);
  ToyPolicy p(j.at("input_size").get<int>(), j.at("num_actions").get<int>(),
              parse_training_algorithm(j.at("algorithm").get<std::string>()), rng, j.at("hidden").get<int>());
  p.logit_scale_ = j.at("logit_scale").get<double>();
  ad::ParameterRefs params;
  p.net_.parameters(params);
  nn::from_json(j.at("tensors"), params);
  return p;
}

Matrix QueryOnlyPolicy::probabilities(const Matrix& observations) const {
  queries_ += static_cast<std::uint64_t>(observations.rows());
  return inner_->probabilities(observations);
}

Var QueryOnlyPolicy::logits(Tape&, Var) const {
  ++gradient_attempts_;
  throw CapabilityError("black-box target policy '" + inner_->id() + "' does not expose gradients");
}

EvaluationResult evaluate_policy(env::Environment& environment, const Policy& policy, int episodes,
                                 std::uint64_t seed) {
  EvaluationResult r;
  auto* grid = dynamic_cast<env::GridPixels*>(&environment);
  for (int e = 0; e < episodes; ++e) {
    const std::uint64_t s = env::derive_seed(seed, static_cast<std::uint64_t>(e));
    Observation obs = environment.reset(s);
    if (grid != nullptr) r.mean_oracle += grid->oracle_return(grid->agent());
    double total = 0.0;
    for (bool done = false; !done;) {
      auto step = environment.step(policy.act(obs));
      total += step.reward;
      obs = std::move(step.observation);
      done = step.done;
    }
    r.returns.push_back(total);
  }
  if (episodes > 0) {
    r.mean_return = std::accumulate(r.returns.begin(), r.returns.end(), 0.0) / episodes;
    r.mean_oracle /= episodes;
  }
  return r;
}

namespace {

void train_q(const env::GridPixels& grid, ToyPolicy& policy, const TrainOptions& opt, Rng& rng) {
  nn::Adam adam({.lr = opt.lr});
  ad::ParameterRefs params;
  policy.network().parameters(params);
  nn::Mlp target = policy.network();
  const env::Cell goal = grid.layout().goal();
  const auto starts = grid.layout().start_cells();
  std::vector<Transition> replay;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> any_action(0, 3);
  long updates = 0;
  for (int episode = 0; episode < opt.episodes; ++episode) {
    const double explore = std::max(0.05, 1.0 - static_cast<double>(episode) / (0.6 * opt.episodes));
    env::Cell cell = starts[rng() % starts.size()];
    for (int t = 0; t < env::GridPixels::kHorizon && cell != goal; ++t) {
      int a = any_action(rng);
      if (u(rng) >= explore) a = argmax(policy.outputs(Matrix(grid.render(cell))).row(0));
      const env::Cell next = grid.move(cell, a);
      replay.push_back({cell, a, next == goal ? 1.0 : 0.0, next, next == goal});
      cell = next;
      for (int k = 0; k < opt.updates_per_step && replay.size() >= static_cast<std::size_t>(opt.batch_size); ++k) {
        const int b = opt.batch_size;
        Matrix obs(b, grid.observation_shape().size());
        Matrix next_obs(b, grid.observation_shape().size());
        std::vector<int> actions(b);
        Eigen::VectorXd reward(b), live(b);
        for (int i = 0; i < b; ++i) {
          const Transition& tr = replay[rng() % replay.size()];
          obs.row(i) = grid.render(tr.from);
          next_obs.row(i) = grid.render(tr.to);
          actions[i] = tr.action;
          reward(i) = tr.reward;
          live(i) = tr.terminal ? 0.0 : 1.0;
        }
        const Eigen::VectorXd bootstrap = target.apply(next_obs).rowwise().maxCoeff();
        const Matrix y = reward + opt.gamma * live.cwiseProduct(bootstrap);
        Tape tape;
        Var q = policy.network().forward(tape, tape.constant(obs));
        Var chosen = ad::matmul(ad::mul(q, tape.constant(one_hot(actions, 4))), tape.constant(Matrix::Ones(4, 1)));
        Var loss = ad::mean(ad::square(ad::sub(chosen, tape.constant(y))));
        tape.backward(loss);
        adam.step(params, tape.parameter_gradients());
        if (++updates % opt.target_refresh == 0) target = policy.network();
      }
    }
  }
}

void train_pg(const env::GridPixels& grid, ToyPolicy& policy, const TrainOptions& opt, Rng& rng) {
  nn::Adam adam({.lr = opt.lr});
  ad::ParameterRefs params;
  policy.network().parameters(params);
  const env::Cell goal = grid.layout().goal();
  const auto starts = grid.layout().start_cells();
  double baseline = 0.0;
  for (int episode = 0; episode < opt.episodes; ++episode) {
    env::Cell cell = starts[rng() % starts.size()];
    std::vector<env::Cell> cells;
    std::vector<int> actions;
    bool reached = false;
    for (int t = 0; t < env::GridPixels::kHorizon && !reached; ++t) {
      const Matrix p = policy.probabilities(Matrix(grid.render(cell)));
      std::discrete_distribution<int> pick(p.data(), p.data() + 4);
      const int a = pick(rng);
      cells.push_back(cell);
      actions.push_back(a);
      cell = grid.move(cell, a);
      reached = cell == goal;
    }
    const int n = static_cast<int>(cells.size());
    Matrix obs(n, grid.observation_shape().size());
    Eigen::VectorXd g(n);
    for (int t = 0; t < n; ++t) {
      obs.row(t) = grid.render(cells[t]);
      g(t) = reached ? std::pow(opt.gamma, n - 1 - t) : 0.0;
    }
    baseline = 0.95 * baseline + 0.05 * g.mean();
    const Matrix p = policy.probabilities(obs);
    Matrix seed = p - one_hot(actions, 4);
    for (int t = 0; t < n; ++t) seed.row(t) *= (g(t) - baseline) / n;
    Tape tape;
    Var z = ad::scale(policy.network().forward(tape, tape.constant(obs)), policy.logit_scale());
    tape.backward(ad::sum(ad::mul(z, tape.constant(seed))));
    adam.step(params, tape.parameter_gradients());
  }
}

}  // namespace

TrainResult train_toy_policy(const env::GridPixels& grid, TrainingAlgorithm algorithm, const TrainOptions& options,
                             std::uint64_t seed) {
  Rng rng(seed);
  TrainResult result;
  result.policy = ToyPolicy(grid.observation_shape().size(), grid.num_actions(), algorithm, rng);
  if (algorithm == TrainingAlgorithm::q_learning) {
    train_q(grid, result.policy, options, rng);
  } else {
    train_pg(grid, result.policy, options, rng);
  }
  env::GridPixels eval_env = grid;
  result.evaluation = evaluate_policy(eval_env, result.policy, options.eval_episodes, env::derive_seed(seed, 7919));
  result.reached_threshold = result.evaluation.mean_return >= options.threshold * result.evaluation.mean_oracle;
  result.report = to_string(algorithm) + ": mean return " + std::to_string(result.evaluation.mean_return) +
                  " vs oracle " + std::to_string(result.evaluation.mean_oracle);
  if (!result.reached_threshold) spdlog::warn("policy training below threshold ({}); retry with a new seed", result.report);
  return result;
}

}  // namespace aat::policy
