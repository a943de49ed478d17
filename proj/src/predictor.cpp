#include "aat/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "aat/errors.hpp"

namespace aat::predictor {

namespace {

// Patch layout used by the encoder; shapes that do not tile become one token.
struct PatchLayout {
  int side = 0;
  int count = 1;
  int dim = 0;
};

PatchLayout patch_layout(const env::ObservationShape& shape, int side) {
  PatchLayout p;
  if (side > 0 && shape.height % side == 0 && shape.width % side == 0) {
    p.side = side;
    p.count = data::patch_count(shape, side);
    p.dim = side * side * shape.channels;
  } else {
    p.dim = shape.size();
  }
  return p;
}

Matrix state_tokens(const Eigen::RowVectorXd& state, const env::ObservationShape& shape, const PatchLayout& p) {
  if (p.side == 0) return Matrix(state);
  return data::patchify(state, shape, p.side).patches;
}

}  // namespace

std::string to_string(Architecture a) { return a == Architecture::linear ? "linear" : "encoded"; }

Architecture parse_architecture(const std::string& s) {
  if (s == "linear") return Architecture::linear;
  if (s == "encoded") return Architecture::encoded;
  throw ConfigError("unknown predictor architecture '" + s + "'");
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  if (logits.size() == 0) throw DataError("softmax of an empty candidate set");
  const Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

AdvantageCandidateSet candidate_mu(const Eigen::VectorXd& logits) {
  AdvantageCandidateSet set;
  set.logits = logits;
  set.mu = softmax(logits);
  return set;
}

AdvantageCandidateSet candidate_mu(const Eigen::RowVectorXd& state, int action, const Matrix& candidates,
                                   const value::ValueHeads& heads, bool weighted) {
  if (candidates.rows() == 0) throw DataError("candidate_mu: empty candidate set");
  const int n = static_cast<int>(candidates.rows());
  Matrix states = state.replicate(n, 1);
  const Eigen::VectorXd raw = heads.advantages(states, std::vector<int>(n, action), candidates);
  Eigen::VectorXd logits(n);
  for (int j = 0; j < n; ++j) logits(j) = weighted ? value::weighted_advantage(raw(j), heads.config().lambda) : raw(j);
  AdvantageCandidateSet set = candidate_mu(logits);
  set.state = state;
  set.action = action;
  set.candidates = candidates;
  return set;
}

double entropy(const Eigen::VectorXd& mu) {
  double h = 0.0;
  for (Eigen::Index j = 0; j < mu.size(); ++j) {
    if (mu(j) > 0.0) h -= mu(j) * std::log(mu(j));
  }
  return h;
}

TargetRule parse_target_rule(const std::string& s) {
  if (s == "max_product") return TargetRule::max_product;
  if (s == "argmax_mu") return TargetRule::argmax_mu;
  throw ConfigError("unknown predictor target rule '" + s + "'");
}

std::string to_string(TargetRule r) { return r == TargetRule::max_product ? "max_product" : "argmax_mu"; }

double regression_target(const AdvantageCandidateSet& set, TargetRule rule) {
  if (set.logits.size() == 0) throw DataError("regression_target: empty candidate set");
  if (rule == TargetRule::argmax_mu) {
    Eigen::Index best = 0;
    set.mu.maxCoeff(&best);
    return set.logits(best);
  }
  return set.mu.cwiseProduct(set.logits).maxCoeff();
}

void PredictorConfig::validate() const {
  if (!(kappa >= 0.0)) throw ConfigError("predictor: kappa must be non-negative");
  if (neighbors < 0 || proposals < 0 || neighbors + proposals == 0) {
    throw ConfigError("predictor: need at least one candidate");
  }
  if (!(proposal_scale >= 0.0)) throw ConfigError("predictor: proposal_scale must be non-negative");
  if (model_dim <= 0 || hidden <= 0 || batch_size <= 0 || max_targets <= 0) {
    throw ConfigError("predictor: sizes must be positive");
  }
  if (!(lambda > 0.0)) throw ConfigError("predictor: lambda must be positive");
}

AdvantagePredictor::AdvantagePredictor(const env::ObservationShape& shape, PredictorConfig config, Rng& rng)
    : shape_(shape), config_(std::move(config)) {
  config_.validate();
  if (config_.architecture == Architecture::linear) {
    linear_ = nn::Linear("predictor.linear", shape_.size(), 1, rng);
  } else {
    const PatchLayout p = patch_layout(shape_, config_.patch_side);
    embedding_ = seq::InputEmbedding("predictor.embed", p.dim, config_.model_dim, p.count, rng);
    head_ = nn::Mlp("predictor.head", config_.model_dim, {config_.hidden}, 1, rng);
  }
}

Var AdvantagePredictor::forward(Tape& tape, Var states) const {
  if (states.cols() != shape_.size()) throw ShapeError("predictor: state width does not match the shape");
  if (config_.architecture == Architecture::linear) return linear_.forward(tape, states);
  const PatchLayout p = patch_layout(shape_, config_.patch_side);
  const Matrix pool = Matrix::Constant(1, p.count, 1.0 / p.count);
  std::vector<Var> encoded;
  encoded.reserve(states.rows());
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    // States are inputs, never optimised here, so they enter as constants.
    Var tokens = tape.constant(state_tokens(states.value().row(i), shape_, p));
    encoded.push_back(ad::matmul(tape.constant(pool), embedding_.forward(tape, tokens)));
  }
  return head_.forward(tape, ad::concat_rows(encoded));
}

Eigen::VectorXd AdvantagePredictor::raw(const Matrix& states) const {
  Tape tape;
  Var out = forward(tape, tape.constant(states));
  return out.value().col(0);
}

double AdvantagePredictor::clip(double value) const {
  if (!config_.weighted) return value;
  const double bound = 1.0 / config_.lambda - 1e-6;
  return std::clamp(value, -bound, bound);
}

double AdvantagePredictor::predict_max_advantage(const Eigen::RowVectorXd& state) const {
  return clip(raw(Matrix(state))(0));
}

void AdvantagePredictor::parameters(ad::ParameterRefs& out) {
  if (config_.architecture == Architecture::linear) {
    linear_.parameters(out);
  } else {
    embedding_.parameters(out);
    head_.parameters(out);
  }
}

void AdvantagePredictor::zero() {
  ad::ParameterRefs params;
  parameters(params);
  for (ad::Parameter* p : params) p->value().setZero();
}

nlohmann::json AdvantagePredictor::to_json() const {
  auto& self = const_cast<AdvantagePredictor&>(*this);
  ad::ParameterRefs params;
  self.parameters(params);
  nlohmann::json manifest = {
      {"kappa", config_.kappa},
      {"n_candidates", config_.neighbors + config_.proposals},
      {"clip", 1.0 / config_.lambda - 1e-6},
      {"neighbors", config_.neighbors},
      {"proposals", config_.proposals},
      {"proposal_scale", config_.proposal_scale},
      {"target_rule", to_string(config_.rule)},
      {"architecture", to_string(config_.architecture)},
      {"model_dim", config_.model_dim},
      {"hidden", config_.hidden},
      {"patch_side", config_.patch_side},
      {"lambda", config_.lambda},
      {"weighted", config_.weighted},
      {"shape", {shape_.height, shape_.width, shape_.channels}},
  };
  return {{"manifest", manifest}, {"parameters", nn::to_json(params)}};
}

AdvantagePredictor AdvantagePredictor::from_json(const nlohmann::json& j) {
  try {
    const auto& m = j.at("manifest");
    PredictorConfig c;
    c.kappa = m.at("kappa").get<double>();
    c.neighbors = m.at("neighbors").get<int>();
    c.proposals = m.at("proposals").get<int>();
    c.proposal_scale = m.at("proposal_scale").get<double>();
    c.rule = parse_target_rule(m.at("target_rule").get<std::string>());
    c.architecture = parse_architecture(m.at("architecture").get<std::string>());
    c.model_dim = m.at("model_dim").get<int>();
    c.hidden = m.at("hidden").get<int>();
    c.patch_side = m.at("patch_side").get<int>();
    c.lambda = m.at("lambda").get<double>();
    c.weighted = m.value("weighted", true);
    env::ObservationShape shape{m.at("shape").at(0).get<int>(), m.at("shape").at(1).get<int>(),
                                m.at("shape").at(2).get<int>()};
    Rng rng(0);
    AdvantagePredictor p(shape, c, rng);
    ad::ParameterRefs params;
    p.parameters(params);
    nn::from_json(j.at("parameters"), params);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("predictor checkpoint: ") + e.what());
  }
}

CandidateSampler::CandidateSampler(const data::Dataset& dataset, const PredictorConfig& config)
    : dataset_(&dataset), config_(config), epsilon_(dataset.manifest.epsilon) {
  if (dataset.num_steps() == 0) throw DataError("predictor: empty dataset");
  // Renders repeat a lot; grouping exact duplicates keeps the neighbour search small.
  std::map<std::vector<double>, int> seen;
  std::vector<Eigen::RowVectorXd> rows;
  for (int i = 0; i < static_cast<int>(dataset.trajectories.size()); ++i) {
    const auto& tr = dataset.trajectories[i];
    for (int t = 0; t < tr.length(); ++t) {
      std::vector<double> key(tr.states.row(t).data(), tr.states.row(t).data() + tr.states.cols());
      auto [it, inserted] = seen.emplace(std::move(key), static_cast<int>(rows.size()));
      if (inserted) {
        rows.emplace_back(tr.states.row(t));
        groups_.emplace_back();
      }
      groups_[it->second].emplace_back(i, t);
    }
  }
  unique_states_.resize(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t k = 0; k < rows.size(); ++k) unique_states_.row(static_cast<Eigen::Index>(k)) = rows[k];
}

Matrix CandidateSampler::candidates(const Eigen::RowVectorXd& state, Rng& rng) const {
  const Eigen::Index n = unique_states_.cols();
  Matrix out(config_.neighbors + config_.proposals, n);
  int row = 0;
  if (config_.neighbors > 0) {
    const Eigen::VectorXd dist = (unique_states_.rowwise() - state).rowwise().squaredNorm();
    std::vector<int> order(static_cast<std::size_t>(dist.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dist(a) < dist(b); });
    // Walk outward through the nearest distinct states, drawing records
    // without replacement until the neighbour quota is filled.
    int needed = config_.neighbors;
    for (int g : order) {
      if (needed == 0) break;
      std::vector<std::pair<int, int>> members = groups_[g];
      std::shuffle(members.begin(), members.end(), rng);
      for (const auto& [i, t] : members) {
        if (needed == 0) break;
        out.row(row++) = dataset_->trajectories[i].perturbations.row(t);
        --needed;
      }
    }
    // Fewer records than neighbours: repeat the ones we have.
    for (int k = 0; needed > 0; ++k, --needed) out.row(row++) = out.row(k);
  }
  std::normal_distribution<double> gauss(0.0, config_.proposal_scale * epsilon_ / std::sqrt(static_cast<double>(n)));
  for (int k = 0; k < config_.proposals; ++k) {
    Eigen::RowVectorXd d(n);
    for (Eigen::Index c = 0; c < n; ++c) d(c) = gauss(rng);
    const double norm = d.norm();
    if (norm > epsilon_) d *= epsilon_ / norm;
    out.row(row++) = d;
  }
  return out;
}

PredictorTargets build_targets(const data::Dataset& dataset, const value::ValueHeads& heads,
                               const PredictorConfig& config, Rng& rng) {
  const value::TransitionIndex index = value::TransitionIndex::build(dataset);
  if (index.entries.empty()) throw DataError("predictor: empty dataset");
  CandidateSampler sampler(dataset, config);
  std::vector<std::size_t> picks(index.entries.size());
  std::iota(picks.begin(), picks.end(), std::size_t{0});
  if (picks.size() > static_cast<std::size_t>(config.max_targets)) {
    std::shuffle(picks.begin(), picks.end(), rng);
    picks.resize(static_cast<std::size_t>(config.max_targets));
  }
  PredictorTargets out;
  const auto m = static_cast<Eigen::Index>(picks.size());
  out.states.resize(m, dataset.manifest.observation_shape.size());
  out.targets.resize(m);
  out.entropies.resize(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const auto [i, t] = index.entries[picks[static_cast<std::size_t>(k)]];
    const auto& tr = dataset.trajectories[i];
    const Eigen::RowVectorXd s = tr.states.row(t);
    const AdvantageCandidateSet set = candidate_mu(s, tr.actions[t], sampler.candidates(s, rng), heads, config.weighted);
    out.states.row(k) = s;
    out.targets(k) = regression_target(set, config.rule);
    out.entropies(k) = entropy(set.mu);
  }
  return out;
}

PredictorReport fit(AdvantagePredictor& predictor, const PredictorTargets& targets, int steps, double lr, Rng& rng) {
  const auto m = targets.states.rows();
  if (m == 0) throw DataError("predictor: no regression targets");
  PredictorReport report;
  report.mean_entropy = targets.entropies.size() ? targets.entropies.mean() : 0.0;
  const double kappa = predictor.config().kappa;
  ad::ParameterRefs params;
  predictor.parameters(params);
  nn::Adam adam(nn::AdamOptions{lr});
  const int batch = std::min<int>(predictor.config().batch_size, static_cast<int>(m));
  std::uniform_int_distribution<Eigen::Index> pick(0, m - 1);
  for (int step = 0; step < steps; ++step) {
    Matrix xs(batch, targets.states.cols());
    Matrix ys(batch, 1);
    double h = 0.0;
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index k = batch == m ? b : pick(rng);
      xs.row(b) = targets.states.row(k);
      ys(b, 0) = targets.targets(k);
      if (targets.entropies.size()) h += targets.entropies(k);
    }
    h /= batch;
    Tape tape(true, &rng);
    Var err = ad::sub(predictor.forward(tape, tape.constant(xs)), tape.constant(ys));
    Var reg = ad::mean(ad::square(err));
    // The entropy of mu depends on the frozen value heads only, so it shifts
    // the reported loss without contributing a gradient.
    const double loss = reg.value()(0, 0) - kappa * h;
    tape.backward(reg);
    if (lr > 0.0) adam.step(params, tape.parameter_gradients());
    report.regression.push_back(reg.value()(0, 0));
    report.loss.push_back(loss);
  }
  if (!nn::all_finite(params)) throw DataError("predictor: parameters became non-finite");
  return report;
}

PredictorReport train_predictor(const data::Dataset& dataset, const value::ValueHeads& heads,
                                AdvantagePredictor& predictor, int steps, double lr, Rng& rng) {
  const PredictorTargets targets = build_targets(dataset, heads, predictor.config(), rng);
  return fit(predictor, targets, steps, lr, rng);
}

}  // namespace aat::predictor
