#include "aat/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "aat/errors.hpp"

namespace aat::data {

double normalize_reward(double r_raw, double r_min, double r_max) {
  if (!(r_max > r_min)) throw ConfigError("normalize_reward: r_max must exceed r_min");
  return std::clamp((r_raw - r_min) / (r_max - r_min), kRewardFloor, 1.0);
}

std::vector<double> returns_to_go_all(const std::vector<double>& rewards) {
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    const double r = rewards[i];
    if (!(r > 0.0) || r > 1.0) throw DomainError("returns_to_go: reward " + std::to_string(r) + " outside (0, 1]");
    acc += -std::log2(r);
    out[i] = acc;
  }
  return out;
}

double returns_to_go(const std::vector<double>& rewards, std::size_t from_t) {
  if (from_t > rewards.size()) throw DomainError("returns_to_go: start index past the end");
  if (from_t == rewards.size()) return 0.0;
  return returns_to_go_all(std::vector<double>(rewards.begin() + static_cast<std::ptrdiff_t>(from_t), rewards.end()))
      .front();
}

int patch_count(const ObservationShape& shape, int patch_side) {
  if (patch_side <= 0 || shape.height % patch_side != 0 || shape.width % patch_side != 0) {
    throw ShapeError("patchify: " + std::to_string(shape.height) + "x" + std::to_string(shape.width) +
                     " is not divisible by patch side " + std::to_string(patch_side));
  }
  return (shape.height / patch_side) * (shape.width / patch_side);
}

PatchGrid patchify(const Eigen::Ref<const Eigen::RowVectorXd>& image, const ObservationShape& shape, int patch_side) {
  const int x = patch_count(shape, patch_side);
  if (image.size() != shape.size()) throw ShapeError("patchify: image size does not match its shape");
  PatchGrid g;
  g.patch_side = patch_side;
  g.channels = shape.channels;
  g.height = shape.height;
  g.width = shape.width;
  const int c = shape.channels;
  const int per_row = shape.width / patch_side;
  g.patches.resize(x, patch_side * patch_side * c);
  for (int p = 0; p < x; ++p) {
    const int y0 = (p / per_row) * patch_side;
    const int x0 = (p % per_row) * patch_side;
    for (int dy = 0; dy < patch_side; ++dy) {
      // One patch row is contiguous in HWC layout.
      g.patches.row(p).segment(dy * patch_side * c, patch_side * c) =
          image.segment(((y0 + dy) * shape.width + x0) * c, patch_side * c);
    }
  }
  return g;
}

Observation unpatchify(const PatchGrid& g) {
  const int c = g.channels;
  const int s = g.patch_side;
  const int per_row = g.width / s;
  Observation img(g.height * g.width * c);
  for (int p = 0; p < g.count(); ++p) {
    const int y0 = (p / per_row) * s;
    const int x0 = (p % per_row) * s;
    for (int dy = 0; dy < s; ++dy) {
      img.segment(((y0 + dy) * g.width + x0) * c, s * c) = g.patches.row(p).segment(dy * s * c, s * c);
    }
  }
  return img;
}

TrajectoryRecord Trajectory::record(int t) const {
  TrajectoryRecord r;
  r.t = t;
  r.state = states.row(t);
  r.action = actions[t];
  r.perturbation = perturbations.row(t);
  r.reward = rewards[t];
  r.returns_to_go = rtg[t];
  r.weighted_advantage = wadv[t];
  return r;
}

void Trajectory::validate() const {
  const auto n = static_cast<Eigen::Index>(actions.size());
  if (states.rows() != n || perturbations.rows() != n || rewards.size() != actions.size() ||
      rtg.size() != actions.size() || wadv.size() != actions.size()) {
    throw DataError("trajectory columns have different lengths");
  }
  if (states.cols() != perturbations.cols()) throw DataError("trajectory state/perturbation widths differ");
}

void DatasetManifest::validate() const {
  double total = 0.0;
  for (const auto& [name, f] : collector_mix) {
    if (f < 0.0) throw DataError("collector fraction for '" + name + "' is negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw DataError("collector fractions sum to " + std::to_string(total) + ", expected 1");
  }
}

std::size_t Dataset::num_steps() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += static_cast<std::size_t>(t.length());
  return n;
}

Condition parse_condition(const std::string& s) {
  if (s == "returns_to_go") return Condition::returns_to_go;
  if (s == "weighted_advantage") return Condition::weighted_advantage;
  if (s == "ordinary_advantage") return Condition::ordinary_advantage;
  throw ConfigError("unknown condition '" + s + "'");
}

std::string to_string(Condition c) {
  switch (c) {
    case Condition::returns_to_go:
      return "returns_to_go";
    case Condition::weighted_advantage:
      return "weighted_advantage";
    case Condition::ordinary_advantage:
      return "ordinary_advantage";
  }
  return "weighted_advantage";
}

TokenSequence build_token_sequence(const std::vector<TrajectoryRecord>& records, Condition condition,
                                   const ObservationShape& shape, int patch_side) {
  TokenSequence seq;
  seq.steps = static_cast<int>(records.size());
  seq.patches_per_step = patch_count(shape, patch_side);
  seq.patch_side = patch_side;
  seq.shape = shape;
  seq.perturbations.resize(seq.steps, shape.size());
  for (int i = 0; i < seq.steps; ++i) {
    const TrajectoryRecord& r = records[i];
    if (i > 0 && r.t != records[i - 1].t + 1) throw DataError("token sequence: records are not contiguous in t");
    if (r.state.size() != shape.size() || r.perturbation.size() != shape.size()) {
      throw ShapeError("token sequence: record width does not match the observation shape");
    }
    if (condition == Condition::returns_to_go) {
      seq.conditions.push_back(r.returns_to_go);
    } else {
      if (!r.weighted_advantage) throw DataError("token sequence: record t=" + std::to_string(r.t) + " has no advantage");
      seq.conditions.push_back(*r.weighted_advantage);
    }
    seq.patches.push_back(patchify(r.state, shape, patch_side).patches);
    seq.perturbations.row(i) = r.perturbation;
    seq.actions.push_back(r.action);
    seq.kinds.push_back(TokenKind::condition);
    seq.kinds.insert(seq.kinds.end(), seq.patches_per_step, TokenKind::patch);
    seq.kinds.push_back(TokenKind::perturbation);
    seq.kinds.push_back(TokenKind::action);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// JSON-Lines

namespace {

nlohmann::json rows_to_json(const Matrix& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
  }
  return out;
}

Matrix rows_from_json(const nlohmann::json& j, Eigen::Index width) {
  Matrix m(static_cast<Eigen::Index>(j.size()), width);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& row = j[i];
    if (static_cast<Eigen::Index>(row.size()) != width) throw DataError("row width does not match the manifest");
    for (Eigen::Index c = 0; c < width; ++c) m(static_cast<Eigen::Index>(i), c) = row[c].get<double>();
  }
  return m;
}

}  // namespace

nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json norm = nlohmann::json::object();
  for (const auto& [env, n] : m.reward_normalization) norm[env] = {{"r_min", n.r_min}, {"r_max", n.r_max}};
  nlohmann::json j = {{"schema_version", kSchemaVersion},
          {"env_id", m.env_id},
          {"collector_mix", m.collector_mix},
          {"episode_count", m.episode_count},
          {"epsilon", m.epsilon},
          {"seed", m.seed},
          {"reward_normalization", norm},
          {"observation_shape", {m.observation_shape.height, m.observation_shape.width, m.observation_shape.channels}},
          {"num_actions", m.num_actions}};
  if (!m.config_hash.empty()) j["config_hash"] = m.config_hash;
  return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != kSchemaVersion) throw DataError("unsupported dataset schema version");
  DatasetManifest m;
  m.env_id = j.at("env_id").get<std::string>();
  m.collector_mix = j.at("collector_mix").get<std::map<std::string, double>>();
  m.episode_count = j.at("episode_count").get<int>();
  m.epsilon = j.at("epsilon").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& [env, n] : j.at("reward_normalization").items()) {
    m.reward_normalization[env] = {n.at("r_min").get<double>(), n.at("r_max").get<double>()};
  }
  const auto& shape = j.at("observation_shape");
  m.observation_shape = {shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()};
  m.num_actions = j.at("num_actions").get<int>();
  m.config_hash = j.value("config_hash", std::string());
  m.validate();
  return m;
}

nlohmann::json trajectory_to_json(const Trajectory& t) {
  t.validate();
  std::vector<int> steps(t.actions.size());
  std::iota(steps.begin(), steps.end(), 0);
  nlohmann::json wadv = nlohmann::json::array();
  for (const auto& w : t.wadv) wadv.push_back(w ? nlohmann::json(*w) : nlohmann::json(nullptr));
  return {{"collector", t.collector}, {"seed", t.seed},       {"terminal", t.terminal},
          {"truncated", t.truncated}, {"t", steps},           {"s", rows_to_json(t.states)},
          {"a", t.actions},           {"delta", rows_to_json(t.perturbations)},
          {"r", t.rewards},           {"rtg", t.rtg},         {"wadv", wadv}};
}

Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.collector = j.at("collector").get<std::string>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.terminal = j.at("terminal").get<bool>();
  t.truncated = j.value("truncated", false);
  t.actions = j.at("a").get<std::vector<int>>();
  t.rewards = j.at("r").get<std::vector<double>>();
  t.rtg = j.at("rtg").get<std::vector<double>>();
  const Eigen::Index width = j.at("s").empty() ? 0 : static_cast<Eigen::Index>(j.at("s")[0].size());
  t.states = rows_from_json(j.at("s"), width);
  t.perturbations = rows_from_json(j.at("delta"), width);
  for (const auto& w : j.at("wadv")) {
    t.wadv.push_back(w.is_null() ? std::nullopt : std::optional<double>(w.get<double>()));
  }
  const auto steps = j.at("t").get<std::vector<int>>();
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] != static_cast<int>(i)) throw DataError("trajectory steps must be 0..T-1");
  }
  if (steps.size() != t.actions.size()) throw DataError("trajectory 't' length mismatch");
  t.validate();
  return t;
}

void serialize(const Dataset& dataset, const std::string& path) {
  dataset.manifest.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  DatasetManifest m = dataset.manifest;
  m.episode_count = static_cast<int>(dataset.trajectories.size());
  out << manifest_to_json(m).dump() << '\n';
  for (const auto& t : dataset.trajectories) out << trajectory_to_json(t).dump() << '\n';
  if (!out) throw DataError("failed writing '" + path + "'");
}

Dataset deserialize(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  Dataset d;
  std::string line;
  int line_no = 0;
  bool have_manifest = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!have_manifest) {
        d.manifest = manifest_from_json(j);
        have_manifest = true;
      } else {
        d.trajectories.push_back(trajectory_from_json(j));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": " + e.what(), line_no);
    } catch (const DataError& e) {
      throw ParseError(path + ": " + e.what(), line_no);
    }
  }
  if (!have_manifest) throw ParseError(path + ": missing manifest line", 1);
  if (d.manifest.episode_count != static_cast<int>(d.trajectories.size())) {
    throw ParseError(path + ": manifest announces " + std::to_string(d.manifest.episode_count) + " episodes, found " +
                         std::to_string(d.trajectories.size()),
                     line_no);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Collectors

Collector parse_collector(const std::string& s) {
  if (s == "random") return Collector::random;
  if (s == "fgsm") return Collector::fgsm;
  throw ConfigError("unknown collector '" + s + "'");
}

std::string to_string(Collector c) { return c == Collector::random ? "random" : "fgsm"; }

Observation collector_perturbation(Collector collector, const policy::Policy& policy, const Observation& state,
                                   double epsilon, ad::Rng& rng) {
  const Eigen::Index n = state.size();
  Observation delta = Observation::Zero(n);
  if (epsilon <= 0.0) return delta;
  if (collector == Collector::random) {
    std::normal_distribution<double> g(0.0, 1.0);
    for (Eigen::Index i = 0; i < n; ++i) delta(i) = g(rng);
    const double norm = delta.norm();
    const double magnitude = std::uniform_real_distribution<double>(0.0, epsilon)(rng);
    delta *= norm > 0.0 ? magnitude / norm : 0.0;
  } else {
    if (!policy.white_box()) throw CapabilityError("fgsm collector needs a differentiable policy; use 'random'");
    const Observation grad = policy.nll_input_gradient(state, policy.act(state));
    delta = grad.array().sign() * (epsilon / std::sqrt(static_cast<double>(n)));
  }
  const double norm = delta.norm();
  if (norm > epsilon) delta *= epsilon / norm;
  while (delta.norm() > epsilon) delta *= 1.0 - 1e-15;
  return delta;
}

namespace {

Trajectory rollout(env::Environment& environment, const policy::Policy& policy, Collector collector, double epsilon,
                   std::uint64_t seed, const RewardNormalization& norm) {
  ad::Rng rng(env::derive_seed(seed, 1));
  Trajectory t;
  t.collector = to_string(collector);
  t.seed = seed;
  const int n = environment.observation_shape().size();
  std::vector<Observation> states, deltas;
  Observation obs = environment.reset(seed);
  for (bool done = false; !done;) {
    Observation delta = collector_perturbation(collector, policy, obs, epsilon, rng);
    const int action = policy.act(obs + delta);
    auto step = environment.step(action);
    states.push_back(obs);
    deltas.push_back(delta);
    t.actions.push_back(action);
    t.rewards.push_back(step.reward);
    obs = std::move(step.observation);
    done = step.done;
  }
  t.truncated = static_cast<int>(t.actions.size()) >= environment.horizon();
  t.states.resize(static_cast<Eigen::Index>(states.size()), n);
  t.perturbations.resize(static_cast<Eigen::Index>(states.size()), n);
  for (std::size_t i = 0; i < states.size(); ++i) {
    t.states.row(static_cast<Eigen::Index>(i)) = states[i];
    t.perturbations.row(static_cast<Eigen::Index>(i)) = deltas[i];
  }
  std::vector<double> normalized;
  for (double r : t.rewards) normalized.push_back(normalize_reward(r, norm.r_min, norm.r_max));
  t.rtg = returns_to_go_all(normalized);
  t.wadv.assign(t.actions.size(), std::nullopt);
  return t;
}

DatasetManifest base_manifest(const env::Environment& environment, double epsilon, std::uint64_t seed) {
  DatasetManifest m;
  m.env_id = environment.id();
  m.epsilon = epsilon;
  m.seed = seed;
  m.reward_normalization[environment.id()] = {environment.reward_min(), environment.reward_max()};
  m.observation_shape = environment.observation_shape();
  m.num_actions = environment.num_actions();
  return m;
}

}  // namespace

Dataset collect(env::Environment& environment, const policy::Policy& policy, Collector collector, int episodes,
                double epsilon, std::uint64_t seed) {
  return collect_mix(environment, policy, {{to_string(collector), 1.0}}, episodes, epsilon, seed);
}

Dataset collect_mix(env::Environment& environment, const policy::Policy& policy,
                    const std::map<std::string, double>& mix, int episodes, double epsilon, std::uint64_t seed) {
  if (epsilon < 0.0) throw ConfigError("collect: epsilon must be non-negative");
  if (episodes < 0) throw ConfigError("collect: negative episode count");
  Dataset d;
  d.manifest = base_manifest(environment, epsilon, seed);
  d.manifest.collector_mix = mix;
  d.manifest.validate();
  if (policy.input_size() != environment.observation_shape().size()) {
    throw ConfigError("collect: policy input does not match the observation size");
  }
  const RewardNormalization norm = d.manifest.reward_normalization.at(environment.id());
  std::vector<Collector> plan;
  double cumulative = 0.0;
  for (const auto& [name, f] : mix) {
    const Collector c = parse_collector(name);
    cumulative += f;
    const auto until = static_cast<std::size_t>(std::lround(cumulative * episodes));
    while (plan.size() < until) plan.push_back(c);
  }
  while (plan.size() < static_cast<std::size_t>(episodes)) plan.push_back(parse_collector(mix.rbegin()->first));
  for (int e = 0; e < episodes; ++e) {
    d.trajectories.push_back(rollout(environment, policy, plan[e], epsilon,
                                     env::derive_seed(seed, static_cast<std::uint64_t>(e)), norm));
  }
  d.manifest.episode_count = episodes;
  return d;
}

}  // namespace aat::data
