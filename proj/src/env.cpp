#include "aat/env.hpp"

#include <cmath>
#include <deque>

#include "aat/errors.hpp"

namespace aat::env {

namespace {

Matrix random_rows(int rows, int cols, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = e(rng) + 1e-3;
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void ChainMDP::validate() const {
  if (n_states <= 0 || n_actions <= 0) throw DomainError("mdp: empty state or action set");
  if (static_cast<int>(transitions.size()) != n_actions) throw DomainError("mdp: one transition matrix per action");
  for (const auto& p : transitions) {
    if (p.rows() != n_states || p.cols() != n_states) throw DomainError("mdp: transition shape");
    if ((p.array() < 0.0).any()) throw DomainError("mdp: negative transition probability");
    for (int s = 0; s < n_states; ++s) {
      if (std::abs(p.row(s).sum() - 1.0) > 1e-12) throw DomainError("mdp: transition row does not sum to 1");
    }
  }
  if (rewards.rows() != n_states || rewards.cols() != n_actions) throw DomainError("mdp: reward shape");
  if ((rewards.array() <= 0.0).any() || (rewards.array() > 1.0).any()) {
    throw DomainError("mdp: rewards must lie in (0, 1]");
  }
  if (gamma < 0.0) throw DomainError("mdp: gamma must be non-negative");
}

Matrix ChainMDP::policy_transitions(const Matrix& policy) const {
  Matrix p = Matrix::Zero(n_states, n_states);
  for (int a = 0; a < n_actions; ++a) p += policy.col(a).asDiagonal() * transitions[a];
  return p;
}

Eigen::VectorXd ChainMDP::policy_rewards(const Matrix& policy) const {
  return policy.cwiseProduct(rewards).rowwise().sum();
}

ChainMDP ChainMDP::chain(int n_states, double gamma, double slip) {
  if (n_states < 2) throw DomainError("chain needs at least 2 states");
  ChainMDP m;
  m.n_states = n_states;
  m.n_actions = 2;
  m.gamma = gamma;
  m.transitions.assign(2, Matrix::Zero(n_states, n_states));
  m.rewards = Matrix::Constant(n_states, 2, 0.1);
  for (int s = 0; s < n_states; ++s) {
    const int left = std::max(0, s - 1);
    const int right = std::min(n_states - 1, s + 1);
    m.transitions[0](s, left) += 1.0 - slip;
    m.transitions[0](s, right) += slip;
    m.transitions[1](s, right) += 1.0 - slip;
    m.transitions[1](s, left) += slip;
  }
  m.rewards.row(n_states - 1).setConstant(1.0);
  return m;
}

ChainMDP ChainMDP::random(int n_states, int n_actions, double gamma, Rng& rng) {
  ChainMDP m;
  m.n_states = n_states;
  m.n_actions = n_actions;
  m.gamma = gamma;
  for (int a = 0; a < n_actions; ++a) m.transitions.push_back(random_rows(n_states, n_states, rng));
  std::uniform_real_distribution<double> u(0.05, 1.0);
  m.rewards.resize(n_states, n_actions);
  for (Eigen::Index i = 0; i < m.rewards.size(); ++i) m.rewards.data()[i] = u(rng);
  return m;
}

void validate_tabular_policy(const Matrix& policy, int n_states, int n_actions) {
  if (policy.rows() != n_states || policy.cols() != n_actions) throw DomainError("policy: shape mismatch");
  if ((policy.array() < 0.0).any()) throw DomainError("policy: negative probability");
  for (int s = 0; s < n_states; ++s) {
    if (std::abs(policy.row(s).sum() - 1.0) > 1e-9) throw DomainError("policy: row does not sum to 1");
  }
}

Matrix uniform_policy(int n_states, int n_actions) {
  return Matrix::Constant(n_states, n_actions, 1.0 / n_actions);
}

Matrix random_policy(int n_states, int n_actions, Rng& rng) { return random_rows(n_states, n_actions, rng); }

Eigen::VectorXd dp_value(const ChainMDP& mdp, const Matrix& policy) {
  mdp.validate();
  validate_tabular_policy(policy, mdp.n_states, mdp.n_actions);
  const Matrix p = mdp.policy_transitions(policy);
  const Eigen::VectorXd r = mdp.policy_rewards(policy);
  if (mdp.horizon > 0) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(mdp.n_states);
    for (int k = 0; k < mdp.horizon; ++k) v = r + mdp.gamma * p * v;
    return v;
  }
  if (mdp.gamma >= 1.0) throw DomainError("dp_value: gamma must be < 1 for an infinite horizon");
  const Matrix a = Matrix::Identity(mdp.n_states, mdp.n_states) - mdp.gamma * p;
  return a.fullPivLu().solve(r);
}

double bellman_residual(const ChainMDP& mdp, const Matrix& policy, const Eigen::VectorXd& v) {
  const Eigen::VectorXd r = mdp.policy_rewards(policy) + mdp.gamma * mdp.policy_transitions(policy) * v - v;
  return r.cwiseAbs().maxCoeff();
}

Matrix q_values(const ChainMDP& mdp, const Eigen::VectorXd& v) {
  Matrix q(mdp.n_states, mdp.n_actions);
  for (int a = 0; a < mdp.n_actions; ++a) q.col(a) = mdp.rewards.col(a) + mdp.gamma * mdp.transitions[a] * v;
  return q;
}

ChainEnv::ChainEnv(ChainMDP mdp, int horizon) : mdp_(std::move(mdp)), horizon_(horizon) {
  mdp_.validate();
  if (horizon_ <= 0) throw ConfigError("chain: horizon must be positive");
}

Observation ChainEnv::observe() const {
  Observation o = Observation::Zero(mdp_.n_states);
  o(state_) = 1.0;
  return o;
}

Observation ChainEnv::reset(std::uint64_t seed) {
  rng_.seed(seed);
  state_ = 0;
  t_ = 0;
  return observe();
}

StepResult ChainEnv::step(int action) {
  if (action < 0 || action >= mdp_.n_actions) throw DomainError("chain: action out of range");
  const double reward = mdp_.rewards(state_, action);
  std::discrete_distribution<int> next(mdp_.transitions[action].row(state_).data(),
                                       mdp_.transitions[action].row(state_).data() + mdp_.n_states);
  state_ = next(rng_);
  ++t_;
  return {observe(), reward, t_ >= horizon_};
}

// ---------------------------------------------------------------------------

GridLayout GridLayout::default_layout() {
  return {{
      "...#..G",
      ".#.#.#.",
      ".#...#.",
      "...#...",
  }};
}

GridLayout GridLayout::from_json(const nlohmann::json& j) {
  GridLayout l;
  for (const auto& row : j) l.rows.push_back(row.get<std::string>());
  l.validate();
  return l;
}

void GridLayout::validate() const {
  if (rows.empty() || rows.front().empty()) throw ConfigError("grid layout is empty");
  int goals = 0;
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw ConfigError("grid layout rows differ in length");
    for (char c : r) {
      if (c != '.' && c != '#' && c != 'G') throw ConfigError(std::string("grid layout: bad cell '") + c + "'");
      goals += c == 'G';
    }
  }
  if (goals != 1) throw ConfigError("grid layout needs exactly one goal");
  if (GridPixels::kImageSide % height() != 0 || GridPixels::kImageSide % width() != 0) {
    throw ConfigError("grid layout must divide the 28-pixel image evenly");
  }
}

bool GridLayout::wall(Cell c) const {
  if (c.row < 0 || c.col < 0 || c.row >= height() || c.col >= width()) return true;
  return rows[c.row][c.col] == '#';
}

Cell GridLayout::goal() const {
  for (int r = 0; r < height(); ++r)
    for (int c = 0; c < width(); ++c)
      if (rows[r][c] == 'G') return {r, c};
  throw ConfigError("grid layout has no goal");
}

std::vector<Cell> GridLayout::start_cells() const {
  std::vector<Cell> out;
  for (int r = 0; r < height(); ++r)
    for (int c = 0; c < width(); ++c)
      if (rows[r][c] == '.') out.push_back({r, c});
  return out;
}

GridPixels::GridPixels(GridLayout layout) : layout_(std::move(layout)) {
  layout_.validate();
  cell_height_ = kImageSide / layout_.height();
  cell_width_ = kImageSide / layout_.width();
  for (Cell c : layout_.start_cells()) {
    if (shortest_path(c) < 0) throw ConfigError("grid layout: goal unreachable from a free cell");
  }
  agent_ = layout_.start_cells().front();
}

Observation GridPixels::render(Cell agent) const {
  Observation img = Observation::Zero(kImageSide * kImageSide);
  auto fill = [&](Cell c, double v) {
    for (int y = 0; y < cell_height_; ++y)
      for (int x = 0; x < cell_width_; ++x)
        img((c.row * cell_height_ + y) * kImageSide + c.col * cell_width_ + x) = v;
  };
  for (int r = 0; r < layout_.height(); ++r)
    for (int c = 0; c < layout_.width(); ++c) {
      if (layout_.rows[r][c] == '#') fill({r, c}, kWallPixel);
      if (layout_.rows[r][c] == 'G') fill({r, c}, kGoalPixel);
    }
  fill(agent, kAgentPixel);
  return img;
}

Cell GridPixels::start_cell(std::uint64_t seed) const {
  const auto cells = layout_.start_cells();
  return cells[derive_seed(seed, 0) % cells.size()];
}

Cell GridPixels::move(Cell from, int action) const {
  if (from == layout_.goal()) return from;
  Cell to = from;
  switch (action) {
    case up:
      --to.row;
      break;
    case down:
      ++to.row;
      break;
    case left:
      --to.col;
      break;
    case right:
      ++to.col;
      break;
    default:
      throw DomainError("grid: action out of range");
  }
  return layout_.wall(to) ? from : to;
}

int GridPixels::shortest_path(Cell from) const {
  const Cell goal = layout_.goal();
  std::vector<int> dist(layout_.height() * layout_.width(), -1);
  std::deque<Cell> queue{from};
  dist[from.row * layout_.width() + from.col] = 0;
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    const int d = dist[c.row * layout_.width() + c.col];
    if (c == goal) return d;
    for (int a = 0; a < 4; ++a) {
      const Cell n = move(c, a);
      int& nd = dist[n.row * layout_.width() + n.col];
      if (nd < 0) {
        nd = d + 1;
        queue.push_back(n);
      }
    }
  }
  return -1;
}

double GridPixels::oracle_return(Cell from) const {
  const int k = shortest_path(from);
  if (k < 0) return kStepReward * kHorizon;
  if (k == 0) return kGoalReward * kHorizon;
  if (k > kHorizon) return kStepReward * kHorizon;
  return kStepReward * (k - 1) + kGoalReward * (kHorizon - k + 1);
}

Observation GridPixels::reset(std::uint64_t seed) {
  agent_ = start_cell(seed);
  t_ = 0;
  return render(agent_);
}

StepResult GridPixels::step(int action) {
  agent_ = move(agent_, action);
  ++t_;
  const double reward = agent_ == layout_.goal() ? kGoalReward : kStepReward;
  return {render(agent_), reward, t_ >= kHorizon};
}

std::unique_ptr<Environment> make_environment(const std::string& id, const nlohmann::json& raw_options) {
  const nlohmann::json options = raw_options.is_object() ? raw_options : nlohmann::json::object();
  if (id == "grid") {
    if (options.contains("layout")) return std::make_unique<GridPixels>(GridLayout::from_json(options["layout"]));
    return std::make_unique<GridPixels>();
  }
  if (id == "chain") {
    const int n = options.value("n_states", 6);
    const double gamma = options.value("gamma", 0.9);
    return std::make_unique<ChainEnv>(ChainMDP::chain(n, gamma), options.value("horizon", 50));
  }
  throw ConfigError("unknown environment '" + id + "' (known: chain, grid)");
}

std::vector<std::string> registered_environments() { return {"chain", "grid"}; }

}  // namespace aat::env
