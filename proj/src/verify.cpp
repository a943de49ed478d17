#include "aat/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <limits>

#include "aat/errors.hpp"
#include "aat/generator.hpp"
#include "aat/grad_check.hpp"
#include "aat/mscsa.hpp"
#include "aat/value.hpp"

namespace aat::verify {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::equal(a.data(), a.data() + a.size(), b.data(),
                    [](double x, double y) { return std::memcmp(&x, &y, sizeof(double)) == 0; });
}

// Row-wise expectation of f under the policy: sum_a pi(a|s) f(s, a).
Eigen::VectorXd policy_average(const Matrix& policy, const Matrix& f) {
  return policy.cwiseProduct(f).rowwise().sum();
}

// Synthetic annotated dataset of 8x8 single-channel frames.
data::Dataset synthetic_dataset(int trajectories, int steps, int actions, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  data::Dataset d;
  d.manifest.env_id = "synthetic";
  d.manifest.collector_mix = {{"random", 1.0}};
  d.manifest.observation_shape = {8, 8, 1};
  d.manifest.num_actions = actions;
  d.manifest.epsilon = 1.0;
  for (int i = 0; i < trajectories; ++i) {
    data::Trajectory t;
    t.collector = "random";
    t.states = Matrix::NullaryExpr(steps, 64, [&] { return u(rng); });
    t.perturbations = 0.1 * Matrix::NullaryExpr(steps, 64, [&] { return u(rng) - 0.5; });
    for (int s = 0; s < steps; ++s) {
      t.actions.push_back(static_cast<int>(u(rng) * actions) % actions);
      t.rewards.push_back(0.1 + 0.9 * u(rng));
      t.wadv.emplace_back(2.0 * u(rng) - 1.0);
    }
    t.rtg = data::returns_to_go_all(t.rewards);
    d.trajectories.push_back(std::move(t));
  }
  d.manifest.episode_count = trajectories;
  return d;
}

gen::GeneratorConfig small_generator(int context) {
  gen::GeneratorConfig c;
  c.embedding.model_dim = 16;
  c.embedding.num_heads = 2;
  c.embedding.num_layers = 2;
  c.embedding.dropout_rate = 0.0;
  c.scales.num_scales = 2;
  c.scales.base_window = 2;
  c.context_steps = context;
  c.patch_side = 4;
  c.head_hidden = 8;
  c.head_channels = 2;
  c.head_stride = 4;
  c.batch_size = 2;
  c.segment_stride = 2;
  c.epsilon = 1e3;
  return c;
}

}  // namespace

Matrix occupancy(const env::ChainMDP& mdp, const Matrix& policy) {
  const Matrix p = mdp.policy_transitions(policy);
  const Matrix a = Matrix::Identity(mdp.n_states, mdp.n_states) - mdp.gamma * p;
  return a.fullPivLu().inverse();
}

Matrix advantages(const env::ChainMDP& mdp, const Matrix& policy) {
  const Eigen::VectorXd v = env::dp_value(mdp, policy);
  Matrix q = env::q_values(mdp, v);
  q.colwise() -= v;
  return q;
}

Eigen::VectorXd discounted_expectation(const env::ChainMDP& mdp, const Matrix& policy, const Matrix& f) {
  return occupancy(mdp, policy) * policy_average(policy, f);
}

Eigen::VectorXd performance_difference_residual(const env::ChainMDP& mdp, const Matrix& pi, const Matrix& pi_prime) {
  if (!(mdp.gamma < 1.0)) throw DomainError("performance difference needs gamma < 1");
  const Eigen::VectorXd lhs = env::dp_value(mdp, pi) - env::dp_value(mdp, pi_prime);
  const Eigen::VectorXd rhs = discounted_expectation(mdp, pi, advantages(mdp, pi_prime));
  return (lhs - rhs).cwiseAbs();
}

TheoremInstance make_theorem_instance(const env::ChainMDP& mdp, const Matrix& pi, const Matrix& beta, double noise,
                                      double lambda, Rng& rng) {
  if (noise < 0.0) throw DomainError("theorem instance: noise bound must be >= 0");
  TheoremInstance t;
  t.mdp = mdp;
  t.pi = pi;
  t.beta = beta;
  t.lambda = lambda;
  t.noise = noise;
  t.true_adv = advantages(mdp, beta);
  std::uniform_real_distribution<double> u(-noise, noise);
  t.estimated = t.true_adv.unaryExpr([&](double a) { return noise > 0.0 ? a + u(rng) : a; });
  t.weighted = t.estimated.unaryExpr([lambda](double a) { return value::weighted_advantage(a, lambda); });
  t.eps_est = (t.estimated - t.true_adv).cwiseAbs().maxCoeff();
  t.eps_new = (t.weighted - t.true_adv).cwiseAbs().maxCoeff();
  const double horizon = 1.0 / (1.0 - mdp.gamma);
  const Eigen::VectorXd est = discounted_expectation(mdp, pi, t.estimated);
  const Eigen::VectorXd wtd = discounted_expectation(mdp, pi, t.weighted);
  t.delta_gap = est - wtd;
  t.delta_c = est.array() - t.eps_est * horizon;
  t.delta_c_new = wtd.array() - t.eps_new * horizon;
  return t;
}

TheoremInstance random_theorem_instance(Rng& rng) {
  std::uniform_int_distribution<int> states(2, 6);
  std::uniform_int_distribution<int> actions(2, 3);
  std::uniform_real_distribution<double> gamma(0.0, 0.95);
  std::uniform_real_distribution<double> log_lambda(std::log(1e-3), std::log(2.0));
  std::uniform_real_distribution<double> noise(0.0, 0.5);
  const int s = states(rng);
  const int a = actions(rng);
  const env::ChainMDP mdp = env::ChainMDP::random(s, a, gamma(rng), rng);
  const Matrix pi = env::random_policy(s, a, rng);
  const Matrix beta = env::random_policy(s, a, rng);
  const double lam = std::exp(log_lambda(rng));
  return make_theorem_instance(mdp, pi, beta, noise(rng), lam, rng);
}

TheoremCheck check_theorem(const TheoremInstance& t, double tolerance) {
  TheoremCheck c;
  const double slack = (t.eps_est - t.eps_new) / (1.0 - t.mdp.gamma);
  const double delta = std::max(0.0, t.delta_gap.maxCoeff());
  c.conditions_hold = t.eps_new <= t.eps_est && delta <= slack;
  c.worst_margin = (t.delta_c_new - t.delta_c).minCoeff();
  if (c.conditions_hold) c.bound_holds = c.worst_margin >= -tolerance;
  for (Eigen::Index i = 0; i < t.estimated.size(); ++i) {
    const double e = t.estimated.data()[i];
    const double w = t.weighted.data()[i];
    if ((e >= 0.0 && w > e) || (e < 0.0 && w < e)) c.map_order_holds = false;
  }
  return c;
}

nlohmann::json instance_to_json(const TheoremInstance& t) {
  auto mat = [](const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      std::vector<double> r(m.cols());
      for (Eigen::Index j = 0; j < m.cols(); ++j) r[j] = m(i, j);
      rows.push_back(r);
    }
    return rows;
  };
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json transitions = nlohmann::json::array();
  for (const Matrix& p : t.mdp.transitions) transitions.push_back(mat(p));
  return {{"gamma", t.mdp.gamma},
          {"transitions", transitions},
          {"rewards", mat(t.mdp.rewards)},
          {"pi", mat(t.pi)},
          {"beta", mat(t.beta)},
          {"true_advantage", mat(t.true_adv)},
          {"estimated_advantage", mat(t.estimated)},
          {"weighted_advantage", mat(t.weighted)},
          {"lambda", t.lambda},
          {"eps_est", t.eps_est},
          {"eps_new", t.eps_new},
          {"delta_gap", vec(t.delta_gap)},
          {"delta_c", vec(t.delta_c)},
          {"delta_c_new", vec(t.delta_c_new)}};
}

SuiteResult lemma_suite(int instances, std::uint64_t seed) {
  const auto start = Clock::now();
  Rng rng(seed);
  std::uniform_int_distribution<int> states(1, 6);
  std::uniform_int_distribution<int> actions(1, 3);
  std::uniform_real_distribution<double> gamma(0.0, 0.99);
  SuiteResult r;
  r.name = "lemma1";
  r.instances = instances;
  for (int i = 0; i < instances; ++i) {
    const int s = states(rng);
    const int a = actions(rng);
    // Every tenth instance is myopic, where the identity is one step deep.
    const double g = i % 10 == 0 ? 0.0 : gamma(rng);
    const env::ChainMDP mdp = env::ChainMDP::random(s, a, g, rng);
    const Matrix pi = env::random_policy(s, a, rng);
    const Matrix pi_prime = env::random_policy(s, a, rng);
    r.worst = std::max(r.worst, performance_difference_residual(mdp, pi, pi_prime).maxCoeff());
  }
  r.passed = r.worst <= 1e-8;
  r.seconds = seconds_since(start);
  r.detail = "max residual over all start states";
  return r;
}

SuiteResult theorem_suite(int instances, std::uint64_t seed) {
  const auto start = Clock::now();
  Rng rng(seed);
  SuiteResult r;
  r.name = "theorem1";
  r.instances = instances;
  r.worst = std::numeric_limits<double>::infinity();
  int gated = 0;
  int violations = 0;
  int order_violations = 0;
  nlohmann::json counterexamples = nlohmann::json::array();
  for (int i = 0; i < instances; ++i) {
    const TheoremInstance t = random_theorem_instance(rng);
    const TheoremCheck c = check_theorem(t);
    if (!c.map_order_holds) ++order_violations;
    if (!c.conditions_hold) continue;
    ++gated;
    r.worst = std::min(r.worst, c.worst_margin);
    if (!c.bound_holds) {
      ++violations;
      if (counterexamples.size() < 5) counterexamples.push_back(instance_to_json(t));
    }
  }
  r.passed = violations == 0 && order_violations == 0 && gated > 0;
  r.seconds = seconds_since(start);
  r.detail = "min (delta_c_new - delta_c) over instances meeting both conditions";
  r.extra = {{"conditions_hold", gated},
             {"violations", violations},
             {"map_order_violations", order_violations},
             {"counterexamples", counterexamples}};
  return r;
}

SuiteResult causality_suite(int instances, std::uint64_t seed) {
  const auto start = Clock::now();
  Rng rng(seed);
  std::uniform_int_distribution<int> heads_pick(0, 2);
  std::uniform_int_distribution<int> dim_mult(1, 4);
  std::uniform_int_distribution<int> length(2, 25);
  std::uniform_int_distribution<int> scales(1, 3);
  std::uniform_int_distribution<int> base(1, 5);
  std::normal_distribution<double> g(0.0, 1.0);
  SuiteResult r;
  r.name = "causality";
  r.instances = instances;
  int leaks = 0;
  for (int i = 0; i < instances; ++i) {
    const int heads = 1 << heads_pick(rng);                     // 1, 2 or 4
    const int d = std::min(32, heads * 2 * dim_mult(rng));      // <= 32, divisible by heads
    const int t = length(rng);
    seq::EmbeddingConfig ec;
    ec.model_dim = d;
    ec.num_heads = heads;
    ec.num_layers = 1;
    ec.dropout_rate = 0.0;
    ec.max_sequence_length = 32;
    seq::ScaleConfig sc;
    sc.num_scales = scales(rng);
    sc.base_window = base(rng);
    const int input_dim = 1 + static_cast<int>(rng() % 8);
    seq::AttentionParams p = seq::AttentionParams::random(input_dim, ec, sc.num_scales, rng);
    Matrix x = Matrix::NullaryExpr(t, input_dim, [&] { return g(rng); });
    const seq::ScaleStack before = seq::mscsa_forward(seq::embed_inputs(x, p), sc, p);
    const int j = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(t - 1));
    for (Eigen::Index c = 0; c < x.cols(); ++c) x(j, c) += 1.0 + std::abs(g(rng));
    const seq::ScaleStack after = seq::mscsa_forward(seq::embed_inputs(x, p), sc, p);
    bool ok = bit_equal(before.fused.topRows(j), after.fused.topRows(j));
    for (std::size_t k = 0; k < before.scale_outputs.size(); ++k) {
      ok = ok && bit_equal(before.scale_outputs[k].topRows(j), after.scale_outputs[k].topRows(j));
    }
    if (!ok) ++leaks;
  }

  // The same property through the full decoder: changing step j (or the
  // perturbation and action tokens of step j) leaves delta_0..delta_{j-1}
  // (respectively delta_j) bit-identical.
  const int decoder_instances = std::max(1, instances / 10);
  int decoder_leaks = 0;
  for (int i = 0; i < decoder_instances; ++i) {
    data::Dataset ds = synthetic_dataset(1, 8, 3, rng);
    gen::GeneratorModel model({8, 8, 1}, 3, small_generator(8), rng);
    const gen::Segment seg{0, 0, 8, 0.0};
    const data::TokenSequence base_tokens = gen::segment_tokens(ds, seg, model.config());
    ad::Tape t0(false);
    const Matrix ref = model.decode(t0, base_tokens).value();
    const int j = 1 + static_cast<int>(rng() % 7);
    data::TokenSequence future = base_tokens;
    future.conditions[j] += 0.7;
    future.patches[j].array() += 0.3;
    data::TokenSequence same_step = base_tokens;
    same_step.perturbations.row(j).array() += 0.5;
    same_step.actions[j] = (same_step.actions[j] + 1) % 3;
    ad::Tape t1(false);
    ad::Tape t2(false);
    const Matrix a = model.decode(t1, future).value();
    const Matrix b = model.decode(t2, same_step).value();
    if (!bit_equal(ref.topRows(j), a.topRows(j)) || !bit_equal(ref.topRows(j + 1), b.topRows(j + 1))) {
      ++decoder_leaks;
    }
  }
  r.passed = leaks == 0 && decoder_leaks == 0;
  r.worst = leaks + decoder_leaks;
  r.seconds = seconds_since(start);
  r.detail = "instances where a future token changed an earlier output";
  r.extra = {{"mscsa_leaks", leaks}, {"decoder_instances", decoder_instances}, {"decoder_leaks", decoder_leaks}};
  return r;
}

SuiteResult advantage_suite(int pairs, std::uint64_t seed) {
  const auto start = Clock::now();
  Rng rng(seed);
  std::uniform_real_distribution<double> log_lambda(std::log(1e-3), std::log(1e3));
  std::uniform_real_distribution<double> log_mag(std::log(1e-6), std::log(1e6));
  SuiteResult r;
  r.name = "advantage";
  r.instances = pairs;
  int bound = 0;
  int fidelity = 0;
  double worst_fidelity = 0.0;
  // Groups of pairs share lambda so monotonicity can be checked on sorted A.
  const int group = 100;
  int monotone = 0;
  for (int start_i = 0; start_i < pairs; start_i += group) {
    const double lam = std::exp(log_lambda(rng));
    const int n = std::min(group, pairs - start_i);
    std::vector<double> as(static_cast<std::size_t>(n));
    for (double& a : as) {
      const double mag = std::exp(log_mag(rng)) / lam;
      a = (rng() & 1) ? mag : -mag;
    }
    std::sort(as.begin(), as.end());
    double prev = -std::numeric_limits<double>::infinity();
    for (double a : as) {
      const double w = value::weighted_advantage(a, lam);
      if (!(std::abs(w) < 1.0 / lam)) ++bound;
      if (w < prev) ++monotone;
      prev = w;
      if (std::abs(a) <= 0.1 / lam) {
        const double err = std::abs(w - a);
        worst_fidelity = std::max(worst_fidelity, err * lam);
        if (err > 0.01 / lam) ++fidelity;
      }
    }
  }
  const double limit = value::weighted_advantage(1e6, 1.0);
  const bool limit_ok = std::abs(limit - 1.0) <= 1e-5;
  r.passed = bound == 0 && monotone == 0 && fidelity == 0 && limit_ok;
  r.worst = worst_fidelity;
  r.seconds = seconds_since(start);
  r.detail = "max lambda*|A~ - A| on the small-signal range";
  r.extra = {{"bound_violations", bound},
             {"monotonicity_violations", monotone},
             {"fidelity_violations", fidelity},
             {"limit_value", limit}};
  return r;
}

SuiteResult expectile_suite(int samples, std::uint64_t seed) {
  const auto start = Clock::now();
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 3.0);
  SuiteResult r;
  r.name = "expectile";
  r.instances = samples;
  int symmetric = 0;
  for (int i = 0; i < samples; ++i) {
    const double nu = g(rng);
    if (value::expectile_loss(nu, 0.5) != 0.5 * nu * nu) ++symmetric;
  }
  // Golden-section oracle on the convex empirical loss.
  std::vector<double> xs(200);
  for (double& x : xs) x = g(rng);
  auto empirical = [&](double v, double sigma) {
    double s = 0.0;
    for (double x : xs) s += value::expectile_loss(x - v, sigma);
    return s / static_cast<double>(xs.size());
  };
  auto golden = [&](double sigma) {
    double lo = *std::min_element(xs.begin(), xs.end());
    double hi = *std::max_element(xs.begin(), xs.end());
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    while (hi - lo > 1e-10) {
      const double a = hi - phi * (hi - lo);
      const double b = lo + phi * (hi - lo);
      if (empirical(a, sigma) < empirical(b, sigma)) hi = b;
      else lo = a;
    }
    return 0.5 * (lo + hi);
  };
  int order = 0;
  double worst = 0.0;
  double prev = -std::numeric_limits<double>::infinity();
  for (int k = 1; k <= 19; ++k) {
    const double sigma = 0.05 * k;
    const double v = value::expectile(xs, sigma);
    worst = std::max(worst, std::abs(v - golden(sigma)));
    if (v < prev) ++order;
    prev = v;
  }
  r.passed = symmetric == 0 && order == 0 && worst <= 1e-6;
  r.worst = worst;
  r.seconds = seconds_since(start);
  r.detail = "max |closed-form minimizer - golden-section minimizer|";
  r.extra = {{"symmetric_mismatches", symmetric}, {"order_violations", order}};
  return r;
}

SuiteResult gradient_suite(std::uint64_t seed) {
  const auto start = Clock::now();
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  SuiteResult r;
  r.name = "gradients";

  seq::EmbeddingConfig ec;
  ec.model_dim = 8;
  ec.num_heads = 2;
  ec.num_layers = 1;
  ec.dropout_rate = 0.0;
  ec.max_sequence_length = 16;
  seq::ScaleConfig sc;
  sc.num_scales = 3;
  sc.base_window = 1;
  seq::AttentionParams p = seq::AttentionParams::random(5, ec, sc.num_scales, rng);
  const Matrix x = Matrix::NullaryExpr(7, 5, [&] { return g(rng); });
  const Matrix w = Matrix::NullaryExpr(7, 8, [&] { return g(rng); });
  ad::ParameterRefs params;
  p.parameters(params);
  const auto windows = sc.windows();
  auto loss = [&](ad::Tape& t) {
    ad::Var h = p.embedding.forward(t, t.constant(x));
    ad::Var z = p.mscsa.forward(t, h, windows, ec.num_heads, 0.0);
    return ad::sum(ad::mul(z, t.constant(w)));
  };
  const double mscsa_err = ad::check_gradients(params, loss, 100000, rng).max_relative_error;

  data::Dataset ds = synthetic_dataset(2, 6, 3, rng);
  policy::ToyPolicy victim(64, 3, policy::TrainingAlgorithm::policy_gradient, rng, 16);
  gen::GeneratorModel model({8, 8, 1}, 3, small_generator(4), rng);
  const auto segments = gen::make_segments(ds, model.config());
  const double gen_err = gen::gradient_check(model, ds, {segments.front(), segments.back()}, victim, rng, 400);

  r.instances = 2;
  r.worst = std::max(mscsa_err, gen_err);
  r.passed = r.worst <= 1e-4;
  r.seconds = seconds_since(start);
  r.detail = "max relative error against central differences";
  r.extra = {{"mscsa", mscsa_err}, {"generator", gen_err}};
  return r;
}

std::vector<SuiteResult> run_suite(const std::string& name, std::uint64_t seed) {
  std::vector<SuiteResult> out;
  const bool all = name == "all";
  bool known = all;
  auto want = [&](const char* n) {
    const bool hit = all || name == n;
    known = known || hit;
    return hit;
  };
  if (want("lemma1")) out.push_back(lemma_suite(1000, seed));
  if (want("theorem1")) out.push_back(theorem_suite(1000, seed + 1));
  if (want("causality")) out.push_back(causality_suite(100, seed + 2));
  if (want("advantage")) out.push_back(advantage_suite(100000, seed + 3));
  if (want("expectile")) out.push_back(expectile_suite(1000, seed + 4));
  if (want("gradients")) out.push_back(gradient_suite(seed + 5));
  if (!known) {
    throw ConfigError("unknown verification suite '" + name +
                      "' (expected lemma1, theorem1, causality, advantage, expectile, gradients or all)");
  }
  return out;
}

nlohmann::json to_json(const SuiteResult& r) {
  return {{"name", r.name},         {"passed", r.passed}, {"instances", r.instances}, {"worst", r.worst},
          {"seconds", r.seconds},   {"detail", r.detail}, {"extra", r.extra}};
}

nlohmann::json report_to_json(const std::vector<SuiteResult>& results, std::uint64_t seed) {
  nlohmann::json suites = nlohmann::json::array();
  bool passed = true;
  for (const auto& r : results) {
    suites.push_back(to_json(r));
    passed = passed && r.passed;
  }
  return {{"schema_version", 1}, {"seed", seed}, {"passed", passed}, {"suites", suites}};
}

}  // namespace aat::verify
