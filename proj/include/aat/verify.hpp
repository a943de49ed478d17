#pragma once

// Numerical verification suites: the advantage performance-difference
// identity and the weighted-advantage improvement bound on exact tabular
// MDPs, plus randomized property suites (causality, weighted advantage,
// expectile, gradients) shared by the CLI and the acceptance binary.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "aat/env.hpp"

namespace aat::verify {

using ad::Matrix;
using ad::Rng;

/// Discounted state occupancy (I - gamma P_pi)^-1; row s starts in s.
Matrix occupancy(const env::ChainMDP& mdp, const Matrix& policy);

/// A^pi(s, a) = Q^pi(s, a) - V^pi(s).
Matrix advantages(const env::ChainMDP& mdp, const Matrix& policy);

/// |(V^pi - V^pi') - sum_t gamma^t E_pi A^pi'| for every start state.
/// Left side by dp_value, right side through the occupancy of pi.
Eigen::VectorXd performance_difference_residual(const env::ChainMDP& mdp, const Matrix& pi, const Matrix& pi_prime);

/// E_{tau~pi}[sum_t gamma^t f(s_t, a_t)] per start state.
Eigen::VectorXd discounted_expectation(const env::ChainMDP& mdp, const Matrix& policy, const Matrix& f);

/// Tabular instance for the improvement bound. eps_est is the estimation
/// error (not a perturbation budget); delta_gap is the bound's constant.
struct TheoremInstance {
  env::ChainMDP mdp;
  Matrix pi;             // evaluated policy
  Matrix beta;           // behaviour policy
  Matrix true_adv;       // A^beta
  Matrix estimated;      // A^beta + uniform noise in [-eps_est, eps_est]
  Matrix weighted;       // estimated / (1 + lambda |estimated|)
  double lambda = 0.5;
  double noise = 0.0;    // the construction bound on the noise
  double eps_est = 0.0;  // max |estimated - true|
  double eps_new = 0.0;  // max |weighted - true|
  Eigen::VectorXd delta_gap;  // E_pi sum gamma^t (estimated - weighted), per start state
  Eigen::VectorXd delta_c;
  Eigen::VectorXd delta_c_new;
};

TheoremInstance make_theorem_instance(const env::ChainMDP& mdp, const Matrix& pi, const Matrix& beta, double noise,
                                      double lambda, Rng& rng);
/// Random MDP with n_states <= 6, n_actions <= 3, and random lambda and noise.
TheoremInstance random_theorem_instance(Rng& rng);

struct TheoremCheck {
  bool conditions_hold = false;
  bool bound_holds = true;  // vacuously true when the conditions fail
  bool map_order_holds = true;
  double worst_margin = 0.0;  // min over start states of delta_c_new - delta_c
};

/// Conditions: eps_new <= eps_est and 0 <= delta <= (eps_est - eps_new)/(1-gamma)
/// with delta = max(delta_gap, 0), checked per start state.
TheoremCheck check_theorem(const TheoremInstance& instance, double tolerance = 1e-9);

nlohmann::json instance_to_json(const TheoremInstance& instance);

struct SuiteResult {
  std::string name;
  bool passed = false;
  int instances = 0;
  double worst = 0.0;  // the suite's headline statistic
  double seconds = 0.0;
  std::string detail;
  nlohmann::json extra = nlohmann::json::object();
};

SuiteResult lemma_suite(int instances, std::uint64_t seed);
SuiteResult theorem_suite(int instances, std::uint64_t seed);
/// Mutates one future token of a random MSCSA stack and of a small
/// generator decoder; earlier outputs must be bit-identical.
SuiteResult causality_suite(int instances, std::uint64_t seed);
SuiteResult advantage_suite(int pairs, std::uint64_t seed);
SuiteResult expectile_suite(int samples, std::uint64_t seed);
/// Finite-difference checks of an MSCSA layer and the generator loss.
SuiteResult gradient_suite(std::uint64_t seed);

/// "lemma1", "theorem1", "causality", "advantage", "expectile",
/// "gradients" or "all". Throws ConfigError for other names.
std::vector<SuiteResult> run_suite(const std::string& name, std::uint64_t seed);

nlohmann::json to_json(const SuiteResult& r);
nlohmann::json report_to_json(const std::vector<SuiteResult>& results, std::uint64_t seed);

}  // namespace aat::verify
