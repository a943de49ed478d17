#include "aat/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace aat::ad {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const LossBuilder& loss) {
  Tape tape(false);
  return loss(tape).value()(0, 0);
}

}  // namespace

GradCheckResult check_gradients(const ParameterRefs& params, const LossBuilder& loss,
                                std::size_t max_entries, Rng& rng, double step) {
  Tape tape(false);
  Var l = loss(tape);
  tape.backward(l);
  const Gradients grads = tape.parameter_gradients();

  std::vector<std::pair<std::size_t, Eigen::Index>> entries;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index i = 0; i < params[p]->value().size(); ++i) entries.emplace_back(p, i);
  }
  if (entries.size() > max_entries) {
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(max_entries);
  }

  GradCheckResult result;
  for (const auto& [p, i] : entries) {
    Parameter* param = params[p];
    double& x = param->value().data()[i];
    const double saved = x;
    x = saved + step;
    const double up = evaluate(loss);
    x = saved - step;
    const double down = evaluate(loss);
    x = saved;
    const double numeric = (up - down) / (2.0 * step);
    auto it = grads.find(param);
    const double analytic = it == grads.end() ? 0.0 : it->second.data()[i];
    const double err = relative_error(analytic, numeric);
    if (err >= result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_parameter = param->name() + "[" + std::to_string(i) + "]";
    }
    ++result.checked;
  }
  return result;
}

}  // namespace aat::ad
