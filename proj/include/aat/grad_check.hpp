#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "aat/autodiff.hpp"

namespace aat::ad {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::string worst_parameter;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from dividing finite-difference noise by ~0.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Builds the scalar loss on the supplied tape (evaluation mode).
using LossBuilder = std::function<Var(Tape&)>;

/// Compares tape gradients against central finite differences on up to
/// `max_entries` parameter entries chosen uniformly at random (all entries
/// when the total is smaller). Parameters are restored bit-exactly.
GradCheckResult check_gradients(const ParameterRefs& params, const LossBuilder& loss,
                                std::size_t max_entries, Rng& rng, double step = 1e-5);

}  // namespace aat::ad
