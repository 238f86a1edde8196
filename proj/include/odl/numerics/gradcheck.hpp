#pragma once

#include <functional>
#include <string>

#include "odl/numerics/tape.hpp"

namespace odl::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of `loss_fn` with central differences over
// every parameter coordinate. Relative error is |a - n| / max(|a|, |n|, floor).
// Throws ConfigError for epsilon <= 0.
GradCheckResult finite_diff_check(const std::function<Var<double>(Tape<double>&)>& loss_fn,
                                  ParameterSet<double>& params, double epsilon = 1e-5,
                                  double floor = 1e-6);

}  // namespace odl::nn
