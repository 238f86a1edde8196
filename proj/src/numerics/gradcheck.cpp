#include "odl/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace odl::nn {

GradCheckResult finite_diff_check(const std::function<Var<double>(Tape<double>&)>& loss_fn,
                                  ParameterSet<double>& params, double epsilon, double floor) {
  if (!(epsilon > 0)) throw ConfigError("finite_diff_check: epsilon must be positive");
  params.zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss_fn(tape));
  }
  auto eval = [&] {
    Tape<double> tape(false);
    return loss_fn(tape).item();
  };
  GradCheckResult res;
  for (auto& p : params) {
    auto& w = p->value.data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + epsilon;
      const double up = eval();
      w[i] = orig - epsilon;
      const double down = eval();
      w[i] = orig;
      const double numeric = (up - down) / (2 * epsilon);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double err = std::abs(analytic - numeric) / denom;
      ++res.coordinates;
      if (err > res.max_rel_error || res.worst_param.empty()) {
        res.max_rel_error = std::max(res.max_rel_error, err);
        if (err >= res.max_rel_error) {
          res.worst_param = p->name;
          res.worst_index = i;
          res.analytic = analytic;
          res.numeric = numeric;
        }
      }
    }
  }
  params.zero_grad();
  return res;
}

}  // namespace odl::nn
