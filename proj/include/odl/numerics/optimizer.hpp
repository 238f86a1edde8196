#pragma once

#include <map>
#include <string>
#include <vector>

#include "odl/numerics/tensor.hpp"

namespace odl::nn {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global-norm clipping threshold; <= 0 disables.
  double clip_norm = 5.0;
};

template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {});

  const OptimizerConfig& config() const { return config_; }
  long step_count() const { return steps_; }

  // Applies the gradients accumulated in each Parameter::grad, then zeroes them.
  void step(ParameterSet<T>& params);
  // Applies an explicit gradient map; every parameter needs an entry.
  void step(ParameterSet<T>& params, const GradientMap<T>& gradients);

 private:
  void update(Parameter<T>& p, const std::vector<T>& g, double clip_scale);

  OptimizerConfig config_;
  long steps_ = 0;
  std::map<std::string, std::vector<T>> m_;
  std::map<std::string, std::vector<T>> v_;
};

// Rescales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm);

}  // namespace odl::nn
