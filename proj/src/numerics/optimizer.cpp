#include "odl/numerics/optimizer.hpp"

#include <cmath>

namespace odl::nn {

template <typename T>
Optimizer<T>::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate > 0)) throw ConfigError("learning rate must be positive");
}

template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (T g : p->grad) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      for (T& g : p->grad) g *= s;
    }
  }
  return norm;
}

template <typename T>
void Optimizer<T>::update(Parameter<T>& p, const std::vector<T>& g, double clip_scale) {
  auto& w = p.value.data;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] = static_cast<T>(w[i] - lr * clip_scale * g[i]);
    }
    return;
  }
  auto& m = m_[p.name];
  auto& v = v_[p.name];
  if (m.empty()) {
    m.assign(w.size(), T{0});
    v.assign(w.size(), T{0});
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = clip_scale * g[i];
    m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * gi);
    v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * gi * gi);
    const double mh = m[i] / c1;
    const double vh = v[i] / c2;
    w[i] = static_cast<T>(w[i] - lr * mh / (std::sqrt(vh) + config_.epsilon));
  }
}

template <typename T>
void Optimizer<T>::step(ParameterSet<T>& params) {
  clip_grad_norm(params, config_.clip_norm);
  ++steps_;
  for (auto& p : params) update(*p, p->grad, 1.0);
  params.zero_grad();
}

template <typename T>
void Optimizer<T>::step(ParameterSet<T>& params, const GradientMap<T>& gradients) {
  double sq = 0;
  for (const auto& p : params) {
    auto it = gradients.find(p->name);
    if (it == gradients.end()) throw Error("optimizer: missing gradient for parameter '" + p->name + "'");
    if (it->second.shape != p->value.shape) {
      throw ShapeError("optimizer: gradient for '" + p->name + "' has shape " +
                       shape_str(it->second.shape) + ", parameter has " + shape_str(p->value.shape));
    }
    for (T g : it->second.data) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  const double scale = (config_.clip_norm > 0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;
  ++steps_;
  for (auto& p : params) update(*p, gradients.at(p->name).data, scale);
}

template class Optimizer<float>;
template class Optimizer<double>;
template double clip_grad_norm(ParameterSet<float>&, double);
template double clip_grad_norm(ParameterSet<double>&, double);

}  // namespace odl::nn
