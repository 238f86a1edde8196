#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "odl/error.hpp"
#include "odl/rng.hpp"

namespace odl::nn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major tensor. Rank 1 tensors are vectors, rank 2 are matrices;
// a scalar is the rank 1 tensor of size 1.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_size(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }
  static Tensor vector(std::vector<T> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  T item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }

  bool operator==(const Tensor& other) const { return shape == other.shape && data == other.data; }
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;
};

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

// Named trainable weights. Names are unique and shapes are fixed once added;
// iteration follows insertion order.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other) { copy_from(other); }
  ParameterSet& operator=(const ParameterSet& other) {
    if (this != &other) copy_from(other);
    return *this;
  }
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = Tensor<T>(std::move(shape));
    p->value.requires_grad = true;
    p->grad.assign(p->value.size(), T{0});
    index_[name] = items_.size();
    items_.push_back(std::move(p));
    return *items_.back();
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  Parameter<T>& get(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
    return *items_[it->second];
  }
  const Parameter<T>& get(std::string_view name) const {
    return const_cast<ParameterSet*>(this)->get(name);
  }

  std::size_t count() const { return items_.size(); }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p->value.size();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& p : items_) out.push_back(p->name);
    return out;
  }

  void zero_grad() {
    for (auto& p : items_) std::fill(p->grad.begin(), p->grad.end(), T{0});
  }

  GradientMap<T> gradients() const {
    GradientMap<T> out;
    for (const auto& p : items_) out.emplace(p->name, Tensor<T>(p->value.shape, p->grad));
    return out;
  }

  void init_uniform(Rng& rng, double range) {
    for (auto& p : items_) {
      for (auto& v : p->value.data) v = static_cast<T>(rng.uniform(-range, range));
    }
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : items_) {
      auto& q = out.add(p->name, p->value.shape);
      q.value.data.assign(p->value.data.begin(), p->value.data.end());
    }
    return out;
  }

  // Bit-level equality of names, shapes and values.
  bool same_values(const ParameterSet& other) const {
    if (count() != other.count()) return false;
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (items_[i]->name != other.items_[i]->name) return false;
      if (!(items_[i]->value == other.items_[i]->value)) return false;
    }
    return true;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  void copy_from(const ParameterSet& other) {
    items_.clear();
    index_.clear();
    for (const auto& p : other.items_) {
      index_[p->name] = items_.size();
      items_.push_back(std::make_unique<Parameter<T>>(*p));
    }
  }

  std::vector<std::unique_ptr<Parameter<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace odl::nn
