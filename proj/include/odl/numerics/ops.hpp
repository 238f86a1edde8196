#pragma once

#include <span>
#include <vector>

#include "odl/numerics/tape.hpp"

// Differentiable primitives. Shape rules:
//   matmul       (m,k)x(k,n) -> (m,n); (m,k)x(k) -> (m)
//   add/sub/mul  identical shapes
//   concat       rank-1 inputs -> rank-1
//   stack        n rank-1 inputs of length d -> (n,d)
//   max_pool     n same-shape inputs -> elementwise max
//   softmax      rank-1
//   embedding    (V,d) table, id < V -> (d)
//   linear       W (m,k), b (m), x (k) -> (m)
namespace odl::nn {

enum class OpKind {
  kMatmul,
  kAdd,
  kMul,
  kConcat,
  kTanh,
  kSigmoid,
  kRelu,
  kMaxPoolElementwise,
  kSoftmax,
  kEmbeddingLookup,
};

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> concat(std::span<const Var<T>> parts);
template <typename T>
Var<T> slice(const Var<T>& a, std::size_t offset, std::size_t length);
template <typename T>
Var<T> stack(std::span<const Var<T>> rows);
template <typename T>
Var<T> transpose(const Var<T>& a);
template <typename T>
Var<T> tanh(const Var<T>& a);
template <typename T>
Var<T> sigmoid(const Var<T>& a);
template <typename T>
Var<T> relu(const Var<T>& a);
template <typename T>
Var<T> log(const Var<T>& a);
// log(1 - a)
template <typename T>
Var<T> log1m(const Var<T>& a);
// Values outside [lo, hi] are clamped and pass no gradient.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi);
template <typename T>
Var<T> max_pool(std::span<const Var<T>> inputs);
template <typename T>
Var<T> softmax(const Var<T>& a);
template <typename T>
Var<T> log_softmax(const Var<T>& a);
template <typename T>
Var<T> embedding(const Var<T>& table, std::size_t id);
template <typename T>
Var<T> pick(const Var<T>& a, std::size_t index);
template <typename T>
Var<T> sum(const Var<T>& a);
// Mean of scalars.
template <typename T>
Var<T> mean(std::span<const Var<T>> scalars);
template <typename T>
Var<T> linear(const Var<T>& w, const Var<T>& b, const Var<T>& x);
// softplus(z) - y*z, the binary cross entropy of sigmoid(z) against y.
template <typename T>
Var<T> bce_with_logit(const Var<T>& z, T y);

// Generic entry point used by tests and tools.
template <typename T>
Var<T> tensor_op(OpKind kind, std::span<const Var<T>> inputs, std::size_t index = 0);

}  // namespace odl::nn
