#pragma once

#include <cstddef>

#include <Eigen/Core>

// Dense kernels over row-major (m, k) buffers.
namespace odl::nn::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// y += W x
template <typename T>
inline void gemv(const T* w, std::size_t m, std::size_t k, const T* x, T* y) {
  Eigen::Map<const RowMat<T>> W(w, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  Eigen::Map<const Vec<T>> X(x, static_cast<Eigen::Index>(k));
  Eigen::Map<Vec<T>> Y(y, static_cast<Eigen::Index>(m));
  Y.noalias() += W * X;
}

// y += W^T g
template <typename T>
inline void gemv_t(const T* w, std::size_t m, std::size_t k, const T* g, T* y) {
  Eigen::Map<const RowMat<T>> W(w, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  Eigen::Map<const Vec<T>> G(g, static_cast<Eigen::Index>(m));
  Eigen::Map<Vec<T>> Y(y, static_cast<Eigen::Index>(k));
  Y.noalias() += W.transpose() * G;
}

// dW += g x^T
template <typename T>
inline void ger(const T* g, std::size_t m, const T* x, std::size_t k, T* dw) {
  Eigen::Map<RowMat<T>> D(dw, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  Eigen::Map<const Vec<T>> G(g, static_cast<Eigen::Index>(m));
  Eigen::Map<const Vec<T>> X(x, static_cast<Eigen::Index>(k));
  D.noalias() += G * X.transpose();
}

}  // namespace odl::nn::kernels
