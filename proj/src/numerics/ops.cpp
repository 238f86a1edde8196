#include "odl/numerics/ops.hpp"

#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace odl::nn {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

template <typename T>
bool any_grad(std::span<const Var<T>> vs) {
  for (const auto& v : vs) {
    if (v.tape().needs_grad(v.id())) return true;
  }
  return false;
}

template <typename T>
Tape<T>& same_tape(std::span<const Var<T>> vs) {
  Tape<T>& t = vs[0].tape();
  for (const auto& v : vs) {
    if (&v.tape() != &t) throw Error("op inputs recorded on different tapes");
  }
  return t;
}

template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, const char* op, F forward, D derivative) {
  Tape<T>& tape = a.tape();
  const auto& av = a.value();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = forward(av.data[i]);
  int ai = a.id();
  // derivative(x, y) with y = forward(x)
  auto fn = [ai, derivative](Tape<T>& t, int self) {
    const auto& x = t.value(ai).data;
    const auto& y = t.value(self).data;
    const auto g = t.grad(self);
    auto& ga = t.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * derivative(x[i], y[i]);
  };
  return Var<T>(&tape, tape.push(std::move(out), tape.needs_grad(ai), fn, op));
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Var<T> in[] = {a, b};
  Tape<T>& tape = same_tape<T>(in);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || (bv.rank() != 1 && bv.rank() != 2) || av.dim(1) != bv.dim(0)) {
    mismatch("matmul", av.shape, bv.shape);
  }
  const std::size_t m = av.dim(0), k = av.dim(1);
  const std::size_t n = bv.rank() == 2 ? bv.dim(1) : 1;
  Tensor<T> out(bv.rank() == 2 ? Shape{m, n} : Shape{m});
  const T* A = av.data.data();
  const T* B = bv.data.data();
  T* C = out.data.data();
  if (n == 1) {
    kernels::gemv(A, m, k, B, C);
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = A[i * k + p];
        const T* brow = B + p * n;
        T* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  int ai = a.id(), bi = b.id();
  auto fn = [ai, bi, m, k, n](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const T* A = t.value(ai).data.data();
    const T* B = t.value(bi).data.data();
    if (t.needs_grad(ai)) {
      T* dA = t.grad(ai).data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const T gij = g[i * n + j];
          if (gij == T{0}) continue;
          T* drow = dA + i * k;
          for (std::size_t p = 0; p < k; ++p) drow[p] += gij * B[p * n + j];
        }
      }
    }
    if (t.needs_grad(bi)) {
      T* dB = t.grad(bi).data();
      for (std::size_t i = 0; i < m; ++i) {
        const T* arow = A + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = arow[p];
          T* drow = dB + p * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += aip * g[i * n + j];
        }
      }
    }
  };
  return Var<T>(&tape, tape.push(std::move(out), any_grad<T>(in), fn, "matmul"));
}

template <typename T>
Var<T> linear(const Var<T>& w, const Var<T>& b, const Var<T>& x) {
  const Var<T> in[] = {w, b, x};
  Tape<T>& tape = same_tape<T>(in);
  const auto& wv = w.value();
  const auto& bv = b.value();
  const auto& xv = x.value();
  if (wv.rank() != 2 || xv.rank() != 1 || wv.dim(1) != xv.dim(0)) mismatch("linear", wv.shape, xv.shape);
  const std::size_t m = wv.dim(0), k = wv.dim(1);
  if (bv.size() != m) mismatch("linear", wv.shape, bv.shape);
  Tensor<T> out(Shape{m});
  out.data = bv.data;
  kernels::gemv(wv.data.data(), m, k, xv.data.data(), out.data.data());
  int wi = w.id(), bi = b.id(), xi = x.id();
  auto fn = [wi, bi, xi, m, k](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(bi)) {
      auto& db = t.grad(bi);
      for (std::size_t i = 0; i < m; ++i) db[i] += g[i];
    }
    const T* W = t.value(wi).data.data();
    const T* X = t.value(xi).data.data();
    if (t.needs_grad(wi)) kernels::ger(g.data(), m, X, k, t.grad(wi).data());
    if (t.needs_grad(xi)) kernels::gemv_t(W, m, k, g.data(), t.grad(xi).data());
  };
  return Var<T>(&tape, tape.push(std::move(out), any_grad<T>(in), fn, "linear"));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Var<T> in[] = {a, b};
  Tape<T>& tape = same_tape<T>(in);
  if (a.shape() != b.shape()) mismatch("add", a.shape(), b.shape());
  Tensor<T> out = a.value();
  out.requires_grad = false;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  int ai = a.id(), bi = b.id();
  auto fn = [ai, bi](Tape<T>& t, int self) {
    const auto g = t.grad(self);
    for (int id : {ai, bi}) {
      if (!t.needs_grad(id)) continue;
      auto& d = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  };
  return Var<T>(&tape, tape.push(std::move(out), any_grad<T>(in), fn, "add"));
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, scale(b, T{-1}));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const Var<T> in[] = {a, b};
  Tape<T>& tape = same_tape<T>(in);
  if (a.shape() != b.shape()) mismatch("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av[i] * bv[i];
  int ai = a.id(), bi = b.id();
  auto fn = [ai, bi](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(ai).data;
    const auto& bv = t.value(bi).data;
    if (t.needs_grad(ai)) {
      auto& d = t.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.needs_grad(bi)) {
      auto& d = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  };
  return Var<T>(&tape, tape.push(std::move(out), any_grad<T>(in), fn, "mul"));
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary(
      a, "scale", [factor](T x) { return factor * x; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape<T>& tape = same_tape<T>(parts);
  std::vector<int> ids;
  std::vector<std::size_t> sizes;
  Tensor<T> out;
  for (const auto& p : parts) {
    if (p.value().rank() != 1) mismatch("concat", parts[0].shape(), p.shape());
    ids.push_back(p.id());
    sizes.push_back(p.size());
    const auto& d = p.value().data;
    out.data.insert(out.data.end(), d.begin(), d.end());
  }
  out.shape = Shape{out.data.size()};
  auto fn = [ids, sizes](Tape<T>& t, int self) {
    const auto g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (t.needs_grad(ids[j])) {
        auto& d = t.grad(ids[j]);
        for (std::size_t i = 0; i < sizes[j]; ++i) d[i] += g[off + i];
      }
      off += sizes[j];
    }
  };
  return Var<T>(&tape, tape.push(std::move(out), any_grad<T>(parts), fn, "concat"));
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t offset, std::size_t length) {
  Tape<T>& tape = a.tape();
  const auto& av = a.value();
  if (av.rank() != 1 || offset + length > av.size()) {
    throw ShapeError("slice: range [" + std::to_string(offset) + ", " +
                     std::to_string(offset + length) + ") outside shape " + shape_str(av.shape));
  }
  Tensor<T> out(Shape{length});
  std::copy_n(av.data.begin() + static_cast<std::ptrdiff_t>(offset), length, out.data.begin());
  int ai = a.id();
  auto fn = [ai, offset, length](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& d = t.grad(ai);
    for (std::size_t i = 0; i < length; ++i) d[offset + i] += g[i];
  };
  return Var<T>(&tape, tape.push(std::move(out), tape.needs_grad(ai), fn, "slice"));
}

template <typename T>
Var<T> stack(std::span<const Var<T>> rows) {
  if (rows.empty()) throw ShapeError("stack: no inputs");
  Tape<T>& tape = same_tape<T>(rows);
  const std::size_t d = rows[0].size();
  std::vector<int> ids;
  Tensor<T> out(Shape{rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].value().rank() != 1 || rows[r].size() != d) {
      mismatch("stack", rows[0].shape(), rows[r].shape());
    }
    ids.push_back(rows[r].id());
    std::copy(rows[r].value().data.begin(), rows[r].value().data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  auto fn = [ids, d](Tape<T>& t, int self) {
    const auto g = t.grad(self);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (!t.needs_grad(ids[r])) continue;
      auto& dr = t.grad(ids[r]);
      for (std::size_t i = 0; i < d; ++i) dr[i] += g[r * d + i];
    }
  };
  return Var<T>(&tape, tape.push(std::move(out), any_grad<T>(rows), fn, "stack"));
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  Tape<T>& tape = a.tape();
  const auto& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose: needs a matrix, got " + shape_str(av.shape));
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = av.data[i * c + j];
  int ai = a.id();
  auto fn = [ai, r, c](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& d = t.grad(ai);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
  };
  return Var<T>(&tape, tape.push(std::move(out), tape.needs_grad(ai), fn, "transpose"));
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary(
      a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(
      a, "sigmoid", [](T x) { return T{1} / (T{1} + std::exp(-x)); },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary(
      a, "relu", [](T x) { return x > T{0} ? x : T{0}; },
      [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  for (T v : a.value().data) {
    if (!(v > T{0})) throw NumericError("log of non-positive value " + std::to_string(v));
  }
  return unary(
      a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Var<T> log1m(const Var<T>& a) {
  for (T v : a.value().data) {
    if (!(v < T{1})) throw NumericError("log(1-x) of x >= 1: " + std::to_string(v));
  }
  return unary(
      a, "log1m", [](T x) { return std::log1p(-x); }, [](T x, T) { return T{-1} / (T{1} - x); });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return unary(
      a, "clamp", [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; });
}

template <typename T>
Var<T> max_pool(std::span<const Var<T>> inputs) {
  if (inputs.empty()) throw ShapeError("max_pool: no inputs");
  Tape<T>& tape = same_tape<T>(inputs);
  Tensor<T> out = inputs[0].value();
  out.requires_grad = false;
  std::vector<int> ids{inputs[0].id()};
  std::vector<std::size_t> arg(out.size(), 0);
  for (std::size_t j = 1; j < inputs.size(); ++j) {
    if (inputs[j].shape() != out.shape) mismatch("max_pool", out.shape, inputs[j].shape());
    ids.push_back(inputs[j].id());
    const auto& d = inputs[j].value().data;
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (d[i] > out.data[i]) {
        out.data[i] = d[i];
        arg[i] = j;
      }
    }
  }
  auto fn = [ids, arg](Tape<T>& t, int self) {
    const auto g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      int id = ids[arg[i]];
      if (t.needs_grad(id)) t.grad(id)[i] += g[i];
    }
  };
  return Var<T>(&tape, tape.push(std::move(out), any_grad<T>(inputs), fn, "max_pool"));
}

template <typename T>
Var<T> softmax(const Var<T>& a) {
  Tape<T>& tape = a.tape();
  const auto& av = a.value();
  if (av.rank() != 1) throw ShapeError("softmax: needs a vector, got " + shape_str(av.shape));
  Tensor<T> out(av.shape);
  const T mx = *std::max_element(av.data.begin(), av.data.end());
  T z = 0;
  for (std::size_t i = 0; i < av.size(); ++i) z += (out.data[i] = std::exp(av.data[i] - mx));
  for (auto& v : out.data) v /= z;
  int ai = a.id();
  auto fn = [ai](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self).data;
    T dot = 0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += g[i] * y[i];
    auto& d = t.grad(ai);
    for (std::size_t i = 0; i < y.size(); ++i) d[i] += y[i] * (g[i] - dot);
  };
  return Var<T>(&tape, tape.push(std::move(out), tape.needs_grad(ai), fn, "softmax"));
}

template <typename T>
Var<T> log_softmax(const Var<T>& a) {
  Tape<T>& tape = a.tape();
  const auto& av = a.value();
  if (av.rank() != 1) throw ShapeError("log_softmax: needs a vector, got " + shape_str(av.shape));
  const T mx = *std::max_element(av.data.begin(), av.data.end());
  T z = 0;
  for (T v : av.data) z += std::exp(v - mx);
  const T lz = mx + std::log(z);
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] - lz;
  int ai = a.id();
  auto fn = [ai](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self).data;
    T gs = 0;
    for (T v : g) gs += v;
    auto& d = t.grad(ai);
    for (std::size_t i = 0; i < y.size(); ++i) d[i] += g[i] - std::exp(y[i]) * gs;
  };
  return Var<T>(&tape, tape.push(std::move(out), tape.needs_grad(ai), fn, "log_softmax"));
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::size_t id) {
  Tape<T>& tape = table.tape();
  const auto& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding: table must be a matrix, got " + shape_str(tv.shape));
  if (id >= tv.dim(0)) {
    throw ShapeError("embedding: id " + std::to_string(id) + " outside table of shape " +
                     shape_str(tv.shape));
  }
  const std::size_t d = tv.dim(1);
  Tensor<T> out(Shape{d});
  std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(id * d), d, out.data.begin());
  int ti = table.id();
  auto fn = [ti, id, d](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    T* row = t.grad(ti).data() + id * d;
    for (std::size_t i = 0; i < d; ++i) row[i] += g[i];
  };
  return Var<T>(&tape, tape.push(std::move(out), tape.needs_grad(ti), fn, "embedding"));
}

template <typename T>
Var<T> pick(const Var<T>& a, std::size_t index) {
  return slice(a, index, 1);
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tape<T>& tape = a.tape();
  T s = 0;
  for (T v : a.value().data) s += v;
  int ai = a.id();
  auto fn = [ai](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    for (auto& d : t.grad(ai)) d += g;
  };
  return Var<T>(&tape, tape.push(Tensor<T>::scalar(s), tape.needs_grad(ai), fn, "sum"));
}

template <typename T>
Var<T> mean(std::span<const Var<T>> scalars) {
  if (scalars.empty()) throw ShapeError("mean: no inputs");
  Tape<T>& tape = same_tape<T>(scalars);
  T s = 0;
  std::vector<int> ids;
  for (const auto& v : scalars) {
    s += v.item();
    ids.push_back(v.id());
  }
  const T inv = T{1} / static_cast<T>(scalars.size());
  auto fn = [ids, inv](Tape<T>& t, int self) {
    const T g = t.grad(self)[0] * inv;
    for (int id : ids) {
      if (t.needs_grad(id)) t.grad(id)[0] += g;
    }
  };
  return Var<T>(&tape, tape.push(Tensor<T>::scalar(s * inv), any_grad<T>(scalars), fn, "mean"));
}

template <typename T>
Var<T> bce_with_logit(const Var<T>& z, T y) {
  if (z.size() != 1) throw ShapeError("bce_with_logit: needs a scalar, got " + shape_str(z.shape()));
  return unary(
      z, "bce_with_logit",
      [y](T x) {
        const T sp = x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        return sp - y * x;
      },
      [y](T x, T) { return T{1} / (T{1} + std::exp(-x)) - y; });
}

template <typename T>
Var<T> tensor_op(OpKind kind, std::span<const Var<T>> inputs, std::size_t index) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError("tensor_op: expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::kMatmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::kAdd: need(2); return add(inputs[0], inputs[1]);
    case OpKind::kMul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::kConcat: return concat(inputs);
    case OpKind::kTanh: need(1); return tanh(inputs[0]);
    case OpKind::kSigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::kRelu: need(1); return relu(inputs[0]);
    case OpKind::kMaxPoolElementwise: return max_pool(inputs);
    case OpKind::kSoftmax: need(1); return softmax(inputs[0]);
    case OpKind::kEmbeddingLookup: need(1); return embedding(inputs[0], index);
  }
  throw Error("tensor_op: unknown kind");
}

#define ODL_INSTANTIATE_OPS(T)                                                 \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                        \
  template Var<T> add(const Var<T>&, const Var<T>&);                           \
  template Var<T> sub(const Var<T>&, const Var<T>&);                           \
  template Var<T> mul(const Var<T>&, const Var<T>&);                           \
  template Var<T> scale(const Var<T>&, T);                                     \
  template Var<T> concat(std::span<const Var<T>>);                             \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t);              \
  template Var<T> stack(std::span<const Var<T>>);                              \
  template Var<T> transpose(const Var<T>&);                                    \
  template Var<T> tanh(const Var<T>&);                                         \
  template Var<T> sigmoid(const Var<T>&);                                      \
  template Var<T> relu(const Var<T>&);                                         \
  template Var<T> log(const Var<T>&);                                          \
  template Var<T> log1m(const Var<T>&);                                        \
  template Var<T> clamp(const Var<T>&, T, T);                                  \
  template Var<T> max_pool(std::span<const Var<T>>);                           \
  template Var<T> softmax(const Var<T>&);                                      \
  template Var<T> log_softmax(const Var<T>&);                                  \
  template Var<T> embedding(const Var<T>&, std::size_t);                       \
  template Var<T> pick(const Var<T>&, std::size_t);                            \
  template Var<T> sum(const Var<T>&);                                          \
  template Var<T> mean(std::span<const Var<T>>);                               \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);         \
  template Var<T> bce_with_logit(const Var<T>&, T);                            \
  template Var<T> tensor_op(OpKind, std::span<const Var<T>>, std::size_t);

ODL_INSTANTIATE_OPS(float)
ODL_INSTANTIATE_OPS(double)

}  // namespace odl::nn
