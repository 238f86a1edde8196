#include "odl/numerics/lstm.hpp"

#include <cmath>

#include "kernels.hpp"

namespace odl::nn {

template <typename T>
void add_lstm_params(ParameterSet<T>& params, const std::string& prefix, LstmShape shape) {
  if (shape.input == 0 || shape.hidden == 0) throw ConfigError("lstm '" + prefix + "': zero dimension");
  params.add(prefix + ".wx", Shape{4 * shape.hidden, shape.input});
  params.add(prefix + ".wh", Shape{4 * shape.hidden, shape.hidden});
  params.add(prefix + ".b", Shape{4 * shape.hidden});
}

template <typename T, typename PS>
LstmWeights<T> bind_lstm_impl(Tape<T>& tape, PS& params, const std::string& prefix) {
  LstmWeights<T> w;
  w.wx = tape.param(params.get(prefix + ".wx"));
  w.wh = tape.param(params.get(prefix + ".wh"));
  w.b = tape.param(params.get(prefix + ".b"));
  w.hidden = w.wh.value().dim(1);
  return w;
}

template <typename T>
LstmWeights<T> bind_lstm(Tape<T>& tape, ParameterSet<T>& params, const std::string& prefix) {
  return bind_lstm_impl<T>(tape, params, prefix);
}

template <typename T>
LstmWeights<T> bind_lstm(Tape<T>& tape, const ParameterSet<T>& params, const std::string& prefix) {
  return bind_lstm_impl<T>(tape, params, prefix);
}

template <typename T>
LstmState<T> zero_state(Tape<T>& tape, std::size_t hidden) {
  Var<T> z = tape.constant(Tensor<T>(Shape{hidden}));
  return {z, z};
}

namespace {

inline double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// Fused cell: one node holds [h'; c'] and the gate activations live in the
// backward closure.
template <typename T>
LstmState<T> lstm_cell(const Var<T>& x, const LstmState<T>& prev, const LstmWeights<T>& w) {
  Tape<T>& tape = x.tape();
  const std::size_t H = w.hidden;
  const auto& xv = x.value();
  const auto& wxv = w.wx.value();
  const std::size_t in = xv.size();
  if (xv.rank() != 1 || wxv.dim(1) != in || prev.h.size() != H || prev.c.size() != H ||
      w.b.size() != 4 * H) {
    throw ShapeError("lstm_cell: input " + shape_str(xv.shape) + " / state " +
                     shape_str(prev.h.shape()) + " do not match weights " + shape_str(wxv.shape));
  }
  const T* Wx = wxv.data.data();
  const T* Wh = w.wh.value().data.data();
  const T* B = w.b.value().data.data();
  const T* X = xv.data.data();
  const T* Hp = prev.h.value().data.data();
  const T* Cp = prev.c.value().data.data();

  std::vector<T> gates(B, B + 4 * H);
  kernels::gemv(Wx, 4 * H, in, X, gates.data());
  kernels::gemv(Wh, 4 * H, H, Hp, gates.data());
  Tensor<T> out(Shape{2 * H});
  std::vector<T> tanh_c(H);
  for (std::size_t j = 0; j < H; ++j) {
    const T ig = static_cast<T>(sigm(gates[j]));
    const T fg = static_cast<T>(sigm(gates[H + j]));
    const T gg = std::tanh(gates[2 * H + j]);
    const T og = static_cast<T>(sigm(gates[3 * H + j]));
    gates[j] = ig;
    gates[H + j] = fg;
    gates[2 * H + j] = gg;
    gates[3 * H + j] = og;
    const T c = fg * Cp[j] + ig * gg;
    tanh_c[j] = std::tanh(c);
    out.data[j] = og * tanh_c[j];
    out.data[H + j] = c;
  }

  const int xi = x.id(), hi = prev.h.id(), ci = prev.c.id();
  const int wxi = w.wx.id(), whi = w.wh.id(), bi = w.b.id();
  const Var<T> ins[] = {x, prev.h, prev.c, w.wx, w.wh, w.b};
  bool needs = false;
  for (const auto& v : ins) needs = needs || tape.needs_grad(v.id());

  auto fn = [=, gates = std::move(gates), tanh_c = std::move(tanh_c)](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const T* Cp = t.value(ci).data.data();
    std::vector<T> dz(4 * H);
    std::vector<T> dc_prev(H);
    for (std::size_t j = 0; j < H; ++j) {
      const T ig = gates[j], fg = gates[H + j], gg = gates[2 * H + j], og = gates[3 * H + j];
      const T dh = g[j];
      const T dc = g[H + j] + dh * og * (T{1} - tanh_c[j] * tanh_c[j]);
      dz[j] = dc * gg * ig * (T{1} - ig);
      dz[H + j] = dc * Cp[j] * fg * (T{1} - fg);
      dz[2 * H + j] = dc * ig * (T{1} - gg * gg);
      dz[3 * H + j] = dh * tanh_c[j] * og * (T{1} - og);
      dc_prev[j] = dc * fg;
    }
    if (t.needs_grad(ci)) {
      auto& d = t.grad(ci);
      for (std::size_t j = 0; j < H; ++j) d[j] += dc_prev[j];
    }
    if (t.needs_grad(bi)) {
      auto& d = t.grad(bi);
      for (std::size_t r = 0; r < 4 * H; ++r) d[r] += dz[r];
    }
    const T* X = t.value(xi).data.data();
    const T* Hp = t.value(hi).data.data();
    if (t.needs_grad(wxi)) kernels::ger(dz.data(), 4 * H, X, in, t.grad(wxi).data());
    if (t.needs_grad(whi)) kernels::ger(dz.data(), 4 * H, Hp, H, t.grad(whi).data());
    if (t.needs_grad(xi)) kernels::gemv_t(t.value(wxi).data.data(), 4 * H, in, dz.data(), t.grad(xi).data());
    if (t.needs_grad(hi)) kernels::gemv_t(t.value(whi).data.data(), 4 * H, H, dz.data(), t.grad(hi).data());
  };
  Var<T> hc(&tape, tape.push(std::move(out), needs, fn, "lstm_cell"));
  return {slice(hc, 0, H), slice(hc, H, H)};
}

template <typename T>
BiLstmOutput<T> bilstm(std::span<const Var<T>> sequence, const LstmWeights<T>& fwd,
                       const LstmWeights<T>& bwd) {
  if (sequence.empty()) throw ShapeError("bilstm: empty sequence");
  Tape<T>& tape = sequence[0].tape();
  const std::size_t n = sequence.size();
  BiLstmOutput<T> out;
  out.forward.reserve(n);
  out.backward.resize(n);
  LstmState<T> s = zero_state(tape, fwd.hidden);
  for (std::size_t i = 0; i < n; ++i) {
    s = lstm_cell(sequence[i], s, fwd);
    out.forward.push_back(s.h);
  }
  s = zero_state(tape, bwd.hidden);
  for (std::size_t i = n; i-- > 0;) {
    s = lstm_cell(sequence[i], s, bwd);
    out.backward[i] = s.h;
  }
  return out;
}

#define ODL_INSTANTIATE_LSTM(T)                                                                \
  template void add_lstm_params(ParameterSet<T>&, const std::string&, LstmShape);              \
  template LstmWeights<T> bind_lstm(Tape<T>&, ParameterSet<T>&, const std::string&);           \
  template LstmWeights<T> bind_lstm(Tape<T>&, const ParameterSet<T>&, const std::string&);     \
  template LstmState<T> zero_state(Tape<T>&, std::size_t);                                     \
  template LstmState<T> lstm_cell(const Var<T>&, const LstmState<T>&, const LstmWeights<T>&);  \
  template BiLstmOutput<T> bilstm(std::span<const Var<T>>, const LstmWeights<T>&,              \
                                  const LstmWeights<T>&);

ODL_INSTANTIATE_LSTM(float)
ODL_INSTANTIATE_LSTM(double)

}  // namespace odl::nn
