#pragma once

#include <span>
#include <string>
#include <vector>

#include "odl/numerics/ops.hpp"

namespace odl::nn {

// Weights of one LSTM direction, gate blocks ordered (input, forget, cell, output).
//   <prefix>.wx  (4H, in)
//   <prefix>.wh  (4H, H)
//   <prefix>.b   (4H)
struct LstmShape {
  std::size_t input = 0;
  std::size_t hidden = 0;
};

template <typename T>
void add_lstm_params(ParameterSet<T>& params, const std::string& prefix, LstmShape shape);

template <typename T>
struct LstmWeights {
  Var<T> wx, wh, b;
  std::size_t hidden = 0;
};

// Trainable binding; the const overload binds frozen weights.
template <typename T>
LstmWeights<T> bind_lstm(Tape<T>& tape, ParameterSet<T>& params, const std::string& prefix);
template <typename T>
LstmWeights<T> bind_lstm(Tape<T>& tape, const ParameterSet<T>& params, const std::string& prefix);

template <typename T>
struct LstmState {
  Var<T> h, c;
};

template <typename T>
LstmState<T> lstm_cell(const Var<T>& x, const LstmState<T>& prev, const LstmWeights<T>& w);

template <typename T>
LstmState<T> zero_state(Tape<T>& tape, std::size_t hidden);

template <typename T>
struct BiLstmOutput {
  std::vector<Var<T>> forward;   // forward[i]: state after reading x_0..x_i
  std::vector<Var<T>> backward;  // backward[i]: state after reading x_{n-1}..x_i
};

template <typename T>
BiLstmOutput<T> bilstm(std::span<const Var<T>> sequence, const LstmWeights<T>& fwd,
                       const LstmWeights<T>& bwd);

}  // namespace odl::nn
