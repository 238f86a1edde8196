#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "odl/numerics/checkpoint.hpp"
#include "odl/numerics/gradcheck.hpp"
#include "odl/numerics/lstm.hpp"
#include "odl/numerics/ops.hpp"
#include "odl/numerics/optimizer.hpp"

using namespace odl;
using namespace odl::nn;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

void check_grad(const std::function<Var<double>(Tape<double>&)>& f, ParameterSet<double>& ps) {
  auto r = finite_diff_check(f, ps);
  INFO("worst ", r.worst_param, "[", r.worst_index, "] analytic=", r.analytic, " numeric=", r.numeric);
  CHECK(r.max_rel_error < 1e-4);
}

}  // namespace

TEST_CASE("tensor_op basics") {
  Tape<float> tape;
  auto z = tape.constant(Tensor<float>(Shape{3}));
  const Var<float> zin[] = {z};
  CHECK(tensor_op<float>(OpKind::kTanh, zin).value().data == std::vector<float>{0, 0, 0});

  Tensor<float> a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<float> eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Var<float> mm[] = {tape.constant(a), tape.constant(eye)};
  CHECK(tensor_op<float>(OpKind::kMatmul, mm).value() == a);

  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    Tensor<float> v(Shape{7});
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(-10, 10));
    auto s = softmax(tape.constant(v));
    double total = 0;
    for (float p : s.value().data) total += p;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("shape mismatches name the op and shapes") {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>(Shape{2, 3}));
  auto b = tape.constant(Tensor<float>(Shape{2}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  const Var<float> bad[] = {a, b};
  CHECK_THROWS_AS(max_pool<float>(bad), ShapeError);
  CHECK_THROWS_AS(embedding(a, 5), ShapeError);
}

TEST_CASE("non-finite values are trapped") {
  Tape<float> tape;
  Tensor<float> big(Shape{1}, {1e30f});
  auto x = tape.constant(big);
  CHECK_THROWS_AS(mul(x, x), NumericError);
  CHECK_THROWS_AS(log(tape.constant(Tensor<float>(Shape{1}, {0.0f}))), NumericError);
}

TEST_CASE("ops stay finite on inputs in [-10, 10]") {
  Rng rng(2);
  ParameterSet<float> ps;
  add_lstm_params(ps, "l", {5, 4});
  ps.init_uniform(rng, 0.08);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<float> tape;
    auto w = bind_lstm(tape, ps, "l");
    std::vector<Var<float>> seq;
    for (int i = 0; i < 6; ++i) {
      Tensor<float> x(Shape{5});
      for (auto& v : x.data) v = static_cast<float>(rng.uniform(-10, 10));
      seq.push_back(tape.constant(x));
    }
    auto out = bilstm<float>(seq, w, w);
    for (auto& h : out.forward) {
      for (float v : h.value().data) CHECK(std::abs(v) <= 1.0f);
    }
    auto p = softmax(concat<float>(seq));
    CHECK(std::isfinite(log_softmax(concat<float>(seq)).value().data[0]));
    CHECK(p.size() == 30);
  }
}

TEST_CASE("backward: sum(W) gives all-ones, 0*f gives zeros") {
  ParameterSet<double> ps;
  auto& w = ps.add("w", Shape{2, 3});
  Rng rng(4);
  ps.init_uniform(rng, 1.0);
  {
    Tape<double> tape;
    tape.backward(sum(tape.param(w)));
    CHECK(w.grad == std::vector<double>(6, 1.0));
  }
  ps.zero_grad();
  {
    Tape<double> tape;
    auto f = sum(tanh(tape.param(w)));
    tape.backward(scale(f, 0.0));
    CHECK(w.grad == std::vector<double>(6, 0.0));
  }
}

TEST_CASE("backward contract errors") {
  ParameterSet<double> ps;
  auto& w = ps.add("w", Shape{3});
  Tape<double> tape;
  auto v = tape.param(w);
  CHECK_THROWS_AS(tape.backward(v), ShapeError);
  auto s = sum(v);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), Error);
  Tape<double> inference(false);
  CHECK_THROWS_AS(inference.backward(sum(inference.param(w))), Error);
}

TEST_CASE("finite_diff_check contract") {
  ParameterSet<double> ps;
  auto& w = ps.add("w", Shape{4});
  Rng rng(6);
  ps.init_uniform(rng, 1.0);
  Tensor<double> x = random_tensor(Shape{4}, rng);
  auto linear_f = [&](Tape<double>& t) { return sum(mul(t.param(w), t.constant(x))); };
  CHECK(finite_diff_check(linear_f, ps).max_rel_error < 1e-8);

  auto sig = [&](Tape<double>& t) { return sigmoid(sum(mul(t.param(w), t.constant(x)))); };
  CHECK(finite_diff_check(sig, ps).max_rel_error < 1e-4);
  CHECK_THROWS_AS(finite_diff_check(sig, ps, 0.0), ConfigError);
}

TEST_CASE("every differentiable op passes the finite-difference check") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t m = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const std::size_t k = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 4));
    ParameterSet<double> ps;
    auto& A = ps.add("A", Shape{m, k});
    auto& B = ps.add("B", Shape{k, n});
    auto& x = ps.add("x", Shape{k});
    auto& y = ps.add("y", Shape{k});
    auto& E = ps.add("E", Shape{5, k});
    auto& b = ps.add("b", Shape{m});
    ps.init_uniform(rng, 1.0);
    auto weights = random_tensor(Shape{m * n}, rng);
    auto weights_m = random_tensor(Shape{m}, rng);
    auto weights_2k = random_tensor(Shape{2 * k}, rng);
    auto mix = random_tensor(Shape{2}, rng);

    // weighted sums keep the loss from being symmetric in the outputs
    auto wsum = [&](Tape<double>& t, const Var<double>& v, const Tensor<double>& wt) {
      Tensor<double> w2(v.shape(), std::vector<double>(wt.data.begin(), wt.data.begin() + static_cast<long>(v.size())));
      return sum(mul(v, t.constant(w2)));
    };
    check_grad([&](Tape<double>& t) { return wsum(t, matmul(t.param(A), t.param(B)), weights); }, ps);
    check_grad([&](Tape<double>& t) { return wsum(t, matmul(t.param(A), t.param(x)), weights_m); }, ps);
    check_grad([&](Tape<double>& t) { return wsum(t, linear(t.param(A), t.param(b), t.param(x)), weights_m); }, ps);
    check_grad([&](Tape<double>& t) { return wsum(t, tanh(mul(t.param(x), t.param(y))), weights_2k); }, ps);
    check_grad([&](Tape<double>& t) { return wsum(t, sigmoid(sub(t.param(x), t.param(y))), weights_2k); }, ps);
    check_grad([&](Tape<double>& t) { return wsum(t, relu(add(t.param(x), t.param(y))), weights_2k); }, ps);
    check_grad([&](Tape<double>& t) {
      const Var<double> parts[] = {t.param(x), t.param(y)};
      return wsum(t, softmax(concat<double>(parts)), weights_2k);
    }, ps);
    check_grad([&](Tape<double>& t) {
      const Var<double> parts[] = {t.param(x), t.param(y)};
      return pick(log_softmax(concat<double>(parts)), 0);
    }, ps);
    check_grad([&](Tape<double>& t) {
      const Var<double> parts[] = {t.param(x), t.param(y), tanh(t.param(x))};
      return wsum(t, max_pool<double>(parts), weights_2k);
    }, ps);
    check_grad([&](Tape<double>& t) { return sum(embedding(t.param(E), 2)); }, ps);
    check_grad([&](Tape<double>& t) {
      const Var<double> rows[] = {t.param(x), t.param(y)};
      return wsum(t, matmul(transpose(stack<double>(rows)), t.constant(mix)), weights_2k);
    }, ps);
    check_grad([&](Tape<double>& t) { return bce_with_logit(sum(mul(t.param(x), t.param(y))), 1.0); }, ps);
    check_grad([&](Tape<double>& t) {
      auto p = sigmoid(sum(t.param(x)));
      return add(log(p), log1m(p));
    }, ps);
  }
}

TEST_CASE("random 3-layer composite matches central differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(100 + seed);
    ParameterSet<double> ps;
    add_lstm_params(ps, "l", {3, 4});
    ps.add("w1", Shape{5, 4});
    ps.add("b1", Shape{5});
    ps.add("w2", Shape{1, 5});
    ps.add("b2", Shape{1});
    ps.init_uniform(rng, 0.5);
    auto x = random_tensor(Shape{3}, rng);
    auto f = [&](Tape<double>& t) {
      auto w = bind_lstm(t, ps, "l");
      auto s = lstm_cell(t.constant(x), zero_state(t, 4), w);
      s = lstm_cell(t.constant(x), s, w);
      auto h = tanh(linear(t.param(ps.get("w1")), t.param(ps.get("b1")), s.h));
      return bce_with_logit(linear(t.param(ps.get("w2")), t.param(ps.get("b2")), h), 1.0);
    };
    check_grad(f, ps);
  }
}

TEST_CASE("lstm_cell") {
  ParameterSet<double> ps;
  add_lstm_params(ps, "l", {3, 4});
  Tape<double> tape;
  auto w = bind_lstm(tape, ps, "l");
  Rng rng(9);
  auto s = lstm_cell(tape.constant(random_tensor(Shape{3}, rng)), zero_state(tape, 4), w);
  CHECK(s.h.value().data == std::vector<double>(4, 0.0));

  ps.init_uniform(rng, 2.0);
  Tape<double> t2;
  auto w2 = bind_lstm(t2, ps, "l");
  auto x = t2.constant(random_tensor(Shape{3}, rng, -10, 10));
  LstmState<double> st = zero_state(t2, 4);
  for (int i = 0; i < 200; ++i) {
    st = lstm_cell(x, st, w2);
    for (double v : st.h.value().data) REQUIRE(std::abs(v) <= 1.0);
  }
  CHECK_THROWS_AS(lstm_cell(t2.constant(random_tensor(Shape{2}, rng)), st, w2), ShapeError);

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng r(seed);
    ps.init_uniform(r, 0.5);
    auto xi = random_tensor(Shape{3}, r);
    auto h0 = random_tensor(Shape{4}, r);
    auto c0 = random_tensor(Shape{4}, r);
    check_grad([&](Tape<double>& t) {
      auto ww = bind_lstm(t, ps, "l");
      auto out = lstm_cell(t.constant(xi), {t.constant(h0), t.constant(c0)}, ww);
      return add(sum(out.h), scale(sum(out.c), 0.3));
    }, ps);
  }
}

TEST_CASE("bilstm") {
  ParameterSet<double> ps;
  add_lstm_params(ps, "f", {3, 4});
  add_lstm_params(ps, "b", {3, 4});
  Rng rng(12);
  ps.init_uniform(rng, 0.5);
  {
    Tape<double> tape;
    const Var<double> one[] = {tape.constant(random_tensor(Shape{3}, rng))};
    auto out = bilstm<double>(one, bind_lstm(tape, ps, "f"), bind_lstm(tape, ps, "b"));
    CHECK(out.forward.size() == 1);
    CHECK(out.backward.size() == 1);
    std::vector<Var<double>> none;
    CHECK_THROWS_AS(bilstm<double>(none, bind_lstm(tape, ps, "f"), bind_lstm(tape, ps, "b")), ShapeError);
  }
  // With both directions sharing one weight set, reversing the input swaps
  // the final forward and backward states.
  {
    std::vector<Tensor<double>> xs;
    for (int i = 0; i < 5; ++i) xs.push_back(random_tensor(Shape{3}, rng));
    Tape<double> tape;
    auto w = bind_lstm(tape, ps, "f");
    std::vector<Var<double>> seq, rev;
    for (auto& x : xs) seq.push_back(tape.constant(x));
    for (auto it = xs.rbegin(); it != xs.rend(); ++it) rev.push_back(tape.constant(*it));
    auto a = bilstm<double>(seq, w, w);
    auto b = bilstm<double>(rev, w, w);
    CHECK(a.forward.back().value() == b.backward.front().value());
    CHECK(a.backward.front().value() == b.forward.back().value());
    // direct evaluation of the forward recursion
    LstmState<double> s = zero_state(tape, 4);
    for (auto& x : seq) s = lstm_cell(x, s, w);
    CHECK(s.h.value() == a.forward.back().value());
  }
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng r(40 + seed);
    ps.init_uniform(r, 0.5);
    std::vector<Tensor<double>> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(random_tensor(Shape{3}, r));
    check_grad([&](Tape<double>& t) {
      std::vector<Var<double>> seq;
      for (auto& x : xs) seq.push_back(t.constant(x));
      auto out = bilstm<double>(seq, bind_lstm(t, ps, "f"), bind_lstm(t, ps, "b"));
      const Var<double> ends[] = {out.backward.front(), out.forward.back()};
      auto u = concat<double>(ends);
      return sum(mul(u, u));
    }, ps);
  }
}

TEST_CASE("optimizer steps") {
  ParameterSet<float> ps;
  auto& p = ps.add("p", Shape{1});
  p.value.data[0] = 1.0f;
  OptimizerConfig sgd{OptimizerKind::kSgd, 0.1};
  Optimizer<float> opt(sgd);
  GradientMap<float> g;
  g.emplace("p", Tensor<float>(Shape{1}, {1.0f}));
  opt.step(ps, g);
  CHECK(p.value.data[0] == doctest::Approx(0.9f));

  GradientMap<float> zero;
  zero.emplace("p", Tensor<float>(Shape{1}, {0.0f}));
  Optimizer<float> adam;
  adam.step(ps, zero);
  CHECK(p.value.data[0] == doctest::Approx(0.9f));
  CHECK_THROWS_AS(adam.step(ps, GradientMap<float>{}), Error);
  CHECK_THROWS_AS(Optimizer<float>(OptimizerConfig{OptimizerKind::kSgd, 0.0}), ConfigError);
}

TEST_CASE("adam converges on a quadratic bowl") {
  ParameterSet<double> ps;
  auto& p = ps.add("p", Shape{1});
  p.value.data[0] = 1.0;
  OptimizerConfig cfg;
  cfg.learning_rate = 0.05;
  Optimizer<double> opt(cfg);
  int steps = 0;
  for (; steps < 500 && std::abs(p.value.data[0]) >= 1e-2; ++steps) {
    Tape<double> tape;
    auto v = tape.param(p);
    tape.backward(sum(mul(v, v)));
    opt.step(ps);
  }
  CHECK(std::abs(p.value.data[0]) < 1e-2);
  CHECK(steps <= 500);
}

TEST_CASE("gradient clipping bounds the global norm") {
  ParameterSet<float> ps;
  auto& a = ps.add("a", Shape{2});
  a.grad = {30.0f, 40.0f};
  CHECK(clip_grad_norm(ps, 5.0) == doctest::Approx(50.0));
  CHECK(a.grad[0] == doctest::Approx(3.0f));
  CHECK(a.grad[1] == doctest::Approx(4.0f));
}

TEST_CASE("identical seeds give bit-identical trajectories") {
  auto run = [] {
    Rng rng(77);
    ParameterSet<float> ps;
    add_lstm_params(ps, "l", {3, 5});
    ps.add("out", Shape{1, 5});
    ps.init_uniform(rng, 0.08);
    Optimizer<float> opt;
    Rng data = rng.split("data");
    for (int step = 0; step < 30; ++step) {
      Tape<float> tape;
      auto w = bind_lstm(tape, ps, "l");
      Tensor<float> x(Shape{3});
      for (auto& v : x.data) v = static_cast<float>(data.uniform(-1, 1));
      auto s = lstm_cell(tape.constant(x), zero_state(tape, 5), w);
      auto z = matmul(tape.param(ps.get("out")), s.h);
      tape.backward(bce_with_logit(z, step % 2 ? 1.0f : 0.0f));
      opt.step(ps);
    }
    return ps;
  };
  CHECK(run().same_values(run()));
}

TEST_CASE("checkpoint round trip is value exact and byte stable") {
  Rng rng(5);
  ParameterSet<float> ps;
  add_lstm_params(ps, "enc", {3, 4});
  ps.add("emb", Shape{7, 3});
  ps.init_uniform(rng, 0.08);
  ps.get("emb").value.data[0] = 1e-38f;
  ps.get("emb").value.data[1] = 3.4e38f;
  ps.get("emb").value.data[2] = -0.1f;
  nlohmann::json cfg = {{"kind", "test"}};
  const std::string s1 = checkpoint_to_string(ps, cfg);
  auto ck = checkpoint_from_string(s1);
  CHECK(ck.config == cfg);
  ParameterSet<float> target = ps;
  target.init_uniform(rng, 1.0);
  assign_parameters(target, ck.params);
  CHECK(target.same_values(ps));
  CHECK(checkpoint_to_string(target, cfg) == s1);

  CHECK_THROWS_AS(checkpoint_from_string(s1.substr(0, s1.size() / 2)), ParseError);

  ParameterSet<float> other;
  other.add("emb", Shape{7, 4});
  add_lstm_params(other, "enc", {3, 4});
  try {
    assign_parameters(other, ck.params);
    FAIL("expected mismatch");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("emb") != std::string::npos);
  }
  CHECK(other.get("emb").value.data == std::vector<float>(28, 0.0f));

  auto path = std::filesystem::temp_directory_path() / "odl_ck_test.json";
  save_checkpoint(path, ps, cfg);
  auto loaded = load_checkpoint(path);
  CHECK(checkpoint_to_string(loaded.params, loaded.config) == s1);
  std::filesystem::remove(path);
}
