#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mtsc/errors.hpp"
#include "mtsc/ops.hpp"
#include "mtsc/verify/gradcheck.hpp"
#include "support.hpp"

using namespace mtsc;
using mtsc::testing::max_abs_diff;
using mtsc::testing::random_tensor;

namespace {

// Naive oracles, written independently of the Eigen-backed kernels.
std::vector<double> loop_matmul(const Tensor& a, const Tensor& b) {
  std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t q = 0; q < k; ++q) c[i * n + j] += a.at({i, q}) * b.at({q, j});
  return c;
}

std::vector<double> loop_conv(const Tensor& x, const Tensor& w) {
  std::size_t cin = x.size(0), len = x.size(1), cout = w.size(0), k = w.size(2);
  long left = static_cast<long>((k - 1) / 2);
  std::vector<double> y(cout * len, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t n = 0; n < len; ++n)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t t = 0; t < k; ++t) {
          long pos = static_cast<long>(n) + static_cast<long>(t) - left;
          if (pos < 0 || pos >= static_cast<long>(len)) continue;
          y[o * len + n] += w.at({o, c, t}) * x.at({c, static_cast<std::size_t>(pos)});
        }
  return y;
}

// Weighted sum with fixed random weights: a well-conditioned scalar probe.
Tensor probe_loss(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(y.shape(), rng);
  return ops::sum(ops::mul(y, w));
}

void expect_gradcheck(const std::function<Tensor()>& f, const std::vector<Parameter>& params) {
  auto report = verify::gradcheck(f, params);
  INFO("max rel err " << report.max_rel_error);
  CHECK(report.pass);
}

}  // namespace

TEST_CASE("matmul examples") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  auto r = ops::matmul(eye, m);
  CHECK(r.shape() == Shape{2, 2});
  CHECK(max_abs_diff(r.data(), m.data()) == 0.0);

  auto dot = ops::matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}));
  CHECK(dot.shape() == Shape{1, 1});
  CHECK(dot.item() == 11.0);

  Rng rng(11);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  CHECK(max_abs_diff(ops::matmul(a, b).data(), loop_matmul(a, b)) < 1e-12);
}

TEST_CASE("matmul shape error names both shapes") {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul matches loop oracle on random shapes and batches") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8), B = 1 + rng.below(3);
    auto a = random_tensor({B, m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    auto c = ops::matmul(a, b);
    REQUIRE(c.shape() == Shape{B, m, n});
    for (std::size_t bi = 0; bi < B; ++bi) {
      auto ab = ops::reshape(ops::slice(a, 0, bi, 1), {m, k});
      auto cb = ops::slice(c, 0, bi, 1);
      CHECK(max_abs_diff(cb.data(), loop_matmul(ab, b)) < 1e-12);
    }
  }
}

TEST_CASE("softmax examples and invariants") {
  auto u = ops::softmax(Tensor({3}, {0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  auto big = ops::softmax(Tensor({2}, {1000, 1000}), 0);
  CHECK(big.data()[0] == 0.5);
  CHECK(big.data()[1] == 0.5);

  // e^0 / (e^0 + 3) with the second logit at ln 3.
  auto s = ops::softmax(Tensor({2}, {0, std::log(3.0)}), 0);
  CHECK(std::fabs(s.data()[0] - 0.25) < 1e-15);
  CHECK(std::fabs(s.data()[1] - 0.75) < 1e-15);

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({3, 4, 5}, rng, false, -20, 20);
    int axis = static_cast<int>(rng.below(3));
    auto y = ops::softmax(x, axis);
    auto sums = ops::sum(y, axis);
    for (double v : sums.data()) CHECK(std::fabs(v - 1.0) < 1e-12);
    for (double v : y.data()) CHECK(v > 0.0);
  }
}

TEST_CASE("sigmoid and relu") {
  CHECK(ops::sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(ops::relu(Tensor::scalar(-2.0)).item() == 0.0);
  CHECK(ops::relu(Tensor::scalar(3.0)).item() == 3.0);
  Tensor x = Tensor::scalar(0.0, true);
  backward(ops::sigmoid(x));
  CHECK(x.grad()[0] == 0.25);
}

TEST_CASE("conv1d examples") {
  Rng rng(1);
  auto x = random_tensor({3, 7}, rng);
  // Identity kernel of width 1.
  Tensor id = Tensor::zeros({3, 3, 1});
  for (std::size_t c = 0; c < 3; ++c) id.mutable_data()[c * 3 + c] = 1.0;
  CHECK(max_abs_diff(ops::conv1d(x, id).data(), x.data()) == 0.0);

  auto y = ops::conv1d(Tensor({1, 3}, {1, 2, 3}), Tensor({1, 1, 3}, {1, 1, 1}));
  CHECK(y.shape() == Shape{1, 3});
  CHECK(y.data()[0] == 3.0);
  CHECK(y.data()[1] == 6.0);
  CHECK(y.data()[2] == 5.0);

  CHECK_THROWS_AS(ops::conv1d(Tensor::zeros({2, 0}), Tensor::zeros({1, 2, 3})), DimensionError);
}

TEST_CASE("conv1d matches nested-loop oracle, including even kernels") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    std::size_t cin = 1 + rng.below(8), cout = 1 + rng.below(8), len = 1 + rng.below(8), k = 1 + rng.below(8);
    auto x = random_tensor({cin, len}, rng);
    auto w = random_tensor({cout, cin, k}, rng);
    CHECK(max_abs_diff(ops::conv1d(x, w).data(), loop_conv(x, w)) < 1e-12);
  }
}

TEST_CASE("conv1d batch axis applies per sample") {
  Rng rng(8);
  auto x = random_tensor({3, 2, 6}, rng);
  auto w = random_tensor({4, 2, 5}, rng);
  auto y = ops::conv1d(x, w);
  for (std::size_t b = 0; b < 3; ++b) {
    auto xb = ops::reshape(ops::slice(x, 0, b, 1), {2, 6});
    CHECK(max_abs_diff(ops::slice(y, 0, b, 1).data(), loop_conv(xb, w)) < 1e-12);
  }
}

TEST_CASE("batch_norm1d fixed point, degenerate variance and eval closed form") {
  Tensor gamma = Tensor::full({1}, 1.0), beta = Tensor::zeros({1});
  Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
  // Zero mean, unit (population) variance.
  Tensor x({2, 1, 2}, {1, -1, 1, -1});
  auto y = ops::batch_norm1d(x, gamma, beta, rm, rv, ops::NormMode::train);
  CHECK(max_abs_diff(y.data(), x.data()) < 1e-5);

  Tensor beta2 = Tensor::full({1}, 0.7);
  auto c = ops::batch_norm1d(Tensor::full({3, 1, 4}, 2.5), gamma, beta2, rm, rv, ops::NormMode::train);
  for (double v : c.data()) CHECK(std::fabs(v - 0.7) < 1e-6);

  Tensor g3({1}, {1.5}), b3({1}, {-0.25}), rm3({1}, {0.4}), rv3({1}, {2.0});
  auto e = ops::batch_norm1d(Tensor({1, 3}, {1.0, -2.0, 0.4}), g3, b3, rm3, rv3, ops::NormMode::eval);
  const double inv = 1.0 / std::sqrt(2.0 + 1e-5);
  CHECK(std::fabs(e.data()[0] - ((1.0 - 0.4) * inv * 1.5 - 0.25)) < 1e-15);
  CHECK(std::fabs(e.data()[1] - ((-2.0 - 0.4) * inv * 1.5 - 0.25)) < 1e-15);
  CHECK(std::fabs(e.data()[2] - (-0.25)) < 1e-15);
  // Eval mode leaves running statistics untouched.
  CHECK(rm3.data()[0] == 0.4);
}

TEST_CASE("batch_norm1d running statistics use momentum 0.1") {
  Tensor gamma = Tensor::full({1}, 1.0), beta = Tensor::zeros({1});
  Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
  ops::batch_norm1d(Tensor({1, 1, 4}, {1, 2, 3, 4}), gamma, beta, rm, rv, ops::NormMode::train);
  CHECK(rm.data()[0] == doctest::Approx(0.25));
  // unbiased variance of 1..4 is 5/3
  CHECK(rv.data()[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
  CHECK_THROWS_AS(
      ops::batch_norm1d(Tensor::zeros({1, 2}), gamma, beta, rm, rv, static_cast<ops::NormMode>(7)), UsageError);
}

TEST_CASE("global average pool") {
  auto p = ops::global_avg_pool(Tensor({2, 2}, {1, 3, 2, 2}));
  CHECK(p.shape() == Shape{2});
  CHECK(p.data()[0] == 2.0);
  CHECK(p.data()[1] == 2.0);

  Tensor single({3, 1}, {4, 5, 6}, true);
  auto q = ops::global_avg_pool(single);
  CHECK(max_abs_diff(q.data(), single.data()) == 0.0);

  Tensor x = Tensor::zeros({2, 4}, true);
  backward(ops::sum(ops::global_avg_pool(x)));
  for (double g : x.grad()) CHECK(g == 0.25);

  CHECK_THROWS_AS(ops::global_avg_pool(Tensor::zeros({3, 0})), DimensionError);
}

TEST_CASE("backward examples") {
  Tensor x = Tensor::scalar(3.0, true);
  backward(ops::square(x));
  CHECK(x.grad()[0] == 6.0);

  Tensor a = Tensor::scalar(2.0, true), b = Tensor::scalar(5.0, true);
  auto prod = ops::mul(a, b);
  backward(prod);
  CHECK(a.grad()[0] == 5.0);
  CHECK(b.grad()[0] == 2.0);

  // A second call accumulates into leaves.
  backward(prod);
  CHECK(a.grad()[0] == 10.0);
  a.zero_grad();
  CHECK(a.grad()[0] == 0.0);

  CHECK_THROWS_AS(backward(ops::mul(Tensor({2}, {1, 2}, true), Tensor({2}, {1, 2}))), UsageError);
}

TEST_CASE("every requires_grad tensor reachable from the loss gets a gradient") {
  Rng rng(4);
  auto x = random_tensor({3, 4}, rng, true);
  auto w = random_tensor({4, 2}, rng, true);
  auto h = ops::relu(ops::matmul(x, w));
  auto s = ops::softmax(h, 1);
  auto loss = ops::mean(ops::mul(s, h));
  backward(loss);
  for (const Tensor* t : {&x, &w, &h, &s, &loss}) {
    CHECK(t->has_grad());
    CHECK(t->grad().size() == t->numel());
  }
}

TEST_CASE("backward visits each node exactly once on a diamond graph") {
  Tensor x = Tensor::scalar(1.5, true);
  auto a = ops::exp(x);
  auto b = ops::mul(a, a);
  auto c = ops::add(b, a);
  auto d = ops::add(c, ops::sigmoid(a));
  auto nodes = graph_nodes(d);
  std::size_t executed = backward(d);
  CHECK(executed == nodes.size());
  for (const auto& n : nodes) CHECK(n->visits == 1);
  const double e = std::exp(1.5);
  const double sig = 1.0 / (1.0 + std::exp(-e));
  CHECK(x.grad()[0] == doctest::Approx(e * (2 * e + 1 + sig * (1 - sig))).epsilon(1e-12));
}

TEST_CASE("intermediate gradients are recomputed, not accumulated, on repeated backward") {
  Tensor x = Tensor::scalar(2.0, true);
  auto y = ops::square(x);
  auto z = ops::scale(y, 3.0);
  backward(z);
  backward(z);
  CHECK(y.grad()[0] == 3.0);
  CHECK(x.grad()[0] == 24.0);
}

TEST_CASE("no-grad guard suppresses graph recording") {
  Tensor x = Tensor::scalar(2.0, true);
  NoGradGuard guard;
  auto y = ops::square(x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("finite differences agree with autodiff for every differentiable op") {
  Rng rng(99);
  using Fn = std::function<Tensor(const Tensor&, const Tensor&)>;
  struct Case {
    const char* name;
    Shape a, b;
    Fn f;
  };
  std::vector<Case> cases = {
      {"add_bcast", {3, 4}, {4}, [](auto& a, auto& b) { return ops::add(a, b); }},
      {"sub_bcast", {2, 1, 4}, {3, 1}, [](auto& a, auto& b) { return ops::sub(a, b); }},
      {"mul_bcast", {2, 3, 4}, {1, 4}, [](auto& a, auto& b) { return ops::mul(a, b); }},
      {"div", {3, 4}, {3, 4}, [](auto& a, auto& b) { return ops::div(a, ops::add_scalar(ops::square(b), 0.5)); }},
      {"matmul", {2, 3, 4}, {4, 5}, [](auto& a, auto& b) { return ops::matmul(a, b); }},
      {"matmul_batched", {2, 3, 4}, {2, 4, 3}, [](auto& a, auto& b) { return ops::matmul(a, b); }},
      {"linear", {2, 3, 4}, {5, 4}, [](auto& a, auto& b) { return ops::linear(a, b, ops::sum(b, 1)); }},
      {"exp_log", {3, 4}, {1}, [](auto& a, auto& b) { return ops::log(ops::add_scalar(ops::exp(ops::mul(a, b)), 1.0)); }},
      {"abs", {3, 4}, {1}, [](auto& a, auto& b) { return ops::mul(ops::abs(a), b); }},
      {"relu", {3, 4}, {1}, [](auto& a, auto& b) { return ops::relu(ops::mul(a, b)); }},
      {"sigmoid", {3, 4}, {1}, [](auto& a, auto& b) { return ops::sigmoid(ops::mul(a, b)); }},
      {"softmax0", {3, 4}, {1}, [](auto& a, auto& b) { return ops::softmax(ops::mul(a, b), 0); }},
      {"softmax1", {2, 3, 4}, {1}, [](auto& a, auto& b) { return ops::softmax(ops::mul(a, b), -1); }},
      {"log_softmax", {3, 4}, {1}, [](auto& a, auto& b) { return ops::log_softmax(ops::mul(a, b), 1); }},
      {"sum_axis", {2, 3, 4}, {1}, [](auto& a, auto& b) { return ops::mul(ops::sum(a, 1, true), b); }},
      {"mean_axis", {2, 3, 4}, {1}, [](auto& a, auto& b) { return ops::mul(ops::mean(a, 2), b); }},
      {"transpose", {2, 3, 4}, {2, 4, 3}, [](auto& a, auto& b) { return ops::mul(ops::transpose(a, 1, 2), b); }},
      {"transpose_outer", {2, 3, 4}, {4, 3, 2}, [](auto& a, auto& b) { return ops::mul(ops::transpose(a, 0, 2), b); }},
      {"reshape", {2, 3, 4}, {6, 4}, [](auto& a, auto& b) { return ops::mul(ops::reshape(a, {6, 4}), b); }},
      {"slice_concat", {2, 5}, {2, 3},
       [](auto& a, auto& b) { return ops::concat({ops::slice(a, 1, 1, 3), b, ops::slice(a, 1, 0, 1)}, 1); }},
      {"conv1d", {2, 3, 6}, {4, 3, 5}, [](auto& a, auto& b) { return ops::conv1d(a, b); }},
      {"conv1d_even", {3, 7}, {2, 3, 4}, [](auto& a, auto& b) { return ops::conv1d(a, b, ops::sum(ops::sum(b, 2), 1)); }},
      {"layer_norm", {2, 3, 5}, {5},
       [](auto& a, auto& b) { return ops::layer_norm(a, b, ops::scale(b, 0.5)); }},
      {"gap", {2, 3, 5}, {1}, [](auto& a, auto& b) { return ops::mul(ops::global_avg_pool(a), b); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    auto a = random_tensor(c.a, rng, true);
    auto b = random_tensor(c.b, rng, true);
    std::uint64_t seed = rng.below(1000);
    expect_gradcheck([&] { return probe_loss(c.f(a, b), seed); }, {{"a", a}, {"b", b}});
  }
}

TEST_CASE("batch_norm1d gradients in both modes") {
  Rng rng(17);
  auto x = random_tensor({3, 4, 5}, rng, true);
  auto g = random_tensor({4}, rng, true);
  auto b = random_tensor({4}, rng, true);
  Tensor rm = random_tensor({4}, rng), rv = random_tensor({4}, rng, false, 0.5, 2.0);
  for (auto mode : {ops::NormMode::train, ops::NormMode::eval}) {
    Tensor rm_copy = rm.clone(), rv_copy = rv.clone();
    expect_gradcheck([&] { return probe_loss(ops::batch_norm1d(x, g, b, rm_copy, rv_copy, mode), 5); },
                     {{"x", x}, {"gamma", g}, {"beta", b}});
  }
}
