#include <cmath>
#include <random>

#include "doctest.h"
#include "modt/diffcore/finite_diff.hpp"
#include "modt/diffcore/ops.hpp"

using namespace modt;
using namespace modt::diff;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Backward gradient of `build` w.r.t. `param` vs central differences.
template <class Build>
double max_grad_error(Tensor<double>& param, Build build, double h = 1e-5) {
  Tape<double> tape;
  Tensor<double>& loss = build(tape);
  param.clear_grad();
  tape.backward(loss);
  auto analytic = param.grad;
  auto f = [&] {
    Tape<double> t(false);
    return build(t).item();
  };
  auto numeric = finite_diff_grad<double>(f, param.values, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i]));
  return worst;
}

}  // namespace

TEST_CASE("matmul values") {
  Tape<double> tape;
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> b({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(tape, eye, b).values == std::vector<double>{1, 2, 3, 4});
  Tensor<double> a({2, 2}, {1, 0, 0, 0});
  Tensor<double> c({2, 1}, {5, 7});
  auto& y = matmul(tape, a, c);
  CHECK(y.shape == Shape{2, 1});
  CHECK(y.values == std::vector<double>{5, 0});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> tape;
  Tensor<double> a = Tensor<double>::zeros({2, 3});
  Tensor<double> b = Tensor<double>::zeros({2, 2});
  try {
    matmul(tape, a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  Tensor<double> a({3, 3}, random_values(9, 1), true);
  Tensor<double> b({3, 3}, random_values(9, 2), true);
  auto build = [&](Tape<double>& t) -> Tensor<double>& { return sum(t, matmul(t, a, b)); };
  CHECK(max_grad_error(a, build) < 1e-6);
  CHECK(max_grad_error(b, build) < 1e-6);
}

TEST_CASE("softmax values and stability") {
  Tape<double> tape;
  Tensor<double> x({2}, {0, 0});
  auto& y = softmax_lastdim(tape, x);
  CHECK(y.values[0] == doctest::Approx(0.5));
  CHECK(y.values[1] == doctest::Approx(0.5));
  Tensor<double> big({2}, {1000, 0});
  auto& z = softmax_lastdim(tape, big);
  CHECK(std::isfinite(z.values[0]));
  CHECK(z.values[0] == doctest::Approx(1.0));
  CHECK(z.values[1] < 1e-300);
}

TEST_CASE("softmax rows are distributions") {
  Tape<double> tape;
  Tensor<double> x({4, 7}, random_values(28, 3, 5.0));
  auto& y = softmax_lastdim(tape, x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      CHECK(y.values[r * 7 + c] >= 0.0);
      s += y.values[r * 7 + c];
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax gradient matches finite differences") {
  Tensor<double> x({5}, random_values(5, 4), true);
  Tensor<double> w({5}, random_values(5, 5));
  auto build = [&](Tape<double>& t) -> Tensor<double>& { return sum(t, mul(t, softmax_lastdim(t, x), w)); };
  CHECK(max_grad_error(x, build) < 1e-6);
}

TEST_CASE("layer_norm values") {
  Tape<double> tape;
  Tensor<double> gain({3}, {1, 1, 1});
  Tensor<double> bias({3}, {0.5, -1, 2});
  Tensor<double> c({1, 3}, {4, 4, 4});
  CHECK(layer_norm(tape, c, gain, bias).values == std::vector<double>{0.5, -1, 2});

  Tensor<double> g2({2}, {1, 1});
  Tensor<double> b2({2}, {0, 0});
  Tensor<double> x({1, 2}, {1, -1});
  auto& y = layer_norm(tape, x, g2, b2);
  CHECK(y.values[0] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  CHECK(y.values[1] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
}

TEST_CASE("layer_norm gradient matches finite differences") {
  Tensor<double> x({3, 4}, random_values(12, 6), true);
  Tensor<double> gain({4}, random_values(4, 7), true);
  Tensor<double> bias({4}, random_values(4, 8), true);
  Tensor<double> w({3, 4}, random_values(12, 9));
  auto build = [&](Tape<double>& t) -> Tensor<double>& { return sum(t, mul(t, layer_norm(t, x, gain, bias), w)); };
  CHECK(max_grad_error(x, build) < 1e-6);
  CHECK(max_grad_error(gain, build) < 1e-6);
  CHECK(max_grad_error(bias, build) < 1e-6);
}

TEST_CASE("elementwise ops gradients") {
  Tensor<double> x({2, 3}, random_values(6, 10), true);
  Tensor<double> v({3}, random_values(3, 11), true);
  Tensor<double> w({2, 3}, random_values(6, 12));
  auto build = [&](Tape<double>& t) -> Tensor<double>& {
    auto& a = add_row_vector(t, x, v);
    auto& b = sigmoid(t, scale(t, a, 1.7));
    auto& c = relu(t, add(t, a, b));
    auto& d = clamp(t, c, -0.5, 0.8);
    return sum(t, mul(t, add(t, d, b), w));
  };
  CHECK(max_grad_error(x, build) < 1e-6);
  CHECK(max_grad_error(v, build) < 1e-6);
}

TEST_CASE("affine, gather and concat gradients") {
  Tensor<double> x({4, 3}, random_values(12, 13), true);
  Tensor<double> W({3, 2}, random_values(6, 14), true);
  Tensor<double> b({2}, random_values(2, 15), true);
  Tensor<double> w({5, 2}, random_values(10, 16));
  const std::vector<std::size_t> idx{3, 0, 3, 1};
  auto build = [&](Tape<double>& t) -> Tensor<double>& {
    auto& y = affine(t, x, W, &b);
    auto& g = gather_rows(t, y, idx);
    auto& one = gather_rows(t, y, std::vector<std::size_t>{2});
    Tensor<double>* parts[] = {&g, &one};
    return sum(t, mul(t, concat_rows(t, std::span<Tensor<double>* const>(parts)), w));
  };
  CHECK(max_grad_error(x, build) < 1e-6);
  CHECK(max_grad_error(W, build) < 1e-6);
  CHECK(max_grad_error(b, build) < 1e-6);
}

TEST_CASE("causal attention gradient and structure") {
  const std::size_t d = 4, heads = 2;
  Tensor<double> qkv({7, 3 * d}, random_values(7 * 3 * d, 17), true);
  Tensor<double> w({7, d}, random_values(7 * d, 18));
  const std::vector<Segment> segs{{0, 4}, {4, 3}};
  auto build = [&](Tape<double>& t) -> Tensor<double>& { return sum(t, mul(t, causal_attention(t, qkv, segs, heads), w)); };
  CHECK(max_grad_error(qkv, build) < 1e-6);

  Tape<double> tape;
  std::vector<AttentionWeights> cap;
  causal_attention(tape, qkv, segs, heads, &cap);
  REQUIRE(cap.size() == 4);
  for (const auto& a : cap) {
    for (std::size_t i = 0; i < a.length; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < a.length; ++j) {
        if (j > i) CHECK(a.weights[i * a.length + j] == 0.0);
        s += a.weights[i * a.length + j];
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("dropout is identity at rate 0 and seeded otherwise") {
  Tape<double> tape;
  Tensor<double> x({10, 10}, random_values(100, 19), true);
  CHECK(&dropout(tape, x, 0.0, 1) == &x);
  auto& a = dropout(tape, x, 0.5, 42);
  auto& b = dropout(tape, x, 0.5, 42);
  auto& c = dropout(tape, x, 0.5, 43);
  CHECK(a.values == b.values);
  CHECK(a.values != c.values);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK((a.values[i] == 0.0 || a.values[i] == doctest::Approx(2.0 * x.values[i])));
  }
}

TEST_CASE("backward basics") {
  SUBCASE("square") {
    Tensor<double> x({1}, {3}, true);
    Tape<double> tape;
    auto& y = sum(tape, mul(tape, x, x));
    backward(tape, y);
    CHECK(x.grad[0] == 6.0);
  }
  SUBCASE("accumulation over uses") {
    Tensor<double> x({1}, {1}, true);
    Tape<double> tape;
    auto& y = sum(tape, add(tape, x, x));
    backward(tape, y);
    CHECK(x.grad[0] == 2.0);
  }
  SUBCASE("n consumers sum exactly") {
    Tensor<double> x({3}, {0.3, -1.2, 2.5}, true);
    Tape<double> tape;
    std::vector<Tensor<double>*> terms;
    std::vector<double> weights{0.5, -2.0, 3.25, 1.0};
    for (std::size_t i = 0; i < weights.size(); ++i) terms.push_back(&sum(tape, x));
    auto& y = weighted_sum(tape, std::span<Tensor<double>* const>(terms), std::span<const double>(weights));
    backward(tape, y);
    for (double g : x.grad) CHECK(g == 0.5 - 2.0 + 3.25 + 1.0);
  }
  SUBCASE("non-scalar loss is a contract violation") {
    Tensor<double> x({2}, {1, 2}, true);
    Tape<double> tape;
    auto& y = scale(tape, x, 2.0);
    CHECK_THROWS_AS(backward(tape, y), ContractViolation);
  }
}

TEST_CASE("finite_diff_grad reference functions") {
  std::vector<double> p{3.0};
  auto sq = [&] { return p[0] * p[0]; };
  CHECK(std::abs(finite_diff_grad<double>(sq, p, 1e-3)[0] - 6.0) < 1e-6);
  CHECK(p[0] == 3.0);
  std::vector<double> z{0.0};
  auto s = [&] { return std::sin(z[0]); };
  CHECK(std::abs(finite_diff_grad<double>(s, z, 1e-4)[0] - 1.0) < 1e-8);
}

TEST_CASE("repeated forward and backward are bitwise identical") {
  auto run = [] {
    Tensor<double> x({3, 4}, random_values(12, 20), true);
    Tensor<double> gain({4}, {1, 1, 1, 1}, true);
    Tensor<double> bias({4}, {0, 0, 0, 0}, true);
    Tape<double> tape;
    auto& y = sum(tape, dropout(tape, relu(tape, layer_norm(tape, x, gain, bias)), 0.3, 9));
    tape.backward(y);
    return std::make_pair(y.item(), x.grad);
  };
  CHECK(run() == run());
}
