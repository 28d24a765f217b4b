#include <cmath>
#include <numeric>

#include "doctest.h"
#include "vlmkit/rng.h"
#include "vlmkit/tensor.h"

using namespace vlmkit;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed, bool grad = true) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Weighted sum so that every output coordinate gets a distinct upstream grad.
Tensor probe(const Tensor& y, uint64_t seed) {
  return sum(mul(y, random_tensor(y.shape(), seed, false)));
}

}  // namespace

TEST_CASE("matmul matches hand-computed product") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.at(0, 0) == 58);
  CHECK(c.at(0, 1) == 64);
  CHECK(c.at(1, 0) == 139);
  CHECK(c.at(1, 1) == 154);
}

TEST_CASE("matmul dimension mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Tensor x = random_tensor({3, 5}, 1, false);
  Tensor s = softmax(x, 1);
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 5; ++c) total += s.at(r, c);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  std::vector<double> shifted(x.data().begin(), x.data().end());
  for (auto& v : shifted) v += 1000.0;
  Tensor s2 = softmax(Tensor::from({3, 5}, shifted), 1);
  for (std::size_t i = 0; i < 15; ++i) CHECK(s2.data()[i] == doctest::Approx(s.data()[i]).epsilon(1e-9));
  CHECK_THROWS_AS(softmax(x, 2), AxisError);
}

TEST_CASE("layer norm output has zero mean and unit variance") {
  Tensor x = random_tensor({4, 6}, 2, false);
  Tensor y = layer_norm(x, Tensor::full({6}, 1.0), Tensor::zeros({6}), 1e-12);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 6; ++c) m += y.at(r, c);
    m /= 6;
    for (std::size_t c = 0; c < 6; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 6 == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK_THROWS_AS(layer_norm(x, Tensor::full({6}, 1.0), Tensor::zeros({6}), 0.0), ParameterError);
}

TEST_CASE("gelu uses the tanh approximation") {
  Tensor x = Tensor::from({3}, {-1.0, 0.0, 2.0});
  Tensor y = gelu(x);
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x.data()[i];
    const double expect = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    CHECK(y.data()[i] == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("cross entropy matches log-sum-exp oracle") {
  Tensor logits = random_tensor({4, 7}, 3, false);
  std::vector<std::size_t> targets = {1, 6, 0, 3};
  std::vector<uint8_t> mask = {1, 0, 1, 1};
  double expect = 0;
  for (std::size_t t : {0, 2, 3}) {
    double z = 0;
    for (std::size_t v = 0; v < 7; ++v) z += std::exp(logits.at(t, v));
    expect += std::log(z) - logits.at(t, targets[t]);
  }
  expect /= 3;
  CHECK(cross_entropy_masked(logits, targets, mask).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cross entropy error cases") {
  Tensor logits = Tensor::zeros({2, 3});
  std::vector<std::size_t> targets = {0, 9};
  std::vector<uint8_t> none = {0, 0};
  CHECK_THROWS_AS(cross_entropy_masked(logits, targets, none), EmptyLossError);
  std::vector<uint8_t> first = {1, 0};
  CHECK_NOTHROW(cross_entropy_masked(logits, targets, first));
  std::vector<uint8_t> both = {1, 1};
  CHECK_THROWS_AS(cross_entropy_masked(logits, targets, both), VocabularyError);
}

TEST_CASE("backward requires a scalar") {
  Tensor x = random_tensor({2, 2}, 4);
  CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);
}

TEST_CASE("leaf gradients accumulate until zero_grad") {
  Tensor x = Tensor::from({2}, {1.5, -2.0}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == 3.0);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == 6.0);
  CHECK(x.grad()[1] == -8.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("no-grad guard stops recording") {
  Tensor x = random_tensor({2, 2}, 5);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(matmul(x, x).requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(matmul(x, x).requires_grad());
}

TEST_CASE("finite differences agree with every op's gradient") {
  const double tol = 1e-6;
  Tensor a = random_tensor({3, 4}, 10);
  Tensor b = random_tensor({4, 2}, 11, false);
  Tensor c = random_tensor({3, 4}, 12, false);
  Tensor v = random_tensor({4}, 13, false);
  Tensor s = random_tensor({1}, 14, false);

  CHECK(finite_diff_check([&](const Tensor& x) { return probe(matmul(x, b), 20); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(matmul(transpose(b), transpose(x)), 21); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(add(x, c), 22); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(sub(c, x), 23); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(mul(x, x), 24); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(scale(x, -2.5), 25); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(scale_by(x, s), 26); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(scale_by(c, slice_rows(reindex(x, std::vector<std::size_t>{5}, {1, 1}), 0, 1)), 27); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(add_trailing(x, v), 28); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(mul_trailing(x, v), 29); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return mean(mul(x, x)); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(tanh(x), 30); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(gelu(x), 31); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(softmax(x, 0), 32); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(softmax(x, 1), 33); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(normalize_columns(x), 34); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(column_norms(x), 35); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(slice_cols(x, 1, 2), 36); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(slice_rows(x, 1, 2), 37); }, a) < tol);
  const std::vector<std::size_t> rows = {2, 0, 2, 1};
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(gather_rows(x, rows), 38); }, a) < tol);
  const std::vector<std::size_t> perm = {11, 0, 0, 5, 7, 3};
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(reindex(x, perm, {2, 3}), 39); }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) {
          std::vector<Tensor> parts = {x, c, x};
          return probe(concat_rows(parts), 40);
        }, a) < tol);
  CHECK(finite_diff_check([&](const Tensor& x) {
          std::vector<Tensor> parts = {c, x};
          return probe(concat_cols(parts), 41);
        }, a) < tol);
  Tensor gain = random_tensor({4}, 42, false), bias = random_tensor({4}, 43, false);
  CHECK(finite_diff_check([&](const Tensor& x) { return probe(layer_norm(x, gain, bias, 1e-5), 44); }, a) < tol);
  const std::vector<std::size_t> targets = {3, 0, 2};
  const std::vector<uint8_t> mask = {1, 0, 1};
  CHECK(finite_diff_check([&](const Tensor& x) { return cross_entropy_masked(x, targets, mask); }, a) < tol);
}

TEST_CASE("gradients flow to both operands of a product") {
  Tensor a = random_tensor({2, 3}, 50);
  Tensor b = random_tensor({3, 2}, 51);
  std::vector<Tensor> params = {a, b};
  const double err = finite_diff_check_params([&] { return probe(matmul(a, b), 52); }, params);
  CHECK(err < 1e-6);
}
