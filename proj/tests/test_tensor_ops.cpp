#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "archscale/errors.hpp"
#include "archscale/ops.hpp"
#include "archscale/tensor.hpp"

using namespace archscale;
using namespace archscale::ops;

namespace {

Tensor random_param(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(detail::shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

// Max relative error between tape gradients and central differences; tiny
// gradients are compared on an absolute 1e-2 scale.
double grad_error(const std::vector<Tensor>& params, const std::function<Tensor()>& loss) {
  for (auto p : params) p.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss());
  }
  double worst = 0.0;
  for (auto p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i], h = 1e-6;
      data[i] = keep + h;
      const double up = loss().item();
      data[i] = keep - h;
      const double down = loss().item();
      data[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-2});
      worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("gemm matches a naive triple loop and is row independent") {
  const std::size_t m = 7, k = 37, n = 45;
  const Tensor a = random_param({m, k}, 1), b = random_param({k, n}, 2);
  std::vector<double> c(m * n);
  kernels::gemm(a.data().data(), b.data().data(), c.data(), m, k, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a.at(i, p), b.at(p, j), acc);
      CHECK(c[i * n + j] == acc);
    }
  // A single row multiplied alone gives the same bits.
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> row(n);
    kernels::gemm(a.data().data() + i * k, b.data().data(), row.data(), 1, k, n);
    for (std::size_t j = 0; j < n; ++j) CHECK(row[j] == c[i * n + j]);
  }
}

TEST_CASE("op gradients agree with finite differences") {
  const Tensor a = random_param({3, 4}, 3), b = random_param({4, 5}, 4), c = random_param({3, 4}, 5);
  const Tensor s = random_param({1, 4}, 6), bt = random_param({5, 4}, 7);
  const std::vector<int> targets = {1, 4, 2};
  CHECK(grad_error({a, b}, [&] { return sum(matmul(a, b)); }) < 1e-6);
  CHECK(grad_error({a, bt}, [&] { return sum(tanh(matmul_nt(a, bt))); }) < 1e-6);
  CHECK(grad_error({a, c}, [&] { return sum(mul(sigmoid(a), gelu(c))); }) < 1e-6);
  CHECK(grad_error({a, s}, [&] { return sum(mul(rms_norm(a, s), c)); }) < 1e-6);
  CHECK(grad_error({a}, [&] { return sum(mul(softmax(a, 0), c)); }) < 1e-6);
  CHECK(grad_error({a, b}, [&] { return cross_entropy(matmul(a, b), targets); }) < 1e-6);
  CHECK(grad_error({a}, [&] { return sum(mul(silu(a), c)); }) < 1e-6);
  CHECK(grad_error({a}, [&] { return sum(mean_pool_stride2(mul(a, c))); }) < 1e-6);
  CHECK(grad_error({a}, [&] { return sum(mul(shift_rows(a, 1), c)); }) < 1e-6);
}

TEST_CASE("convolution and linear attention gradients") {
  const Tensor x = random_param({6, 4}, 8), k = random_param({3, 2}, 9);
  const Tensor w = random_param({6, 4}, 10);
  CHECK(grad_error({x, k}, [&] { return sum(mul(depthwise_conv1d(x, k, Padding::kCausal), w)); }) <
        1e-6);
  CHECK(grad_error({x, k}, [&] { return sum(mul(depthwise_conv1d(x, k, Padding::kSame), w)); }) <
        1e-6);
  const Tensor dk = random_param({6, 6}, 11);
  CHECK(grad_error({x, dk},
                   [&] { return sum(mul(dynamic_conv1d(x, dk, 3, Padding::kCausal), w)); }) < 1e-6);
  const Tensor q = random_param({6, 3}, 12), kk = random_param({6, 3}, 13), v = random_param({6, 4}, 14);
  for (bool causal : {false, true}) {
    CHECK(grad_error({q, kk, v}, [&] {
            return sum(mul(linear_attention(relu(q), relu(kk), v, causal, 1e-3), w));
          }) < 1e-5);
  }
}

TEST_CASE("multiply instrumentation and tags") {
  const Tensor a = random_param({3, 4}, 1), b = random_param({4, 5}, 2);
  Tape tape(false);
  {
    TapeScope scope(tape);
    CostTag tag("block");
    matmul(a, b);
  }
  CHECK(tape.multiply_count() == 3 * 4 * 5);
  CHECK(tape.multiplies_by_tag().at("block") == 60);
  CHECK(tape.size() == 0);  // not recording gradients
}

TEST_CASE("no tape means no recording") {
  const Tensor a = random_param({2, 2}, 1);
  const Tensor y = matmul(a, a);
  CHECK(Tape::active() == nullptr);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}

TEST_CASE("backward twice on one tape reproduces interior gradients") {
  const Tensor a = random_param({3, 3}, 1);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = sum(tanh(matmul(a, a)));
  tape.backward(loss);
  const std::vector<double> first(a.grad().begin(), a.grad().end());
  tape.backward(loss);
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(a.grad()[i] == doctest::Approx(2 * first[i]));
}

TEST_CASE("shape errors") {
  const Tensor a = random_param({2, 3}, 1);
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
  CHECK_THROWS_AS(add(a, random_param({3, 2}, 2)), DimensionError);
  Tape tape;
  TapeScope scope(tape);
  CHECK_THROWS_AS(tape.backward(matmul(a, transpose(a))), ContractError);
}

TEST_CASE("mask_future and softmax give a lower-triangular distribution") {
  const Tensor a = random_param({4, 4}, 3);
  const Tensor p = softmax(mask_future(a), 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      if (c > r) CHECK(p.at(r, c) == 0.0);
      total += p.at(r, c);
    }
    CHECK(total == doctest::Approx(1.0));
  }
}

TEST_CASE("relative position buckets") {
  CHECK(relative_position_bucket(0, true, 32, 128) == 0);
  CHECK(relative_position_bucket(1, true, 32, 128) != relative_position_bucket(-1, true, 32, 128));
  // Unidirectional buckets ignore future offsets.
  CHECK(relative_position_bucket(5, false, 32, 128) == 0);
  CHECK(relative_position_bucket(-1000, true, 32, 128) < 32);
}
