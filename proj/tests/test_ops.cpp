#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "frm/gradcheck.hpp"
#include "frm/layers.hpp"
#include "frm/ops.hpp"
#include "oracles.hpp"

using namespace frm;

namespace {

Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
  return Tensor(Shape{1, 1, rows, cols}, std::move(values));
}

}  // namespace

TEST_CASE("matmul identity") {
  auto m = matrix(2, 2, {1.5f, -2, 3, 4});
  auto eye = matrix(2, 2, {1, 0, 0, 1});
  CHECK(matmul(eye, m).to_vector() == m.to_vector());
}

TEST_CASE("matmul hand example") {
  auto r = matmul(matrix(2, 2, {1, 2, 3, 4}), matrix(2, 1, {5, 6}));
  CHECK(r.shape() == Shape{1, 1, 2, 1});
  CHECK(r.data()[0] == 17.0f);
  CHECK(r.data()[1] == 39.0f);
}

TEST_CASE("matmul matches triple loop") {
  std::mt19937_64 rng(1);
  auto a = oracle::random_tensor({1, 1, 5, 7}, rng);
  auto b = oracle::random_tensor({1, 1, 7, 3}, rng);
  const auto expect = oracle::matmul(oracle::from(a).v, oracle::from(b).v, 5, 7, 3);
  auto got = matmul(a, b);
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(got.data()[i] - expect[i]) < 1e-6);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  CHECK_THROWS_WITH_AS(matmul(Tensor(Shape{1, 1, 2, 3}), Tensor(Shape{1, 1, 2, 3})),
                       doctest::Contains("[1x1x2x3]"), DimensionError);
}

TEST_CASE("softmax closed forms") {
  auto uniform = softmax(Tensor(Shape{1, 1, 1, 5}, 0.7f), 3);
  for (float v : uniform.data()) CHECK(v == doctest::Approx(0.2f));
  auto two = softmax(Tensor(Shape{1, 1, 1, 2}, std::vector<float>{0.0f, std::log(3.0f)}), 3);
  CHECK(two.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(two.data()[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax matches direct evaluation") {
  std::mt19937_64 rng(2);
  auto x = oracle::random_tensor({1, 1, 1, 9}, rng, 2.0f);
  auto got = softmax(x.cast<double>(), 3);
  const auto expect = oracle::softmax(oracle::from(x).v);
  for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(got.data()[i] - expect[i]) < 1e-7);
}

TEST_CASE("softmax slices sum to one and ignore constant shifts") {
  std::mt19937_64 rng(3);
  for (int axis = 0; axis < 4; ++axis) {
    auto x = oracle::random_tensor({2, 3, 4, 5}, rng, 3.0f);
    auto y = softmax(x, axis);
    auto sums = sum_axis(y, axis);
    for (float s : sums.data()) CHECK(std::abs(s - 1.0f) < 1e-6);
    auto shifted = softmax(add_scalar(x, 12.5f), axis);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(shifted.data()[i] - y.data()[i]) < 1e-6);
    for (float v : y.data()) CHECK(v >= 0.0f);
  }
}

TEST_CASE("softmax is stable for large inputs") {
  auto y = softmax(Tensor(Shape{1, 1, 1, 3}, std::vector<float>{1000.0f, 1000.0f, -1000.0f}), 3);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[2] == 0.0f);
}

TEST_CASE("broadcast arithmetic") {
  auto a = Tensor(Shape{1, 2, 1, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  auto b = Tensor(Shape{1, 2, 1, 1}, std::vector<float>{10, 20});
  CHECK(add(a, b).to_vector() == std::vector<float>{11, 12, 13, 24, 25, 26});
  CHECK(sub(a, b).to_vector() == std::vector<float>{-9, -8, -7, -16, -15, -14});
  CHECK(mul(a, b).to_vector() == std::vector<float>{10, 20, 30, 80, 100, 120});
  CHECK_THROWS_AS(add(a, Tensor(Shape{1, 3, 1, 1})), DimensionError);
}

TEST_CASE("broadcast subtract of a per-row mean centres the rows") {
  std::mt19937_64 rng(4);
  auto x = oracle::random_tensor({2, 1, 3, 6}, rng);
  auto centred = sub(x, mean_axis(x, 3));
  auto means = mean_axis(centred, 3);
  for (float m : means.data()) CHECK(std::abs(m) < 1e-6);
}

TEST_CASE("scalar ops and relu") {
  auto x = Tensor(Shape{1, 1, 1, 4}, std::vector<float>{-2, -0.5f, 0, 3});
  CHECK(scale(x, 2.0f).to_vector() == std::vector<float>{-4, -1, 0, 6});
  CHECK(add_scalar(x, 1.0f).to_vector() == std::vector<float>{-1, 0.5f, 1, 4});
  CHECK(relu(x).to_vector() == std::vector<float>{0, 0, 0, 3});
  CHECK(relu_layer(x).to_vector() == relu(x).to_vector());
}

TEST_CASE("reductions") {
  auto x = Tensor(Shape{1, 2, 1, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  CHECK(sum(x).item() == 21.0f);
  CHECK(mean(x).item() == 3.5f);
  CHECK(sum_axis(x, 1).to_vector() == std::vector<float>{5, 7, 9});
  CHECK(mean_axis(x, 3).to_vector() == std::vector<float>{2, 5});
  CHECK_THROWS_AS(sum_axis(x, 4), ContractError);
}

TEST_CASE("reshape, transpose, concat") {
  auto x = Tensor(Shape{1, 1, 2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  CHECK(reshape(x, Shape{1, 3, 2, 1}).shape() == Shape{1, 3, 2, 1});
  CHECK_THROWS_AS(reshape(x, Shape{1, 1, 1, 5}), DimensionError);
  CHECK(transpose(x).to_vector() == std::vector<float>{1, 4, 2, 5, 3, 6});
  auto a = Tensor(Shape{1, 1, 1, 2}, std::vector<float>{1, 2});
  auto b = Tensor(Shape{1, 2, 1, 2}, std::vector<float>{3, 4, 5, 6});
  auto c = concat_channels<float>({a, b});
  CHECK(c.shape() == Shape{1, 3, 1, 2});
  CHECK(c.to_vector() == std::vector<float>{1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(concat_channels<float>({a, Tensor(Shape{1, 1, 1, 3})}), DimensionError);
}

TEST_CASE("concat gradient splits by channel offsets") {
  TensorD a(Shape{1, 1, 1, 2}, 1.0);
  TensorD b(Shape{1, 2, 1, 2}, 1.0);
  a.set_requires_grad();
  b.set_requires_grad();
  TensorD w(Shape{1, 3, 1, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  sum(mul(concat_channels<double>({a, b}), w)).backward();
  CHECK(a.to_vector().size() == 2);
  CHECK(std::vector<double>(a.grad().begin(), a.grad().end()) == std::vector<double>{1, 2});
  CHECK(std::vector<double>(b.grad().begin(), b.grad().end()) == std::vector<double>{3, 4, 5, 6});
}

TEST_CASE("1x1 conv with identity weight is the identity") {
  std::mt19937_64 rng(5);
  auto x = oracle::random_tensor({2, 3, 4, 4}, rng);
  Conv2d<float> conv(pointwise(3, 3, false));
  conv.init_identity();
  CHECK(conv.forward(x).to_vector() == x.to_vector());
}

TEST_CASE("1x1 conv hand example") {
  Conv2d<float> conv(pointwise(2, 2, false));
  auto w = conv.weight().mutable_data();
  w[0] = 1, w[1] = 1, w[2] = 1, w[3] = -1;
  auto y = conv.forward(Tensor(Shape{1, 2, 1, 1}, std::vector<float>{3, 4}));
  CHECK(y.to_vector() == std::vector<float>{7, -1});
}

TEST_CASE("conv channel mismatch is a dimension error") {
  Conv2d<float> conv(pointwise(3, 2));
  CHECK_THROWS_AS(conv.forward(Tensor(Shape{1, 4, 2, 2})), DimensionError);
}

TEST_CASE("depthwise 3x3 matches sliding window") {
  std::mt19937_64 rng(6);
  auto x = oracle::random_tensor({1, 4, 6, 6}, rng);
  auto w = oracle::random_tensor({4, 1, 3, 3}, rng);
  auto b = oracle::random_tensor({1, 4, 1, 1}, rng);
  auto got = conv2d(x, w, &b, Conv2dParams{1, 1, 4});
  const auto bias = oracle::from(b).v;
  const auto expect = oracle::conv2d(oracle::from(x), oracle::from(w), &bias, 1, 1, 4);
  CHECK(oracle::max_abs_diff(got, expect) < 1e-6);
}

TEST_CASE("strided grouped conv matches sliding window") {
  std::mt19937_64 rng(7);
  for (std::size_t stride : {1, 2, 3}) {
    for (std::size_t pad : {0, 1, 2}) {
      auto x = oracle::random_tensor({2, 6, 7, 8}, rng);
      auto w = oracle::random_tensor({4, 3, 3, 3}, rng);
      auto got = conv2d<float>(x, w, nullptr, Conv2dParams{stride, pad, 2});
      const auto expect = oracle::conv2d(oracle::from(x), oracle::from(w), nullptr, stride, pad, 2);
      REQUIRE(got.dim(2) == expect.h);
      REQUIRE(got.dim(3) == expect.w);
      CHECK(oracle::max_abs_diff(got, expect) < 1e-5);
    }
  }
}

TEST_CASE("1x1 conv equals matmul of the weight matrix with pixel vectors") {
  std::mt19937_64 rng(8);
  auto x = oracle::random_tensor({1, 5, 3, 4}, rng);
  auto w = oracle::random_tensor({6, 5, 1, 1}, rng);
  auto got = conv2d<float>(x, w, nullptr, Conv2dParams{});
  const auto expect = oracle::matmul(oracle::from(w).v, oracle::from(x).v, 6, 5, 12);
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(got.data()[i] - expect[i]) < 1e-6);
}

TEST_CASE("adaptive pool closed forms") {
  auto c = adaptive_avg_pool(Tensor(Shape{1, 2, 5, 7}, 2.5f), 3, 2);
  for (float v : c.data()) CHECK(v == doctest::Approx(2.5f));
  std::vector<float> ramp(16);
  std::iota(ramp.begin(), ramp.end(), 1.0f);
  auto p = adaptive_avg_pool(Tensor(Shape{1, 1, 4, 4}, ramp), 2, 2);
  CHECK(p.to_vector() == std::vector<float>{3.5f, 5.5f, 11.5f, 13.5f});
}

TEST_CASE("adaptive pool matches brute-force windows") {
  std::mt19937_64 rng(9);
  auto x = oracle::random_tensor({1, 3, 24, 24}, rng);
  CHECK(oracle::max_abs_diff(adaptive_avg_pool(x, 3, 3), oracle::adaptive_pool(oracle::from(x), 3, 3)) < 1e-6);
  auto y = oracle::random_tensor({2, 2, 7, 5}, rng);
  CHECK(oracle::max_abs_diff(adaptive_avg_pool(y, 3, 2), oracle::adaptive_pool(oracle::from(y), 3, 2)) < 1e-6);
}

TEST_CASE("adaptive pool to 1x1 is the global mean") {
  std::mt19937_64 rng(10);
  auto x = oracle::random_tensor({2, 3, 6, 5}, rng);
  auto g = adaptive_avg_pool(x, 1, 1);
  auto m = mean_axis(mean_axis(x, 2), 3);
  for (std::size_t i = 0; i < g.numel(); ++i) CHECK(std::abs(g.data()[i] - m.data()[i]) < 1e-6);
}

TEST_CASE("adaptive pool rejects bad extents") {
  CHECK_THROWS_AS(adaptive_avg_pool(Tensor(Shape{1, 1, 4, 4}), 0, 2), ContractError);
  CHECK_THROWS_AS(adaptive_avg_pool(Tensor(Shape{1, 1, 4, 4}), 5, 2), ContractError);
}

TEST_CASE("bilinear closed forms") {
  auto c = bilinear_upsample(Tensor(Shape{1, 2, 3, 2}, -1.25f), 7, 9);
  for (float v : c.data()) CHECK(v == doctest::Approx(-1.25f));
  auto s = bilinear_upsample(Tensor(Shape{1, 1, 1, 1}, 4.0f), 4, 4);
  for (float v : s.data()) CHECK(v == 4.0f);
}

TEST_CASE("bilinear matches the interpolation formula") {
  std::mt19937_64 rng(12);
  auto x = oracle::random_tensor({1, 2, 2, 2}, rng);
  CHECK(oracle::max_abs_diff(bilinear_resize(x, 4, 4), oracle::bilinear(oracle::from(x), 4, 4)) < 1e-6);
  auto y = oracle::random_tensor({2, 1, 3, 5}, rng);
  CHECK(oracle::max_abs_diff(bilinear_resize(y, 7, 2), oracle::bilinear(oracle::from(y), 7, 2)) < 1e-6);
}

TEST_CASE("batch norm training statistics") {
  std::mt19937_64 rng(13);
  auto x = add_scalar(oracle::random_tensor({4, 3, 5, 5}, rng, 3.0f), 2.0f);
  Tensor gamma(Shape{1, 3, 1, 1}, 1.0f);
  Tensor beta(Shape{1, 3, 1, 1}, 0.0f);
  std::vector<float> mean_out, var_out;
  auto y = batch_norm_train(x, gamma, beta, 1e-5f, &mean_out, &var_out);
  auto yd = y.cast<double>();
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) {
        const double v = yd.at(n, c, i / 5, i % 5);
        s += v;
        s2 += v * v;
      }
    CHECK(std::abs(s / 100) < 1e-4);
    CHECK(std::abs(s2 / 100 - 1.0) < 1e-3);
  }
  CHECK(mean_out.size() == 3);
}

TEST_CASE("batch norm layer running statistics") {
  BatchNorm2d<float> bn(2);
  Tensor x(Shape{2, 2, 1, 2}, std::vector<float>{1, 3, 10, 10, 5, 7, 10, 10});
  bn.forward(x, Mode::kTraining);
  // channel 0 values 1,3,5,7: mean 4, unbiased variance 20/3
  CHECK(bn.running_mean()[0] == doctest::Approx(0.4f));
  CHECK(bn.running_var()[0] == doctest::Approx(0.9f + 0.1f * 20.0f / 3.0f));
  auto eval = bn.forward(x, Mode::kInference);
  const float expect = (1 - 0.4f) / std::sqrt(bn.running_var()[0] + 1e-5f);
  CHECK(eval.data()[0] == doctest::Approx(expect));
}

TEST_CASE("l2 normalize gives unit channel vectors") {
  std::mt19937_64 rng(14);
  auto y = l2_normalize_channels(oracle::random_tensor({2, 6, 3, 3}, rng));
  auto norms = sum_axis(mul(y, y), 1);
  for (float v : norms.data()) CHECK(v == doctest::Approx(1.0f).epsilon(1e-5));
}

TEST_CASE("gather pixels") {
  std::mt19937_64 rng(15);
  auto x = oracle::random_tensor({2, 3, 4, 5}, rng);
  auto g = gather_pixels(x, {{1, 2, 3}, {0, 0, 0}});
  CHECK(g.shape() == Shape{1, 1, 2, 3});
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(g.at(0, 0, 0, c) == x.at(1, c, 2, 3));
    CHECK(g.at(0, 0, 1, c) == x.at(0, c, 0, 0));
  }
  CHECK_THROWS_AS(gather_pixels(x, {{2, 0, 0}}), DimensionError);
}

TEST_CASE("cross entropy matches per-pixel evaluation") {
  std::mt19937_64 rng(16);
  auto logits = oracle::random_tensor({1, 4, 3, 3}, rng, 2.0f);
  std::vector<std::int32_t> labels{0, 1, 2, 3, 255, 1, 2, 0, 3};
  std::size_t count = 0;
  auto ce = softmax_cross_entropy<double>(logits.cast<double>(), labels, 255, &count);
  CHECK(count == 8);
  CHECK(std::abs(ce.item() - oracle::cross_entropy(oracle::from(logits), labels, 255)) < 1e-6);
  std::vector<std::int32_t> bad(9, 4);
  CHECK_THROWS_AS(softmax_cross_entropy<float>(logits, bad, 255), ContractError);
  std::vector<std::int32_t> none(9, 255);
  CHECK(softmax_cross_entropy<float>(logits, none, 255).item() == 0.0f);
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  // Small random inputs, double precision; the full suite lives in the
  // gradient checker and covers layers too.
  std::mt19937_64 rng(17);
  GradcheckOptions options;
  auto a = oracle::random_tensor_d({2, 2, 3, 3}, rng);
  auto b = oracle::random_tensor_d({2, 2, 3, 3}, rng);
  auto w = oracle::random_tensor_d({2, 2, 3, 3}, rng);
  auto r = check_gradients(
      "chain",
      [&] {
        auto t = softmax(add(mul(a, b), transpose(a)), 2);
        auto c = conv2d<double>(t, w, nullptr, Conv2dParams{1, 1, 1});
        auto p = bilinear_resize(adaptive_avg_pool(c, 2, 2), 3, 4);
        return sum(mul(l2_normalize_channels(p), p));
      },
      {{"a", &a}, {"b", &b}, {"w", &w}}, options, rng);
  CHECK(r.worst_error < 1e-5);
  CHECK(r.probes > 0);
}
