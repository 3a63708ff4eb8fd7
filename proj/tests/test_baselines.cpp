#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "frm/baselines.hpp"
#include "frm/frm.hpp"
#include "oracles.hpp"

using namespace frm;

namespace {

void randomize(Conv2d<float>& conv, std::mt19937_64& rng) {
  conv.init_kaiming(rng);
  if (!conv.has_bias()) return;
  std::normal_distribution<float> normal(0.0f, 0.5f);
  for (float& b : conv.bias().mutable_data()) b = normal(rng);
}

// Fusion conv that copies the first out channels of its input.
void select_leading(Conv2d<float>& conv) {
  conv.init_zeros();
  auto& w = conv.weight();
  for (std::size_t o = 0; o < w.dim(0); ++o) w.at(o, o, 0, 0) = 1.0f;
}

bool spatially_constant(const Tensor& t, double tol) {
  for (std::size_t n = 0; n < t.dim(0); ++n)
    for (std::size_t c = 0; c < t.dim(1); ++c)
      for (std::size_t y = 0; y < t.dim(2); ++y)
        for (std::size_t x = 0; x < t.dim(3); ++x)
          if (std::abs(t.at(n, c, y, x) - t.at(n, c, 0, 0)) > tol) return false;
  return true;
}

}  // namespace

TEST_CASE("PPM keeps the input extent") {
  std::mt19937_64 rng(1);
  PpmHead<float> head(PpmConfig{120, 64});
  head.init_kaiming(rng);
  CHECK(head.forward(oracle::random_tensor({1, 120, 8, 8}, rng)).shape() == Shape{1, 64, 8, 8});
  CHECK(head.branch_channels() == 30);
}

TEST_CASE("PPM single-bin branch is the broadcast global mean") {
  std::mt19937_64 rng(2);
  PpmHead<float> head(PpmConfig{6, 6, {1}, 6});
  head.init_kaiming(rng);
  head.branch_conv(0).init_identity();
  auto x = oracle::random_tensor({2, 6, 5, 7}, rng);
  // ReLU follows the branch conv, so compare against the clipped mean.
  const auto mean = oracle::adaptive_pool(oracle::from(x), 1, 1);
  auto b = head.branch(x, 0);
  CHECK(b.shape() == Shape{2, 6, 5, 7});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t xx = 0; xx < 7; ++xx) CHECK(std::abs(b.at(n, c, y, xx) - std::max(0.0, mean(n, c, 0, 0))) < 1e-6);
  auto lib = adaptive_avg_pool(x, 1, 1);
  for (std::size_t i = 0; i < lib.numel(); ++i) CHECK(std::abs(lib.data()[i] - mean.v[i]) < 1e-6);
}

TEST_CASE("PPM bins larger than the input") {
  std::mt19937_64 rng(3);
  PpmHead<float> strict(PpmConfig{8, 8});
  strict.init_kaiming(rng);
  CHECK_THROWS_AS(strict.forward(oracle::random_tensor({1, 8, 4, 4}, rng)), ContractError);
  PpmConfig relaxed{8, 8};
  relaxed.clamp_bins = true;
  PpmHead<float> clamped(relaxed);
  clamped.init_kaiming(rng);
  CHECK(clamped.forward(oracle::random_tensor({1, 8, 4, 4}, rng)).shape() == Shape{1, 8, 4, 4});
}

TEST_CASE("PPM configuration errors") {
  CHECK_THROWS_AS(PpmHead<float>(PpmConfig{8, 8, {}}), ConfigError);
  CHECK_THROWS_AS(PpmHead<float>(PpmConfig{8, 8, {1, 0}}), ConfigError);
  CHECK_THROWS_AS(PpmHead<float>(PpmConfig{2, 8, {1, 2, 3}}), ConfigError);
  std::mt19937_64 rng(4);
  PpmHead<float> head(PpmConfig{8, 8});
  CHECK_THROWS_AS(head.forward(oracle::random_tensor({1, 6, 8, 8}, rng)), DimensionError);
}

TEST_CASE("PPM preserves constant inputs") {
  std::mt19937_64 rng(5);
  PpmHead<float> head(PpmConfig{8, 8, {1, 2, 3, 6}, 4});
  head.init_kaiming(rng);
  Tensor x(Shape{1, 8, 12, 12}, 0.75f);
  CHECK(spatially_constant(head.forward(x), 1e-5));
  select_leading(head.fusion());
  auto y = head.forward(x);
  for (float v : y.data()) CHECK(v == doctest::Approx(0.75f).epsilon(1e-6));
}

TEST_CASE("DAPPM keeps the input extent") {
  std::mt19937_64 rng(6);
  DappmHead<float> head(DappmConfig{120, 64});
  head.init_kaiming(rng);
  CHECK(head.forward(oracle::random_tensor({1, 120, 8, 8}, rng)).shape() == Shape{1, 64, 8, 8});
  CHECK(head.pooled_branches() == 4);
  CHECK(head.branch_channels() == 30);
}

TEST_CASE("DAPPM preserves constant inputs when the fusion convs are zero") {
  std::mt19937_64 rng(7);
  DappmHead<float> head(DappmConfig{8, 8});
  head.init_kaiming(rng);
  for (std::size_t i = 0; i < head.pooled_branches(); ++i) head.process(i).init_zeros();
  Tensor x(Shape{2, 8, 9, 9}, -1.5f);
  CHECK(spatially_constant(head.forward(x), 1e-5));
  head.compression().init_zeros();
  head.shortcut().init_identity();
  auto y = head.forward(x);
  for (float v : y.data()) CHECK(v == doctest::Approx(-1.5f).epsilon(1e-6));
}

TEST_CASE("DAPPM hierarchical fusion adds the previous branch") {
  std::mt19937_64 rng(8);
  DappmConfig config{4, 4, 4, {2}, false};
  DappmHead<float> head(config);
  head.init_kaiming(rng);
  head.pooled_conv(0).init_zeros();
  auto x = oracle::random_tensor({1, 4, 6, 6}, rng);
  // With a zero pooled branch, process1 sees scale0(x) alone.
  auto s0 = head.scale0().forward(x);
  auto expect = relu(head.process(0).forward(s0));
  auto full = add(head.compression().forward(concat_channels(std::vector<Tensor>{s0, expect})), head.shortcut().forward(x));
  auto y = head.forward(x);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.data()[i] - full.data()[i]) < 1e-6);
}

TEST_CASE("DAPPM with no pooled branches is a single pointwise conv") {
  std::mt19937_64 rng(9);
  DappmConfig config{6, 5, 3, {}, false};
  DappmHead<float> head(config);
  randomize(head.scale0(), rng);
  randomize(head.compression(), rng);
  randomize(head.shortcut(), rng);
  // Compose compression . scale0 + shortcut into one matrix and bias.
  const auto ws0 = oracle::from(head.scale0().weight()).v;
  const auto wc = oracle::from(head.compression().weight()).v;
  const auto wsh = oracle::from(head.shortcut().weight()).v;
  auto w = oracle::matmul(wc, ws0, 5, 3, 6);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += wsh[i];
  std::vector<double> bias(5, 0.0);
  auto add_bias = [&](Conv2d<float>& conv) {
    if (conv.has_bias()) for (std::size_t o = 0; o < 5; ++o) bias[o] += conv.bias().data()[o];
  };
  add_bias(head.compression());
  add_bias(head.shortcut());
  if (head.scale0().has_bias()) {
    const auto bs0 = oracle::from(head.scale0().bias()).v;
    const auto carried = oracle::matmul(wc, bs0, 5, 3, 1);
    for (std::size_t o = 0; o < 5; ++o) bias[o] += carried[o];
  }
  auto x = oracle::random_tensor({2, 6, 4, 5}, rng, 0.25f);
  CHECK(oracle::max_abs_diff(head.forward(x), oracle::pointwise(oracle::from(x), w, bias, 5)) < 1e-6);
}

TEST_CASE("DAPPM configuration errors") {
  CHECK_THROWS_AS(DappmHead<float>(DappmConfig{8, 8, 0, {2, 0}}), ConfigError);
  CHECK_THROWS_AS(DappmHead<float>(DappmConfig{3, 8}), ConfigError);
}

TEST_CASE("context heads are interchangeable") {
  std::mt19937_64 rng(10);
  const Shape in{2, 120, 4, 4};
  FrmHead<float> frm_head(FrmConfig{120, 32, 4});
  PpmConfig ppm_config{120, 32};
  ppm_config.clamp_bins = true;
  PpmHead<float> ppm(ppm_config);
  DappmHead<float> dappm(DappmConfig{120, 32});
  auto x = oracle::random_tensor(in, rng);
  for (ContextHead<float>* head : std::initializer_list<ContextHead<float>*>{&frm_head, &ppm, &dappm}) {
    head->init_kaiming(rng);
    CAPTURE(head->kind());
    CHECK(head->forward(x, Mode::kInference).shape() == Shape{2, 32, 4, 4});
    CHECK(head->out_channels() == 32);
    CostCounter costs;
    CHECK(head->count_costs(costs, "context", in) == Shape{2, 32, 4, 4});
  }
}
