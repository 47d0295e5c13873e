#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "gdnsq/errors.hpp"
#include "gdnsq/quantizer.hpp"
#include "test_support.hpp"

namespace gdnsq {
namespace {

FakeQuantizer free_quantizer(double l, double u, double omega, NoiseMode mode = NoiseMode::bernoulli) {
  FakeQuantizer q(SiteKind::weight, BoundsMode::free, mode);
  q.set_range(l, u, omega);
  return q;
}

TEST(Rounding, HalfUpNeverToEven) {
  EXPECT_EQ(round_half_up(2.5), 3.0);
  EXPECT_EQ(round_half_up(-2.5), -2.0);
  EXPECT_EQ(round_half_up(0.5), 1.0);
  EXPECT_EQ(round_half_up(1.5), 2.0);
  EXPECT_EQ(round_half_up(-0.49), 0.0);
  EXPECT_DOUBLE_EQ(rounding_residual(2.3), 2.0 - 2.3);
  EXPECT_DOUBLE_EQ(rounding_residual(2.5), 0.5);
}

TEST(Rounding, ResidualStaysInHalfOpenInterval) {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.uniform(-50, 50);
    const double r = rounding_residual(v);
    EXPECT_GT(r, -0.5 - 1e-12);
    EXPECT_LE(r, 0.5);
  }
}

TEST(Clamp, RejectsInvertedBounds) {
  auto x = Tensor::from({0.0, 1.0}, {2});
  EXPECT_THROW(clamp(x, Tensor::scalar(1.0), Tensor::scalar(1.0)), DomainError);
  EXPECT_THROW(clamp(x, Tensor::scalar(2.0), Tensor::scalar(1.0)), DomainError);
  EXPECT_THROW(clamp(x, Tensor::from({0.0, 0.0}, {2}), Tensor::scalar(1.0)), DimensionError);
}

TEST(Clamp, GradientRouting) {
  auto x = Tensor::from({-2.0, 0.0, 0.3, 1.0, 5.0}, {5}, true);
  auto l = Tensor::scalar(0.0, true);
  auto u = Tensor::scalar(1.0, true);
  auto y = clamp(x, l, u);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 0.3, 1, 1}));
  sum(y).backward();
  // ties at the bounds route to x
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 1, 1, 0}));
  EXPECT_DOUBLE_EQ(l.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(u.grad()[0], 1.0);
}

TEST(FakeQuantizer, SetRangeGivesRequestedBitwidth) {
  for (double omega : {1.0, 2.0, 3.5, 8.0, 10.0}) {
    auto q = free_quantizer(-0.7, 1.3, omega);
    EXPECT_NEAR(q.bitwidth_value(), omega, 1e-12);
    EXPECT_NEAR(q.bitwidth().item(), omega, 1e-12);
    EXPECT_NEAR(q.lower_value(), -0.7, 1e-15);
    EXPECT_NEAR(q.upper_value(), 1.3, 1e-12);
    EXPECT_NEAR(q.scale_value(), 2.0 / (std::exp2(omega) - 1), 1e-14);
  }
  FakeQuantizer a(SiteKind::activation, BoundsMode::fixed_lower);
  a.set_range(0.0, 6.0, 4.0);
  EXPECT_NEAR(a.upper_value(), 6.0, 1e-12);
  EXPECT_NEAR(a.bitwidth_value(), 4.0, 1e-12);
  EXPECT_THROW(a.set_range(-1.0, 6.0, 4.0), DomainError);
  EXPECT_THROW(a.set_range(1.0, 1.0, 4.0), DomainError);
  EXPECT_EQ(a.parameters().size(), 2u);
  EXPECT_EQ(free_quantizer(0, 1, 2).parameters().size(), 3u);
}

TEST(FakeQuantizer, ForwardEqualsDequantizedLevels) {
  auto q = free_quantizer(-1.0, 1.0, 3.0);
  Rng rng(4);
  auto xv = test::normal_vector(rng, 200, 1.5);
  auto y = q.forward(Tensor::from(xv, {200}), nullptr);
  auto levels = q.quantize_levels(xv);
  const double s = q.scale_value();
  std::set<std::int64_t> distinct(levels.begin(), levels.end());
  EXPECT_LE(distinct.size(), 8u);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double xb = std::clamp(xv[i], -1.0, 1.0);
    EXPECT_EQ(levels[i], static_cast<std::int64_t>(std::floor(xb / s + 0.5)));
    EXPECT_NEAR(y[i], s * static_cast<double>(levels[i]), 1e-12);
  }
}

TEST(FakeQuantizer, AutodiffBackwardMatchesReferenceForEveryNoiseMode) {
  for (auto mode : {NoiseMode::rounding_residual, NoiseMode::bernoulli, NoiseMode::bernoulli_variance_matched}) {
    auto q = free_quantizer(-0.8, 0.9, 3.0, mode);
    Rng data(9);
    auto xv = test::normal_vector(data, 64);
    auto up = test::normal_vector(data, 64);
    auto x = Tensor::from(xv, {64}, true);

    Rng a(77), b(77);
    auto y = q.forward(x, &a);
    sum(mul(y, Tensor::from(up, {64}))).backward();
    auto ref = ste_backward(up, xv, q, b);

    for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], ref.x[i]);
    // d/dlog_s = s * d/ds
    EXPECT_NEAR(q.log_scale().grad()[0], q.scale_value() * ref.s, 1e-12);
    // u = l + exp(raw): l collects g_l + g_u, raw collects g_u * (u - l)
    EXPECT_NEAR(q.lower_param().grad()[0], ref.lower + ref.upper, 1e-12);
    EXPECT_NEAR(q.range_param().grad()[0], ref.upper * q.range_value(), 1e-12);
  }
}

TEST(FakeQuantizer, NoiseSamplesHaveDocumentedSupport) {
  Rng rng(1);
  double sum_sq = 0;
  for (int i = 0; i < 4000; ++i) {
    const double b = sample_scale_gradient(NoiseMode::bernoulli, 0.1, rng);
    EXPECT_TRUE(b == 0.5 || b == -0.5);
    const double v = sample_scale_gradient(NoiseMode::bernoulli_variance_matched, 0.1, rng);
    EXPECT_NEAR(std::abs(v), 0.5 / std::sqrt(3.0), 1e-15);
    sum_sq += v * v;
  }
  EXPECT_NEAR(sum_sq / 4000, 1.0 / 12.0, 1e-12);
  EXPECT_EQ(sample_scale_gradient(NoiseMode::rounding_residual, 0.123, rng), 0.123);
}

TEST(FakeQuantizer, BackwardWithoutStreamIsRefused) {
  auto q = free_quantizer(-1, 1, 2);
  auto x = Tensor::from({0.1, 0.2}, {2}, true);
  auto y = sum(q.forward(x, nullptr));
  EXPECT_THROW(y.backward(), ContractError);
}

TEST(FakeQuantizer, NoiseModeParsing) {
  for (auto m : {NoiseMode::rounding_residual, NoiseMode::bernoulli, NoiseMode::bernoulli_variance_matched}) {
    EXPECT_EQ(parse_noise_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_noise_mode("gaussian"), DomainError);
}

TEST(QuantizedLayer, FusedForwardMatchesFakeQuantizedForward) {
  Rng rng(21);
  QuantizedLayer layer;
  layer.weights = Tensor::from(test::normal_vector(rng, 12 * 5, 0.4), {12, 5});
  layer.bias = Tensor::from(test::normal_vector(rng, 5, 0.1), {5});
  layer.weight_quantizer.set_range(-0.9, 0.8, 4.0);
  layer.activation_quantizer.set_range(0.0, 2.0, 4.0);
  layer.activation = Activation::relu;

  std::vector<double> xv(8 * 12);
  for (auto& v : xv) v = rng.uniform(-0.5, 2.5);
  auto fake = quantized_layer_forward(layer, Tensor::from(xv, {8, 12}), nullptr);
  auto fused = integer_fuse(layer);
  auto integer = fused_forward(fused, xv, 8);
  ASSERT_EQ(integer.size(), fake.numel());
  for (std::size_t i = 0; i < integer.size(); ++i) EXPECT_NEAR(integer[i], fake[i], 1e-10);
  for (auto w : fused.weights) EXPECT_LE(std::abs(w), 15);
}

TEST(QuantizedLayer, FusionRejectsLevelsBeyondInt32) {
  auto q = free_quantizer(-1.0, 1.0, 2.0);
  q.set_scale(1e-12);
  FakeQuantizer aq(SiteKind::activation, BoundsMode::fixed_lower);
  aq.set_range(0.0, 1.0, 4.0);
  EXPECT_THROW(integer_fuse(Tensor::from({0.5, -0.25}, {2, 1}), Tensor(), q, aq, Activation::identity), FusionError);
}

TEST(QuantizedLayer, ShapeMismatchIsReported) {
  QuantizedLayer layer;
  layer.weights = Tensor::zeros({3, 2});
  layer.weight_quantizer.set_range(-1, 1, 2);
  layer.activation_quantizer.set_range(0, 1, 2);
  EXPECT_THROW(quantized_layer_forward(layer, Tensor::zeros({1, 4}), nullptr), DimensionError);
}

TEST(FakeQuantizer, SmallBitwidthCases) {
  auto one = free_quantizer(0, 1, 1.0);
  one.set_scale(1.0);
  EXPECT_NEAR(one.bitwidth_value(), 1.0, 1e-15);
  auto two = free_quantizer(0, 3, 2.0);
  two.set_scale(1.0);
  EXPECT_NEAR(two.bitwidth_value(), 2.0, 1e-15);
  auto frac = free_quantizer(0, 5, 3.7);
  EXPECT_NEAR(frac.bitwidth().item(), 3.7, 1e-12);
}

TEST(FakeQuantizer, GridPointsAndClampedInputsAreExact) {
  FakeQuantizer q(SiteKind::activation, BoundsMode::fixed_lower);
  q.set_range(0.0, 1.0, 1.0);
  q.set_scale(0.5);
  auto y = q.forward(Tensor::from({0.5, -3.0}, {2}), nullptr);
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], 0.0);
}

TEST(QuantizedLayer, IdentityWeightsFuseToIntegerIdentity) {
  auto wq = free_quantizer(-1.0, 1.0, 1.0);
  wq.set_scale(1.0);
  FakeQuantizer aq(SiteKind::activation, BoundsMode::fixed_lower);
  aq.set_range(0.0, 4.0, 3.0);
  auto fused = integer_fuse(Tensor::from({1, 0, 0, 1}, {2, 2}), Tensor(), wq, aq, Activation::identity);
  EXPECT_EQ(fused.weights, (std::vector<std::int32_t>{1, 0, 0, 1}));
  EXPECT_EQ(fused.weight_scale, 1.0);
}

TEST(QuantizedLayer, OnGridWeightsMatchFullPrecision) {
  QuantizedLayer layer;
  layer.weights = Tensor::from({0.25, -0.5, 0.75, 0.0}, {2, 2});
  layer.weight_quantizer.set_range(-1.0, 1.0, 3.0);
  layer.weight_quantizer.set_scale(0.25);
  layer.activation_quantizer.set_range(0.0, 2.0, 3.0);
  layer.activation_quantizer.set_scale(0.25);
  layer.activation = Activation::identity;
  auto y = quantized_layer_forward(layer, Tensor::from({0.5, 1.25}, {1, 2}), nullptr);
  EXPECT_EQ(y[0], 0.5 * 0.25 + 1.25 * 0.75);
  EXPECT_EQ(y[1], 0.5 * -0.5);
}

}  // namespace
}  // namespace gdnsq
