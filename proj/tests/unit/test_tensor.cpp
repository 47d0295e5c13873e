#include <gtest/gtest.h>

#include "gdnsq/errors.hpp"
#include "gdnsq/tensor.hpp"
#include "test_support.hpp"

namespace gdnsq {
namespace {

TEST(Tensor, FactoriesAndShape) {
  auto z = Tensor::zeros({2, 3});
  EXPECT_EQ(z.numel(), 6u);
  EXPECT_EQ(z.rank(), 2u);
  EXPECT_EQ(z.dim(1), 3u);
  EXPECT_EQ(shape_str(z.shape()), "[2,3]");
  EXPECT_THROW(Tensor::from({1, 2, 3}, {2, 2}), DimensionError);
  EXPECT_DOUBLE_EQ(Tensor::full({2}, 1.5)[1], 1.5);
  EXPECT_THROW(Tensor::zeros({2}).item(), DimensionError);
}

TEST(Tensor, MatmulValuesAndShapeErrors) {
  auto a = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
  auto b = Tensor::from({1, 0, 0, 1, 1, 1}, {3, 2});
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_DOUBLE_EQ(c[0], 4);
  EXPECT_DOUBLE_EQ(c[1], 5);
  EXPECT_DOUBLE_EQ(c[2], 10);
  EXPECT_DOUBLE_EQ(c[3], 11);
  EXPECT_THROW(matmul(a, a), DimensionError);
}

TEST(Tensor, ElementwiseShapeMismatchThrows) {
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
  EXPECT_NO_THROW(add(Tensor::zeros({3}), Tensor::scalar(1.0)));
}

TEST(Tensor, LogRejectsNonPositiveWithIndex) {
  auto x = Tensor::from({1.0, 2.0, -1.0}, {3});
  try {
    log(x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.index(), 2u);
  }
}

TEST(Tensor, ExpOverflowThrows) { EXPECT_THROW(exp(Tensor::scalar(1000.0)), NumericError); }

TEST(Tensor, GradientsOfComposedOpsMatchFiniteDifferences) {
  Rng rng(3);
  auto a = Tensor::from(test::normal_vector(rng, 6), {2, 3}, true);
  auto b = Tensor::from(test::normal_vector(rng, 12), {3, 4}, true);
  auto s = Tensor::scalar(0.7, true);
  auto f = [&] {
    Tensor y = matmul(a, b);
    y = softplus(y) * s + exp(mul(y, 0.1));
    y = sub(y, neg(max_with_scalar(y, 0.3)));
    return mean(log(add(mul(y, y), 1.0)));
  };
  f().backward();
  for (Tensor* leaf : {&a, &b, &s}) {
    std::vector<double> analytic(leaf->grad().begin(), leaf->grad().end());
    auto numeric = test::numeric_grad(*leaf, [&] { return f().item(); });
    EXPECT_LT(test::max_rel_error(analytic, numeric), 1e-5);
  }
}

TEST(Tensor, RepeatedBackwardAccumulates) {
  auto x = Tensor::from({1.0, 2.0}, {2}, true);
  auto y = sum(mul(x, x));
  y.backward();
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Tensor, BackwardNeedsScalarRoot) {
  auto x = Tensor::from({1.0, 2.0}, {2}, true);
  EXPECT_THROW(mul(x, 2.0).backward(), ContractError);
}

TEST(Tensor, SharedSubexpressionGetsBothContributions) {
  auto x = Tensor::scalar(3.0, true);
  auto y = mul(x, x);
  (y + y).backward();  // d/dx 2x^2 = 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  auto x = Tensor::scalar(2.0, true);
  Tensor y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_mode_enabled());
    y = mul(x, x);
  }
  EXPECT_TRUE(grad_mode_enabled());
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, TapeIsTopologicallyOrdered) {
  auto a = Tensor::scalar(1.0, true);
  auto b = Tensor::scalar(2.0, true);
  auto c = mul(a, b);
  auto d = add(c, a);
  auto e = mul(d, c);
  auto tape = Tape::record(e);
  const auto& order = tape.tensors();
  ASSERT_EQ(order.back().id(), e.id());
  EXPECT_EQ(tape.node_count(), 3u);
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (auto in : tape.input_ids(i)) {
      auto pos = std::find_if(order.begin(), order.end(), [&](const Tensor& t) { return t.id() == in; });
      ASSERT_NE(pos, order.end());
      EXPECT_LT(static_cast<std::size_t>(pos - order.begin()), i);
    }
  }
}

TEST(Tensor, MaximumTiesSendGradientToX) {
  auto x = Tensor::from({1.0, 2.0, 3.0}, {3}, true);
  auto bound = Tensor::scalar(2.0, true);
  sum(maximum(x, bound)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);  // tie
  EXPECT_DOUBLE_EQ(x.grad()[2], 1.0);
  EXPECT_DOUBLE_EQ(bound.grad()[0], 1.0);
}

TEST(Tensor, DetachBreaksTheGraph) {
  auto x = Tensor::scalar(2.0, true);
  auto y = mul(x, x).detach();
  EXPECT_FALSE(y.requires_grad());
  EXPECT_DOUBLE_EQ(y.item(), 4.0);
}

TEST(Tensor, CustomOpOverridesBackward) {
  CustomOp twice(
      "twice",
      [](std::span<const Tensor> in) {
        std::vector<double> out(in[0].data().begin(), in[0].data().end());
        for (auto& v : out) v *= 2;
        return CustomOp::ForwardResult{in[0].shape(), out};
      },
      [](std::span<const double> g, std::span<const Tensor>, std::span<const double>) {
        std::vector<double> gx(g.begin(), g.end());
        for (auto& v : gx) v *= 5;  // deliberately not the true derivative
        return std::vector<std::vector<double>>{gx};
      });
  auto x = Tensor::from({1.0, -1.0}, {2}, true);
  auto y = twice({x});
  EXPECT_DOUBLE_EQ(y[1], -2.0);
  sum(y).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

TEST(Tensor, CustomOpWrongGradientSizeThrows) {
  CustomOp bad(
      "bad", [](std::span<const Tensor> in) { return CustomOp::ForwardResult{in[0].shape(), {0.0, 0.0}}; },
      [](std::span<const double>, std::span<const Tensor>, std::span<const double>) {
        return std::vector<std::vector<double>>{{1.0}};
      });
  auto x = Tensor::from({1.0, 2.0}, {2}, true);
  EXPECT_THROW(sum(bad({x})).backward(), DimensionError);
}

TEST(Tensor, ReshapeKeepsValuesAndGradients) {
  auto x = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3}, true);
  auto y = reshape(x, {3, 2});
  EXPECT_EQ(y.shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4}), DimensionError);
  sum(mul(y, y)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[5], 12.0);
}

}  // namespace
}  // namespace gdnsq
