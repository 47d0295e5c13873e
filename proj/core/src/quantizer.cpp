#include "gdnsq/quantizer.hpp"

#include <cmath>
#include <limits>

#include "gdnsq/errors.hpp"

namespace gdnsq {

namespace {

constexpr double kGridTolerance = 1e-9;

double softplus_value(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus inverse needs a positive argument");
  // log(exp(y) - 1), stable for large y
  return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

}  // namespace

std::string to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::rounding_residual:
      return "rounding_residual";
    case NoiseMode::bernoulli:
      return "bernoulli";
    case NoiseMode::bernoulli_variance_matched:
      return "bernoulli_variance_matched";
  }
  return "unknown";
}

NoiseMode parse_noise_mode(std::string_view text) {
  if (text == "rounding_residual") return NoiseMode::rounding_residual;
  if (text == "bernoulli") return NoiseMode::bernoulli;
  if (text == "bernoulli_variance_matched") return NoiseMode::bernoulli_variance_matched;
  throw DomainError("unknown noise mode '" + std::string(text) + "'");
}

double round_half_up(double v) { return std::floor(v + 0.5); }
double rounding_residual(double v) { return std::floor(v + 0.5) - v; }

Tensor clamp(const Tensor& x, const Tensor& lower, const Tensor& upper) {
  if (lower.numel() != 1 || upper.numel() != 1) throw DimensionError("clamp bounds must be scalars");
  if (!(lower.item() < upper.item())) {
    throw DomainError("clamp requires l < u, got l=" + std::to_string(lower.item()) +
                      " u=" + std::to_string(upper.item()));
  }
  return maximum(minimum(x, upper), lower);
}

// ---- FakeQuantizer --------------------------------------------------------

FakeQuantizer::FakeQuantizer(SiteKind kind, BoundsMode bounds, NoiseMode noise, double fixed_lower)
    : kind_(kind),
      bounds_(bounds),
      noise_(noise),
      log_scale_(Tensor::scalar(0.0, true)),
      lower_(Tensor::scalar(fixed_lower, bounds == BoundsMode::free)),
      range_raw_(Tensor::scalar(bounds == BoundsMode::free ? 0.0 : softplus_inverse(1.0), true)) {}

std::vector<Tensor> FakeQuantizer::parameters() const {
  if (bounds_ == BoundsMode::free) return {log_scale_, lower_, range_raw_};
  return {log_scale_, range_raw_};
}

Tensor FakeQuantizer::scale() const { return exp(log_scale_); }

Tensor FakeQuantizer::range() const { return bounds_ == BoundsMode::free ? exp(range_raw_) : softplus(range_raw_); }

Tensor FakeQuantizer::upper() const { return add(lower_, range()); }

Tensor FakeQuantizer::bitwidth() const {
  // log2((u - l) / s + 1)
  Tensor ratio = mul(range(), exp(neg(log_scale_)));
  return mul(log(add(ratio, 1.0)), 1.0 / std::log(2.0));
}

double FakeQuantizer::scale_value() const { return std::exp(log_scale_.item()); }

double FakeQuantizer::range_value() const {
  return bounds_ == BoundsMode::free ? std::exp(range_raw_.item()) : softplus_value(range_raw_.item());
}

double FakeQuantizer::bitwidth_value() const {
  return std::log2(range_value() * std::exp(-log_scale_.item()) + 1.0);
}

void FakeQuantizer::set_range(double l, double u, double omega) {
  if (!(l < u) || !std::isfinite(l) || !std::isfinite(u)) {
    throw DomainError("quantizer range needs finite l < u, got [" + std::to_string(l) + ", " + std::to_string(u) + "]");
  }
  if (!(omega > 0.0)) throw DomainError("bit-width must be positive");
  if (bounds_ == BoundsMode::free) {
    lower_.mutable_data()[0] = l;
    range_raw_.mutable_data()[0] = std::log(u - l);
  } else {
    if (l != lower_.item()) {
      throw DomainError("lower bound is fixed at " + std::to_string(lower_.item()) + " for this site");
    }
    range_raw_.mutable_data()[0] = softplus_inverse(u - l);
  }
  log_scale_.mutable_data()[0] = std::log(u - l) - std::log(std::exp2(omega) - 1.0);
}

void FakeQuantizer::set_scale(double s) {
  if (!(s > 0.0)) throw DomainError("scale must be positive");
  log_scale_.mutable_data()[0] = std::log(s);
}

double sample_scale_gradient(NoiseMode mode, double residual, Rng& rng) {
  switch (mode) {
    case NoiseMode::rounding_residual:
      return residual;
    case NoiseMode::bernoulli:
      return rng.coin() ? 0.5 : -0.5;
    case NoiseMode::bernoulli_variance_matched:
      return (rng.coin() ? 0.5 : -0.5) / std::sqrt(3.0);
  }
  return 0.0;
}

Tensor FakeQuantizer::forward(const Tensor& x, Rng* rng) const {
  Tensor xbar = clamp(x, lower_, upper());
  Tensor s = scale();
  const double z = offset();
  const NoiseMode mode = noise_;
  // s * r(q(x)): forward is the true rounding noise, backward is overridden
  CustomOp noise(
      "quant_noise",
      [z](std::span<const Tensor> in) {
        auto xb = in[0].data();
        const double sv = in[1].item();
        std::vector<double> out(xb.size());
        for (std::size_t i = 0; i < xb.size(); ++i) out[i] = sv * rounding_residual((xb[i] - z) / sv);
        return CustomOp::ForwardResult{in[0].shape(), std::move(out)};
      },
      [rng, mode](std::span<const double> g, std::span<const Tensor> in, std::span<const double> out) {
        if (rng == nullptr && mode != NoiseMode::rounding_residual) {
          throw ContractError("quantizer backward needs a random stream");
        }
        const double sv = in[1].item();
        std::vector<double> dx(g.size(), 0.0);
        double ds = 0.0;
        if (mode == NoiseMode::rounding_residual) {
          for (std::size_t i = 0; i < g.size(); ++i) ds += g[i] * (out[i] / sv);
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) ds += g[i] * sample_scale_gradient(mode, out[i] / sv, *rng);
        }
        return std::vector<std::vector<double>>{std::move(dx), {ds}};
      });
  return add(xbar, noise({xbar, s}));
}

std::vector<std::int64_t> FakeQuantizer::quantize_levels(std::span<const double> x) const {
  const double l = lower_value(), u = upper_value(), s = scale_value(), z = offset();
  std::vector<std::int64_t> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xb = std::max(l, std::min(u, x[i]));
    out[i] = static_cast<std::int64_t>(round_half_up((xb - z) / s));
  }
  return out;
}

SteGradients ste_backward(std::span<const double> grad_up, std::span<const double> x, const FakeQuantizer& fq,
                          Rng& rng) {
  if (grad_up.size() != x.size()) throw DimensionError("ste_backward: gradient and input sizes differ");
  const double l = fq.lower_value(), u = fq.upper_value(), s = fq.scale_value(), z = fq.offset();
  SteGradients g;
  g.x.assign(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < l) {
      g.lower += grad_up[i];
    } else if (x[i] > u) {
      g.upper += grad_up[i];
    } else {
      g.x[i] = grad_up[i];
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xb = std::max(l, std::min(u, x[i]));
    g.s += grad_up[i] * sample_scale_gradient(fq.noise_mode(), rounding_residual((xb - z) / s), rng);
  }
  return g;
}

// ---- quantized layers -----------------------------------------------------

Tensor quantized_matmul(const Tensor& x, const Tensor& weights, const FakeQuantizer& wq, const FakeQuantizer& aq,
                        Rng* rng) {
  return matmul(aq.forward(x, rng), wq.forward(weights, rng));
}

Tensor quantized_layer_forward(const QuantizedLayer& layer, const Tensor& x, Rng* rng) {
  if (x.rank() != 2 || layer.weights.rank() != 2 || x.dim(1) != layer.weights.dim(0)) {
    throw DimensionError("quantized layer: input " + shape_str(x.shape()) + " vs weights " +
                         shape_str(layer.weights.shape()));
  }
  Tensor y = quantized_matmul(x, layer.weights, layer.weight_quantizer, layer.activation_quantizer, rng);
  if (layer.bias.defined()) y = add_bias(y, layer.bias);
  return apply_activation(y, layer.activation);
}

FusedLayer integer_fuse(const Tensor& weights, const Tensor& bias, const FakeQuantizer& wq, const FakeQuantizer& aq,
                        Activation activation) {
  if (weights.rank() != 2) throw DimensionError("integer_fuse expects a weight matrix");
  FusedLayer fused;
  fused.in = weights.dim(0);
  fused.out = weights.dim(1);
  fused.weight_scale = wq.scale_value();
  fused.activation_scale = aq.scale_value();
  fused.activation_lower = aq.lower_value();
  fused.activation_upper = aq.upper_value();
  fused.activation = activation;
  if (bias.defined()) fused.bias.assign(bias.data().begin(), bias.data().end());

  Tensor dequantized;
  {
    NoGradGuard no_grad;
    dequantized = wq.forward(weights, nullptr);
  }
  const double s = fused.weight_scale;
  const double z = wq.offset();
  fused.weights.resize(dequantized.numel());
  for (std::size_t i = 0; i < dequantized.numel(); ++i) {
    const double level = (dequantized[i] - z) / s;
    const double k = std::round(level);
    if (std::abs(level - k) > kGridTolerance) {
      throw FusionError("weight " + std::to_string(i) + " is off the integer grid by " +
                        std::to_string(std::abs(level - k)) + " levels");
    }
    if (std::abs(k) > static_cast<double>(std::numeric_limits<std::int32_t>::max())) {
      throw FusionError("weight level " + std::to_string(k) + " does not fit in 32 bits");
    }
    fused.weights[i] = static_cast<std::int32_t>(k);
  }
  return fused;
}

FusedLayer integer_fuse(const QuantizedLayer& layer) {
  return integer_fuse(layer.weights, layer.bias, layer.weight_quantizer, layer.activation_quantizer,
                      layer.activation);
}

std::vector<double> fused_forward(const FusedLayer& layer, std::span<const double> x, std::size_t rows) {
  if (x.size() != rows * layer.in) throw DimensionError("fused_forward: input size mismatch");
  std::vector<std::int64_t> levels(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xb = std::max(layer.activation_lower, std::min(layer.activation_upper, x[i]));
    levels[i] = static_cast<std::int64_t>(round_half_up(xb / layer.activation_scale));
  }
  const double scale = layer.weight_scale * layer.activation_scale;
  std::vector<double> out(rows * layer.out);
  std::vector<std::int64_t> acc(layer.out);
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill(acc.begin(), acc.end(), 0);
    for (std::size_t p = 0; p < layer.in; ++p) {
      const std::int64_t a = levels[r * layer.in + p];
      const std::int32_t* w = layer.weights.data() + p * layer.out;
      for (std::size_t j = 0; j < layer.out; ++j) acc[j] += a * w[j];
    }
    for (std::size_t j = 0; j < layer.out; ++j) {
      double v = scale * static_cast<double>(acc[j]);
      if (!layer.channel_scale.empty()) v *= layer.channel_scale[j];
      if (!layer.bias.empty()) v += layer.bias[j];
      if (layer.activation == Activation::relu) v = std::max(v, 0.0);
      out[r * layer.out + j] = v;
    }
  }
  return out;
}

}  // namespace gdnsq
