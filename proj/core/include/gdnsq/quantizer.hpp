#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gdnsq/nn_ops.hpp"
#include "gdnsq/rng.hpp"
#include "gdnsq/tensor.hpp"

namespace gdnsq {

enum class SiteKind { weight, activation };

// How d(s*r)/ds is produced in the backward pass.
enum class NoiseMode {
  rounding_residual,           // the true residual r(q(x))
  bernoulli,                   // Bernoulli(1/2) - 1/2, i.e. +-1/2
  bernoulli_variance_matched,  // (+-1/2) / sqrt(3), variance 1/12
};

// fixed_lower: l is a constant (0 after relu), u = l + softplus(raw).
// free:        l is learnable,                 u = l + exp(log_range).
enum class BoundsMode { free, fixed_lower };

std::string to_string(NoiseMode mode);
NoiseMode parse_noise_mode(std::string_view text);

// Round half up: floor(v + 1/2). Never banker's rounding.
double round_half_up(double v);
// r(v) = floor(v + 1/2) - v
double rounding_residual(double v);

// max(l, min(u, x)). l and u hold one element each and must satisfy l < u.
// Ties send the gradient to x.
Tensor clamp(const Tensor& x, const Tensor& lower, const Tensor& upper);

// Learnable fake quantizer for one weight or activation site.
//
// Parameters are stored as log(s), a lower bound and a raw range parameter so
// that s > 0 and l < u hold by construction. The bit-width is derived:
//   omega = log2((u - l) / s + 1).
class FakeQuantizer {
 public:
  FakeQuantizer(SiteKind kind, BoundsMode bounds, NoiseMode noise = NoiseMode::bernoulli, double fixed_lower = 0.0);

  SiteKind kind() const { return kind_; }
  BoundsMode bounds_mode() const { return bounds_; }
  NoiseMode noise_mode() const { return noise_; }
  void set_noise_mode(NoiseMode mode) { noise_ = mode; }

  // Offset z. Offset quantization is not supported, so this is always zero.
  double offset() const { return 0.0; }

  Tensor& log_scale() { return log_scale_; }
  Tensor& lower_param() { return lower_; }
  Tensor& range_param() { return range_raw_; }
  const Tensor& log_scale() const { return log_scale_; }
  const Tensor& lower_param() const { return lower_; }
  const Tensor& range_param() const { return range_raw_; }

  // Learnable tensors (the lower bound is excluded in fixed_lower mode).
  std::vector<Tensor> parameters() const;

  // Graph-building views of the derived quantities.
  Tensor scale() const;
  Tensor lower() const { return lower_; }
  Tensor range() const;
  Tensor upper() const;
  Tensor bitwidth() const;

  double scale_value() const;
  double lower_value() const { return lower_.item(); }
  double range_value() const;
  double upper_value() const { return lower_value() + range_value(); }
  double bitwidth_value() const;

  // Places the quantizer on [l, u] with exactly `omega` bits.
  void set_range(double l, double u, double omega);
  // Keeps l and u, sets s directly.
  void set_scale(double s);

  bool initialized() const { return initialized_; }
  void mark_initialized(bool value = true) { initialized_ = value; }

  // D(Q(x)) = clamp(x) + s * r(q(x)). Backward follows the straight-through
  // rules: the noise term contributes nothing to dx, and ds is drawn from
  // `rng` according to noise_mode(). `rng` may be null when no backward pass
  // will run.
  Tensor forward(const Tensor& x, Rng* rng) const;

  // Integer levels Q(x) = round_half_up((clamp(x) - z) / s).
  std::vector<std::int64_t> quantize_levels(std::span<const double> x) const;

 private:
  SiteKind kind_;
  BoundsMode bounds_;
  NoiseMode noise_;
  Tensor log_scale_;
  Tensor lower_;
  Tensor range_raw_;
  bool initialized_ = false;
};

// Draws one d(s*r)/ds sample.
double sample_scale_gradient(NoiseMode mode, double residual, Rng& rng);

struct SteGradients {
  std::vector<double> x;  // per element
  double s = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

// Reference form of the quantizer's backward pass for an upstream gradient,
// written without the autodiff engine. Consumes `rng` in element order.
SteGradients ste_backward(std::span<const double> grad_up, std::span<const double> x, const FakeQuantizer& fq,
                          Rng& rng);

// y = a(D_w(Q_w(W)) D_a(Q_a(x))) (+ bias).
struct QuantizedLayer {
  Tensor weights;  // [in, out]
  Tensor bias;     // [out], optional
  FakeQuantizer weight_quantizer{SiteKind::weight, BoundsMode::free};
  FakeQuantizer activation_quantizer{SiteKind::activation, BoundsMode::fixed_lower};
  Activation activation = Activation::relu;
};

// Quantized product D_a(Q_a(x)) D_w(Q_w(W)) for row-major x [N, in].
Tensor quantized_matmul(const Tensor& x, const Tensor& weights, const FakeQuantizer& wq, const FakeQuantizer& aq,
                        Rng* rng);

Tensor quantized_layer_forward(const QuantizedLayer& layer, const Tensor& x, Rng* rng);

// Integer form of a quantized layer: y = a(c * s_w * s_a * (Q_a(x) Q_w(W)) + bias),
// with c the optional per-output channel scale.
struct FusedLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<std::int32_t> weights;  // [in, out]
  double weight_scale = 0.0;
  double activation_scale = 0.0;
  double activation_lower = 0.0;
  double activation_upper = 0.0;
  std::vector<double> bias;
  // Per-output multiplier from a folded batch norm; empty means 1.
  std::vector<double> channel_scale;
  Activation activation = Activation::identity;
};

// Extracts Q_w(W) as integers. Throws FusionError when the fake-quantized
// weights are not within 1e-9 of the integer grid.
FusedLayer integer_fuse(const Tensor& weights, const Tensor& bias, const FakeQuantizer& wq, const FakeQuantizer& aq,
                        Activation activation);
FusedLayer integer_fuse(const QuantizedLayer& layer);

// Integer-path forward for x [rows, in].
std::vector<double> fused_forward(const FusedLayer& layer, std::span<const double> x, std::size_t rows);

}  // namespace gdnsq
