#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gdnsq/checkpoint.hpp"
#include "gdnsq/nn_ops.hpp"
#include "gdnsq/optimizer.hpp"
#include "gdnsq/quantizer.hpp"
#include "gdnsq/rng.hpp"
#include "gdnsq/tensor.hpp"

namespace gdnsq {

enum class LayerKind { linear, conv2d };

struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  std::size_t in = 0;   // features (linear) or input channels (conv2d)
  std::size_t out = 0;  // features or output channels
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Activation activation = Activation::relu;
  bool batchnorm = false;
};

struct ModelSpec {
  std::string name;
  Shape input_shape;  // per sample: {features} or {H, W, C}
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;

  // Throws SpecError when shapes do not compose or the head does not emit
  // num_classes logits.
  void validate() const;

  // Per-sample output shape of every layer, after validation.
  std::vector<Shape> layer_output_shapes() const;

  std::string to_json() const;
  static ModelSpec from_json(const std::string& text);
};

// Built-in architectures:
//   mlp   in -> 32 -> 32 -> classes
//   mlp1  in -> 32 -> classes
//   mlp4  in -> 32 -> 32 -> 32 -> classes
//   cnn   3x (conv3x3 stride 2, batchnorm, relu) with 8/16/16 channels, linear head
ModelSpec builtin_model(std::string_view name, const Shape& input_shape, std::size_t num_classes);

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  bool frozen = false;
};

struct Layer {
  LayerSpec spec;
  Shape in_shape;   // per sample
  Shape out_shape;  // per sample
  Tensor weight;    // [in, out] or [k*k*in, out]
  Tensor bias;      // [out]; undefined when batchnorm supplies the shift
  std::optional<BatchNormState> bn;
  std::optional<FakeQuantizer> weight_quantizer;
  std::optional<FakeQuantizer> activation_quantizer;

  bool quantized() const { return weight_quantizer.has_value(); }
};

enum class Mode { train, eval };

// Receives the input of every quantized layer before and after fake
// quantization, in eval and train passes alike.
class ActivationObserver {
 public:
  virtual ~ActivationObserver() = default;
  virtual void observe(std::size_t site, std::span<const double> pre, std::span<const double> post) = 0;
};

struct ForwardOptions {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;                // stream for the quantizer backward pass
  bool bypass_quantizers = false;    // run quantized layers at full precision
  ActivationObserver* observer = nullptr;
};

// Feed-forward classifier. Copies are deep; use clone() explicitly to make
// that visible at call sites.
class Model {
 public:
  // Quantized models wrap every inner layer (all but the first and last);
  // specs with fewer than three layers cannot be quantized.
  Model(ModelSpec spec, bool quantized, std::uint64_t seed, NoiseMode noise = NoiseMode::bernoulli);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Model clone() const;

  // Quantized copy of an FP model sharing no storage with it. Quantizers are
  // left uninitialized.
  static Model student_from(const Model& teacher, NoiseMode noise = NoiseMode::bernoulli);

  const ModelSpec& spec() const { return spec_; }
  bool quantized() const { return quantized_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  // logits [B, num_classes] for x [B, input_shape...].
  Tensor forward(const Tensor& x, const ForwardOptions& options = {});

  std::vector<NamedParameter> parameters() const;

  // Quantizers in layer order; weight and activation site i belong to the
  // same layer.
  std::vector<FakeQuantizer*> weight_quantizers();
  std::vector<FakeQuantizer*> activation_quantizers();
  std::vector<const FakeQuantizer*> weight_quantizers() const;
  std::vector<const FakeQuantizer*> activation_quantizers() const;
  std::vector<std::size_t> quantized_layer_indices() const;
  bool quantizers_initialized() const;

  void set_noise_mode(NoiseMode mode);
  void set_batchnorm_frozen(bool frozen);

  // Writes every array under `prefix` (e.g. "model/").
  void save(Checkpoint& ckpt, const std::string& prefix = "model/") const;
  static Model load(const Checkpoint& ckpt, const std::string& prefix = "model/");

 private:
  Model() = default;

  ModelSpec spec_;
  bool quantized_ = false;
  std::vector<Layer> layers_;
};

// Fraction of correctly classified samples, eval mode, no graph.
double accuracy(Model& model, const Tensor& inputs, std::span<const std::size_t> labels, std::size_t batch_size = 256);

// Eval-mode logits without recording a graph.
std::vector<double> predict_logits(Model& model, const Tensor& inputs, std::size_t batch_size = 256);

}  // namespace gdnsq
