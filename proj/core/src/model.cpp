#include "gdnsq/model.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "gdnsq/errors.hpp"

namespace gdnsq {

using nlohmann::json;

namespace {

std::string layer_kind_name(LayerKind k) { return k == LayerKind::linear ? "linear" : "conv2d"; }

LayerKind parse_layer_kind(const std::string& s) {
  if (s == "linear") return LayerKind::linear;
  if (s == "conv2d") return LayerKind::conv2d;
  throw SpecError("unknown layer kind '" + s + "'");
}

std::string activation_name(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw SpecError("unknown activation '" + s + "'");
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t row = x.numel() / x.dim(0);
  auto d = x.data();
  Shape shape = x.shape();
  shape[0] = end - begin;
  return Tensor::from(std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                          d.begin() + static_cast<std::ptrdiff_t>(end * row)),
                      std::move(shape));
}

void copy_values(const Tensor& from, Tensor& to) {
  auto src = from.data();
  auto dst = to.mutable_data();
  std::copy(src.begin(), src.end(), dst.begin());
}

std::vector<std::uint64_t> to_u64_dims(const Shape& s) { return std::vector<std::uint64_t>(s.begin(), s.end()); }

Tensor load_tensor(const Checkpoint& ckpt, const std::string& name, const Shape& expected, bool requires_grad) {
  const auto& sec = ckpt.section(name);
  Shape shape(sec.dims.begin(), sec.dims.end());
  if (shape != expected) {
    throw FormatError("section '" + name + "' has shape " + shape_str(shape) + ", expected " + shape_str(expected), 0);
  }
  return Tensor::from(ckpt.f64(name), std::move(shape), requires_grad);
}

}  // namespace

// ---- ModelSpec --------------------------------------------------------------

std::vector<Shape> ModelSpec::layer_output_shapes() const {
  if (layers.empty()) throw SpecError("model spec has no layers");
  if (input_shape.empty() || shape_numel(input_shape) == 0) throw SpecError("model spec needs a non-empty input shape");
  std::vector<Shape> out;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string where = "layer " + std::to_string(i);
    if (l.in == 0 || l.out == 0) throw SpecError(where + " has a zero width");
    if (l.kind == LayerKind::linear) {
      if (shape_numel(cur) != l.in) {
        throw SpecError(where + " expects " + std::to_string(l.in) + " inputs but receives " + shape_str(cur));
      }
      cur = {l.out};
    } else {
      if (cur.size() != 3 || cur[2] != l.in) {
        throw SpecError(where + " (conv2d) expects [H, W, " + std::to_string(l.in) + "] but receives " + shape_str(cur));
      }
      if (l.kernel == 0 || l.stride == 0) throw SpecError(where + " has zero kernel or stride");
      if (cur[0] + 2 * l.padding < l.kernel || cur[1] + 2 * l.padding < l.kernel) {
        throw SpecError(where + " kernel is larger than its padded input");
      }
      cur = {conv_out_size(cur[0], l.kernel, l.stride, l.padding), conv_out_size(cur[1], l.kernel, l.stride, l.padding),
             l.out};
    }
    out.push_back(cur);
  }
  return out;
}

void ModelSpec::validate() const {
  if (num_classes == 0) throw SpecError("num_classes must be positive");
  auto shapes = layer_output_shapes();
  if (shapes.back() != Shape{num_classes}) {
    throw SpecError("final layer emits " + shape_str(shapes.back()) + ", expected " + std::to_string(num_classes) +
                    " logits");
  }
}

std::string ModelSpec::to_json() const {
  json j;
  j["name"] = name;
  j["input_shape"] = input_shape;
  j["num_classes"] = num_classes;
  j["layers"] = json::array();
  for (const auto& l : layers) {
    j["layers"].push_back({{"kind", layer_kind_name(l.kind)},
                           {"in", l.in},
                           {"out", l.out},
                           {"kernel", l.kernel},
                           {"stride", l.stride},
                           {"padding", l.padding},
                           {"activation", activation_name(l.activation)},
                           {"batchnorm", l.batchnorm}});
  }
  return j.dump();
}

ModelSpec ModelSpec::from_json(const std::string& text) {
  try {
    json j = json::parse(text);
    ModelSpec s;
    s.name = j.value("name", std::string("custom"));
    s.input_shape = j.at("input_shape").get<Shape>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    for (const auto& l : j.at("layers")) {
      LayerSpec ls;
      ls.kind = parse_layer_kind(l.at("kind").get<std::string>());
      ls.in = l.at("in").get<std::size_t>();
      ls.out = l.at("out").get<std::size_t>();
      ls.kernel = l.value("kernel", std::size_t{1});
      ls.stride = l.value("stride", std::size_t{1});
      ls.padding = l.value("padding", std::size_t{0});
      ls.activation = parse_activation(l.value("activation", std::string("relu")));
      ls.batchnorm = l.value("batchnorm", false);
      s.layers.push_back(ls);
    }
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw SpecError(std::string("malformed model spec: ") + e.what());
  }
}

ModelSpec builtin_model(std::string_view name, const Shape& input_shape, std::size_t num_classes) {
  ModelSpec s;
  s.name = std::string(name);
  s.input_shape = input_shape;
  s.num_classes = num_classes;
  const std::size_t in = shape_numel(input_shape);
  auto dense = [](std::size_t i, std::size_t o, Activation a) {
    LayerSpec l;
    l.kind = LayerKind::linear;
    l.in = i;
    l.out = o;
    l.activation = a;
    return l;
  };
  if (name == "mlp") {
    s.layers = {dense(in, 32, Activation::relu), dense(32, 32, Activation::relu),
                dense(32, num_classes, Activation::identity)};
  } else if (name == "mlp1") {
    s.layers = {dense(in, 32, Activation::relu), dense(32, num_classes, Activation::identity)};
  } else if (name == "mlp4") {
    s.layers = {dense(in, 32, Activation::relu), dense(32, 32, Activation::relu), dense(32, 32, Activation::relu),
                dense(32, num_classes, Activation::identity)};
  } else if (name == "cnn") {
    if (input_shape.size() != 3) throw SpecError("cnn expects an [H, W, C] input");
    auto conv = [](std::size_t i, std::size_t o) {
      LayerSpec l;
      l.kind = LayerKind::conv2d;
      l.in = i;
      l.out = o;
      l.kernel = 3;
      l.stride = 2;
      l.padding = 1;
      l.activation = Activation::relu;
      l.batchnorm = true;
      return l;
    };
    s.layers = {conv(input_shape[2], 8), conv(8, 16), conv(16, 16)};
    std::size_t h = input_shape[0], w = input_shape[1];
    for (int i = 0; i < 3; ++i) {
      h = conv_out_size(h, 3, 2, 1);
      w = conv_out_size(w, 3, 2, 1);
    }
    s.layers.push_back(dense(h * w * 16, num_classes, Activation::identity));
  } else {
    throw SpecError("unknown model '" + std::string(name) + "' (expected mlp, mlp1, mlp4 or cnn)");
  }
  s.validate();
  return s;
}

// ---- Model ------------------------------------------------------------------

Model::Model(ModelSpec spec, bool quantized, std::uint64_t seed, NoiseMode noise)
    : spec_(std::move(spec)), quantized_(quantized) {
  spec_.validate();
  if (quantized_ && spec_.layers.size() < 3) {
    throw SpecError("a quantized model needs at least three layers (first and last stay full precision)");
  }
  const auto shapes = spec_.layer_output_shapes();
  Rng rng(seed);
  Shape cur = spec_.input_shape;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& ls = spec_.layers[i];
    Layer layer;
    layer.spec = ls;
    layer.in_shape = cur;
    layer.out_shape = shapes[i];
    const std::size_t fan_in = ls.kind == LayerKind::linear ? ls.in : ls.kernel * ls.kernel * ls.in;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> w(fan_in * ls.out);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    layer.weight = Tensor::from(std::move(w), {fan_in, ls.out}, true);
    if (ls.batchnorm) {
      BatchNormState bn;
      bn.gamma = Tensor::full({ls.out}, 1.0, true);
      bn.beta = Tensor::zeros({ls.out}, true);
      bn.running_mean.assign(ls.out, 0.0);
      bn.running_var.assign(ls.out, 1.0);
      layer.bn = std::move(bn);
    } else {
      layer.bias = Tensor::zeros({ls.out}, true);
    }
    if (quantized_ && i > 0 && i + 1 < spec_.layers.size()) {
      layer.weight_quantizer.emplace(SiteKind::weight, BoundsMode::free, noise);
      const bool after_relu = spec_.layers[i - 1].activation == Activation::relu;
      layer.activation_quantizer.emplace(SiteKind::activation, after_relu ? BoundsMode::fixed_lower : BoundsMode::free,
                                         noise, 0.0);
    }
    layers_.push_back(std::move(layer));
    cur = shapes[i];
  }
}

Model Model::clone() const {
  Checkpoint ckpt;
  save(ckpt, "");
  return load(ckpt, "");
}

Model Model::student_from(const Model& teacher, NoiseMode noise) {
  Model student(teacher.spec_, true, 0, noise);
  for (std::size_t i = 0; i < teacher.layers_.size(); ++i) {
    const Layer& t = teacher.layers_[i];
    Layer& s = student.layers_[i];
    copy_values(t.weight, s.weight);
    if (t.bias.defined()) copy_values(t.bias, s.bias);
    if (t.bn) {
      copy_values(t.bn->gamma, s.bn->gamma);
      copy_values(t.bn->beta, s.bn->beta);
      s.bn->running_mean = t.bn->running_mean;
      s.bn->running_var = t.bn->running_var;
      s.bn->momentum = t.bn->momentum;
      s.bn->eps = t.bn->eps;
    }
  }
  return student;
}

Tensor Model::forward(const Tensor& x, const ForwardOptions& options) {
  Shape expected{x.rank() > 0 ? x.dim(0) : 0};
  expected.insert(expected.end(), spec_.input_shape.begin(), spec_.input_shape.end());
  if (x.rank() == 0 || x.shape() != expected) {
    throw DimensionError("model input " + shape_str(x.shape()) + " does not match [B, " +
                         shape_str(spec_.input_shape) + "]");
  }
  const std::size_t batch = x.dim(0);
  Tensor h = x;
  std::size_t site = 0;
  for (auto& layer : layers_) {
    const auto& ls = layer.spec;
    Tensor in = h;
    Tensor w = layer.weight;
    if (layer.quantized()) {
      if (options.bypass_quantizers) {
        if (options.observer) options.observer->observe(site, in.data(), in.data());
      } else {
        Tensor q = layer.activation_quantizer->forward(in, options.rng);
        if (options.observer) options.observer->observe(site, in.data(), q.data());
        in = q;
        w = layer.weight_quantizer->forward(layer.weight, options.rng);
      }
      ++site;
    }
    Tensor y;
    if (ls.kind == LayerKind::linear) {
      if (in.rank() != 2) in = reshape(in, {batch, in.numel() / batch});
      y = matmul(in, w);
    } else {
      y = matmul(im2col(in, ls.kernel, ls.stride, ls.padding), w);
    }
    if (layer.bias.defined()) y = add_bias(y, layer.bias);
    if (layer.bn) {
      auto& bn = *layer.bn;
      if (options.mode == Mode::train && !bn.frozen) {
        BatchStats stats;
        y = batch_norm_train(y, bn.gamma, bn.beta, bn.eps, &stats);
        const double n = static_cast<double>(y.dim(0));
        for (std::size_t c = 0; c < bn.running_mean.size(); ++c) {
          bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * stats.mean[c];
          bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * stats.var[c] * n / (n - 1.0);
        }
      } else {
        y = batch_norm_eval(y, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps);
      }
    }
    y = apply_activation(y, ls.activation);
    if (ls.kind == LayerKind::conv2d) {
      Shape s{batch};
      s.insert(s.end(), layer.out_shape.begin(), layer.out_shape.end());
      y = reshape(y, std::move(s));
    }
    h = y;
  }
  return h;
}

std::vector<NamedParameter> Model::parameters() const {
  std::vector<NamedParameter> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = "L" + std::to_string(i) + ".";
    out.push_back({p + "weight", l.weight});
    if (l.bias.defined()) out.push_back({p + "bias", l.bias});
    if (l.bn) {
      out.push_back({p + "bn.gamma", l.bn->gamma});
      out.push_back({p + "bn.beta", l.bn->beta});
    }
    auto add_quantizer = [&](const FakeQuantizer& q, const std::string& tag) {
      out.push_back({p + tag + ".log_s", q.log_scale()});
      if (q.bounds_mode() == BoundsMode::free) out.push_back({p + tag + ".lower", q.lower_param()});
      out.push_back({p + tag + ".range", q.range_param()});
    };
    if (l.weight_quantizer) add_quantizer(*l.weight_quantizer, "wq");
    if (l.activation_quantizer) add_quantizer(*l.activation_quantizer, "aq");
  }
  return out;
}

std::vector<FakeQuantizer*> Model::weight_quantizers() {
  std::vector<FakeQuantizer*> out;
  for (auto& l : layers_)
    if (l.weight_quantizer) out.push_back(&*l.weight_quantizer);
  return out;
}

std::vector<FakeQuantizer*> Model::activation_quantizers() {
  std::vector<FakeQuantizer*> out;
  for (auto& l : layers_)
    if (l.activation_quantizer) out.push_back(&*l.activation_quantizer);
  return out;
}

std::vector<const FakeQuantizer*> Model::weight_quantizers() const {
  std::vector<const FakeQuantizer*> out;
  for (const auto& l : layers_)
    if (l.weight_quantizer) out.push_back(&*l.weight_quantizer);
  return out;
}

std::vector<const FakeQuantizer*> Model::activation_quantizers() const {
  std::vector<const FakeQuantizer*> out;
  for (const auto& l : layers_)
    if (l.activation_quantizer) out.push_back(&*l.activation_quantizer);
  return out;
}

std::vector<std::size_t> Model::quantized_layer_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].quantized()) out.push_back(i);
  return out;
}

bool Model::quantizers_initialized() const {
  if (!quantized_) return false;
  for (const auto& l : layers_) {
    if (l.weight_quantizer && !l.weight_quantizer->initialized()) return false;
    if (l.activation_quantizer && !l.activation_quantizer->initialized()) return false;
  }
  return true;
}

void Model::set_noise_mode(NoiseMode mode) {
  for (auto* q : weight_quantizers()) q->set_noise_mode(mode);
  for (auto* q : activation_quantizers()) q->set_noise_mode(mode);
}

void Model::set_batchnorm_frozen(bool frozen) {
  for (auto& l : layers_)
    if (l.bn) l.bn->frozen = frozen;
}

void Model::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.put_text(prefix + "spec", spec_.to_json());
  const std::uint64_t q = quantized_ ? 1 : 0;
  ckpt.put_u64(prefix + "quantized", std::span<const std::uint64_t>(&q, 1));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = prefix + "L" + std::to_string(i) + "/";
    ckpt.put_f64(p + "weight", l.weight.data(), to_u64_dims(l.weight.shape()));
    if (l.bias.defined()) ckpt.put_f64(p + "bias", l.bias.data());
    if (l.bn) {
      ckpt.put_f64(p + "bn/gamma", l.bn->gamma.data());
      ckpt.put_f64(p + "bn/beta", l.bn->beta.data());
      ckpt.put_f64(p + "bn/running_mean", l.bn->running_mean);
      ckpt.put_f64(p + "bn/running_var", l.bn->running_var);
      const double cfg[2] = {l.bn->momentum, l.bn->eps};
      ckpt.put_f64(p + "bn/config", cfg);
      const std::uint64_t frozen = l.bn->frozen ? 1 : 0;
      ckpt.put_u64(p + "bn/frozen", std::span<const std::uint64_t>(&frozen, 1));
    }
    auto save_quantizer = [&](const FakeQuantizer& fq, const std::string& tag) {
      ckpt.put_scalar(p + tag + "/log_s", fq.log_scale().item());
      ckpt.put_scalar(p + tag + "/lower", fq.lower_param().item());
      ckpt.put_scalar(p + tag + "/range", fq.range_param().item());
      const std::uint64_t flags[3] = {static_cast<std::uint64_t>(fq.bounds_mode()),
                                      static_cast<std::uint64_t>(fq.noise_mode()), fq.initialized() ? 1u : 0u};
      ckpt.put_u64(p + tag + "/flags", flags);
    };
    if (l.weight_quantizer) save_quantizer(*l.weight_quantizer, "wq");
    if (l.activation_quantizer) save_quantizer(*l.activation_quantizer, "aq");
  }
}

Model Model::load(const Checkpoint& ckpt, const std::string& prefix) {
  ModelSpec spec = ModelSpec::from_json(ckpt.text(prefix + "spec"));
  const auto q = ckpt.u64(prefix + "quantized");
  if (q.size() != 1) throw FormatError("section '" + prefix + "quantized' must hold one value", 0);
  Model m(std::move(spec), q[0] != 0, 0);
  for (std::size_t i = 0; i < m.layers_.size(); ++i) {
    auto& l = m.layers_[i];
    const std::string p = prefix + "L" + std::to_string(i) + "/";
    l.weight = load_tensor(ckpt, p + "weight", l.weight.shape(), true);
    if (l.bias.defined()) l.bias = load_tensor(ckpt, p + "bias", l.bias.shape(), true);
    if (l.bn) {
      l.bn->gamma = load_tensor(ckpt, p + "bn/gamma", l.bn->gamma.shape(), true);
      l.bn->beta = load_tensor(ckpt, p + "bn/beta", l.bn->beta.shape(), true);
      l.bn->running_mean = ckpt.f64(p + "bn/running_mean");
      l.bn->running_var = ckpt.f64(p + "bn/running_var");
      if (l.bn->running_mean.size() != l.spec.out || l.bn->running_var.size() != l.spec.out) {
        throw FormatError("batch norm statistics of layer " + std::to_string(i) + " have the wrong size", 0);
      }
      const auto cfg = ckpt.f64(p + "bn/config");
      if (cfg.size() != 2) throw FormatError("section '" + p + "bn/config' must hold two values", 0);
      l.bn->momentum = cfg[0];
      l.bn->eps = cfg[1];
      l.bn->frozen = ckpt.u64(p + "bn/frozen").at(0) != 0;
    }
    auto load_quantizer = [&](std::optional<FakeQuantizer>& fq, const std::string& tag) {
      const auto flags = ckpt.u64(p + tag + "/flags");
      if (flags.size() != 3 || flags[0] > 1 || flags[1] > 2) {
        throw FormatError("section '" + p + tag + "/flags' is malformed", 0);
      }
      const auto bounds = static_cast<BoundsMode>(flags[0]);
      const double lower = ckpt.scalar(p + tag + "/lower");
      fq.emplace(fq->kind(), bounds, static_cast<NoiseMode>(flags[1]), bounds == BoundsMode::fixed_lower ? lower : 0.0);
      fq->log_scale().mutable_data()[0] = ckpt.scalar(p + tag + "/log_s");
      fq->lower_param().mutable_data()[0] = lower;
      fq->range_param().mutable_data()[0] = ckpt.scalar(p + tag + "/range");
      fq->mark_initialized(flags[2] != 0);
    };
    if (l.weight_quantizer) load_quantizer(l.weight_quantizer, "wq");
    if (l.activation_quantizer) load_quantizer(l.activation_quantizer, "aq");
  }
  return m;
}

std::vector<double> predict_logits(Model& model, const Tensor& inputs, std::size_t batch_size) {
  NoGradGuard no_grad;
  const std::size_t n = inputs.dim(0);
  std::vector<double> out;
  out.reserve(n * model.spec().num_classes);
  for (std::size_t b = 0; b < n; b += batch_size) {
    Tensor logits = model.forward(slice_rows(inputs, b, std::min(n, b + batch_size)), {Mode::eval});
    out.insert(out.end(), logits.data().begin(), logits.data().end());
  }
  return out;
}

double accuracy(Model& model, const Tensor& inputs, std::span<const std::size_t> labels, std::size_t batch_size) {
  if (inputs.dim(0) != labels.size()) throw DimensionError("accuracy: input and label counts differ");
  if (labels.empty()) return 0.0;
  const auto pred = argmax_rows(predict_logits(model, inputs, batch_size), model.spec().num_classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace gdnsq
