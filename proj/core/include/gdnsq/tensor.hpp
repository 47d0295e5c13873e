#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gdnsq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

// One recorded operation. g_in[i] arrives zero-filled with the size of input i
// when that input requires a gradient, and empty otherwise.
using BackwardFn = std::function<void(std::span<const double> g_out, std::span<const double> out,
                                      std::vector<std::vector<double>>& g_in)>;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
  std::uint64_t id = 0;
};

}  // namespace detail

// Dense row-major float64 array with reverse-mode differentiation.
//
// Tensors are cheap handles: copies share the same storage. A tensor produced
// by an operation on inputs that require gradients keeps a reference to the
// node that created it; the graph is rebuilt on every forward pass.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<double> data, Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::uint64_t id() const;

  std::span<const double> data() const;
  // Direct write access; only valid on leaves between optimizer steps.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Same storage values, detached from the graph.
  Tensor detach() const;

  // Accumulates d(this)/d(t) into t.grad for every reachable t that requires
  // gradients. `this` must hold a single element.
  void backward() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Tape;
  friend class CustomOp;
  friend Tensor detail_make_result(const std::string&, const std::vector<Tensor>&, Shape, std::vector<double>,
                                   detail::BackwardFn);
};

// Topologically ordered view of the graph reachable from a root: every
// tensor appears after all of its inputs.
class Tape {
 public:
  static Tape record(const Tensor& root);

  const std::vector<Tensor>& tensors() const { return order_; }
  // Number of recorded operations (non-leaf tensors).
  std::size_t node_count() const;
  // Ids of the inputs of tensor `i` in tensors().
  std::vector<std::uint64_t> input_ids(std::size_t i) const;

 private:
  std::vector<Tensor> order_;
};

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Builds an output tensor and, when gradients are needed, records its node.
Tensor detail_make_result(const std::string& op, const std::vector<Tensor>& inputs, Shape shape,
                          std::vector<double> data, detail::BackwardFn backward);

// User-defined operation whose backward rule replaces autodiff composition.
//
// The backward callback returns one gradient per input. An empty vector means
// "no gradient for this input"; any other size must match the input's element
// count or backward() throws DimensionError.
class CustomOp {
 public:
  struct ForwardResult {
    Shape shape;
    std::vector<double> data;
  };
  using ForwardFn = std::function<ForwardResult(std::span<const Tensor> inputs)>;
  using BackwardFn = std::function<std::vector<std::vector<double>>(
      std::span<const double> grad_out, std::span<const Tensor> inputs, std::span<const double> output)>;

  CustomOp(std::string name, ForwardFn forward, BackwardFn backward);

  Tensor operator()(std::vector<Tensor> inputs) const;
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::shared_ptr<const ForwardFn> forward_;
  std::shared_ptr<const BackwardFn> backward_;
};

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise binary ops. Shapes must match or one side must hold exactly one
// element (scalar broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);
Tensor neg(const Tensor& a);

// Elementwise max/min against a tensor bound. On ties the gradient goes to
// `x`; the bound receives gradient only where it is strictly selected.
Tensor maximum(const Tensor& x, const Tensor& bound);
Tensor minimum(const Tensor& x, const Tensor& bound);
Tensor max_with_scalar(const Tensor& x, double c);
Tensor min_with_scalar(const Tensor& x, double c);

Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace gdnsq
