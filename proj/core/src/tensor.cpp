#include "gdnsq/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "gdnsq/errors.hpp"

namespace gdnsq {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<double> data, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  impl->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return impl;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw NumericError(std::string(op) + " produced a non-finite value", i);
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from(std::vector<double> data, Shape shape, bool requires_grad) {
  return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({value}, {1}, requires_grad); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape().size()) throw DimensionError("axis " + std::to_string(axis) + " out of range");
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return defined() ? impl_->data.size() : 0; }
std::uint64_t Tensor::id() const { return defined() ? impl_->id : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require_defined(*this, "set_requires_grad");
  impl_->requires_grad = value;
}

bool Tensor::is_leaf() const { return defined() && impl_->node == nullptr; }
bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (defined()) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return Tensor(new_impl(impl_->shape, impl_->data, false));
}

// ---- Tape / backward ------------------------------------------------------

Tape Tape::record(const Tensor& root) {
  require_defined(root, "Tape::record");
  Tape tape;
  std::unordered_set<const detail::TensorImpl*> visited;
  // iterative post-order DFS
  struct Frame {
    std::shared_ptr<detail::TensorImpl> impl;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({root.impl_, 0});
  visited.insert(root.impl_.get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    const auto& node = top.impl->node;
    if (node && top.next_input < node->inputs.size()) {
      auto child = node->inputs[top.next_input++];
      if (visited.insert(child.get()).second) stack.push_back({child, 0});
      continue;
    }
    tape.order_.push_back(Tensor(top.impl));
    stack.pop_back();
  }
  return tape;
}

std::size_t Tape::node_count() const {
  return static_cast<std::size_t>(
      std::count_if(order_.begin(), order_.end(), [](const Tensor& t) { return !t.is_leaf(); }));
}

std::vector<std::uint64_t> Tape::input_ids(std::size_t i) const {
  std::vector<std::uint64_t> ids;
  const auto& node = order_.at(i).impl_->node;
  if (node) {
    for (const auto& in : node->inputs) ids.push_back(in->id);
  }
  return ids;
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar root, got shape " + shape_str(shape()));
  }
  Tape tape = Tape::record(*this);
  const auto& order = tape.tensors();

  std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads;
  grads[impl_.get()] = {1.0};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& impl = it->impl_;
    auto found = grads.find(impl.get());
    if (found == grads.end() || !impl->node) continue;
    const auto& node = *impl->node;
    std::vector<std::vector<double>> g_in(node.inputs.size());
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (node.inputs[i]->requires_grad) g_in[i].assign(node.inputs[i]->data.size(), 0.0);
    }
    node.backward(found->second, impl->data, g_in);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const auto& in = node.inputs[i];
      if (!in->requires_grad || g_in[i].empty()) continue;
      if (g_in[i].size() != in->data.size()) {
        throw DimensionError("backward of '" + node.op + "' returned gradient of length " +
                             std::to_string(g_in[i].size()) + " for input of shape " + shape_str(in->shape));
      }
      auto& acc = grads[in.get()];
      if (acc.empty()) {
        acc = std::move(g_in[i]);
      } else {
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g_in[i][k];
      }
    }
  }

  for (const auto& t : order) {
    const auto& impl = t.impl_;
    if (!impl->requires_grad) continue;
    auto found = grads.find(impl.get());
    if (found == grads.end()) continue;
    if (impl->grad.empty()) {
      impl->grad = found->second;
    } else {
      for (std::size_t k = 0; k < impl->grad.size(); ++k) impl->grad[k] += found->second[k];
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

Tensor detail_make_result(const std::string& op, const std::vector<Tensor>& inputs, Shape shape,
                          std::vector<double> data, detail::BackwardFn backward) {
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  auto impl = new_impl(std::move(shape), std::move(data), needs_grad);
  if (needs_grad) {
    auto node = std::make_shared<detail::Node>();
    node->op = op;
    for (const auto& in : inputs) node->inputs.push_back(in.impl_);
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

// ---- CustomOp -------------------------------------------------------------

CustomOp::CustomOp(std::string name, ForwardFn forward, BackwardFn backward)
    : name_(std::move(name)),
      forward_(std::make_shared<const ForwardFn>(std::move(forward))),
      backward_(std::make_shared<const BackwardFn>(std::move(backward))) {}

Tensor CustomOp::operator()(std::vector<Tensor> inputs) const {
  for (const auto& in : inputs) require_defined(in, name_.c_str());
  ForwardResult result = (*forward_)(inputs);
  auto backward = backward_;
  std::string name = name_;
  // The node keeps its inputs alive; capture detached views for the callback.
  std::vector<Tensor> views;
  views.reserve(inputs.size());
  for (const auto& in : inputs) views.push_back(in);
  return detail_make_result(
      name_, inputs, std::move(result.shape), std::move(result.data),
      [backward, name, views](std::span<const double> g_out, std::span<const double> out,
                              std::vector<std::vector<double>>& g_in) {
        auto user = (*backward)(g_out, views, out);
        if (user.size() != g_in.size()) {
          throw DimensionError("custom op '" + name + "' returned " + std::to_string(user.size()) +
                               " gradients for " + std::to_string(g_in.size()) + " inputs");
        }
        for (std::size_t i = 0; i < g_in.size(); ++i) {
          if (g_in[i].empty() || user[i].empty()) continue;
          if (user[i].size() != g_in[i].size()) {
            throw DimensionError("custom op '" + name + "' gradient " + std::to_string(i) + " has length " +
                                 std::to_string(user[i].size()) + ", expected " + std::to_string(g_in[i].size()));
          }
          g_in[i] = std::move(user[i]);
        }
      });
}

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return detail_make_result("matmul", {a, b}, {m, n}, std::move(out),
                            [a, b, m, k, n](std::span<const double> g, std::span<const double>,
                                            std::vector<std::vector<double>>& gi) {
                              auto A = a.data();
                              auto B = b.data();
                              if (!gi[0].empty()) {  // dA = g * B^T
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t p = 0; p < k; ++p) {
                                    double s = 0.0;
                                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
                                    gi[0][i * k + p] = s;
                                  }
                              }
                              if (!gi[1].empty()) {  // dB = A^T * g
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t p = 0; p < k; ++p) {
                                    const double av = A[i * k + p];
                                    for (std::size_t j = 0; j < n; ++j) gi[1][p * n + j] += av * g[i * n + j];
                                  }
                              }
                            });
}

namespace {

// Resolves scalar broadcasting for a binary elementwise op.
struct Broadcast {
  Shape shape;
  std::size_t n;
  bool a_scalar;
  bool b_scalar;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return {a.shape(), a.numel(), false, false};
  if (b.numel() == 1) return {a.shape(), a.numel(), false, true};
  if (a.numel() == 1) return {b.shape(), b.numel(), true, false};
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

// Accumulates per-element gradients into a possibly-broadcast input.
inline void scatter(std::vector<double>& dst, bool scalar, std::size_t i, double v) {
  if (scalar) {
    dst[0] += v;
  } else {
    dst[i] += v;
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "add");
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(bc.n);
  for (std::size_t i = 0; i < bc.n; ++i) out[i] = A[bc.a_scalar ? 0 : i] + B[bc.b_scalar ? 0 : i];
  return detail_make_result("add", {a, b}, bc.shape, std::move(out),
                            [bc](std::span<const double> g, std::span<const double>, auto& gi) {
                              for (std::size_t i = 0; i < bc.n; ++i) {
                                if (!gi[0].empty()) scatter(gi[0], bc.a_scalar, i, g[i]);
                                if (!gi[1].empty()) scatter(gi[1], bc.b_scalar, i, g[i]);
                              }
                            });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "sub");
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(bc.n);
  for (std::size_t i = 0; i < bc.n; ++i) out[i] = A[bc.a_scalar ? 0 : i] - B[bc.b_scalar ? 0 : i];
  return detail_make_result("sub", {a, b}, bc.shape, std::move(out),
                            [bc](std::span<const double> g, std::span<const double>, auto& gi) {
                              for (std::size_t i = 0; i < bc.n; ++i) {
                                if (!gi[0].empty()) scatter(gi[0], bc.a_scalar, i, g[i]);
                                if (!gi[1].empty()) scatter(gi[1], bc.b_scalar, i, -g[i]);
                              }
                            });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "mul");
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(bc.n);
  for (std::size_t i = 0; i < bc.n; ++i) out[i] = A[bc.a_scalar ? 0 : i] * B[bc.b_scalar ? 0 : i];
  return detail_make_result("mul", {a, b}, bc.shape, std::move(out),
                            [a, b, bc](std::span<const double> g, std::span<const double>, auto& gi) {
                              auto A = a.data();
                              auto B = b.data();
                              for (std::size_t i = 0; i < bc.n; ++i) {
                                const double av = A[bc.a_scalar ? 0 : i];
                                const double bv = B[bc.b_scalar ? 0 : i];
                                if (!gi[0].empty()) scatter(gi[0], bc.a_scalar, i, g[i] * bv);
                                if (!gi[1].empty()) scatter(gi[1], bc.b_scalar, i, g[i] * av);
                              }
                            });
}

Tensor add(const Tensor& a, double c) {
  require_defined(a, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += c;
  return detail_make_result("add_scalar", {a}, a.shape(), std::move(out),
                            [](std::span<const double> g, std::span<const double>, auto& gi) {
                              std::copy(g.begin(), g.end(), gi[0].begin());
                            });
}

Tensor mul(const Tensor& a, double c) {
  require_defined(a, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  return detail_make_result("mul_scalar", {a}, a.shape(), std::move(out),
                            [c](std::span<const double> g, std::span<const double>, auto& gi) {
                              for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] = c * g[i];
                            });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

namespace {

template <typename Select>
Tensor select_op(const char* name, const Tensor& x, const Tensor& bound, Select take_bound) {
  auto bc = broadcast(x, bound, name);
  if (bc.a_scalar && !bc.b_scalar) {
    throw DimensionError(std::string(name) + ": the variable operand cannot be broadcast");
  }
  auto X = x.data();
  auto L = bound.data();
  std::vector<double> out(bc.n);
  for (std::size_t i = 0; i < bc.n; ++i) {
    const double lv = L[bc.b_scalar ? 0 : i];
    out[i] = take_bound(X[i], lv) ? lv : X[i];
  }
  return detail_make_result(name, {x, bound}, bc.shape, std::move(out),
                            [x, bound, bc, take_bound](std::span<const double> g, std::span<const double>,
                                                       auto& gi) {
                              auto X = x.data();
                              auto L = bound.data();
                              for (std::size_t i = 0; i < bc.n; ++i) {
                                const bool to_bound = take_bound(X[i], L[bc.b_scalar ? 0 : i]);
                                if (to_bound) {
                                  if (!gi[1].empty()) scatter(gi[1], bc.b_scalar, i, g[i]);
                                } else if (!gi[0].empty()) {
                                  gi[0][i] += g[i];
                                }
                              }
                            });
}

}  // namespace

Tensor maximum(const Tensor& x, const Tensor& bound) {
  return select_op("maximum", x, bound, [](double xv, double bv) { return bv > xv; });
}

Tensor minimum(const Tensor& x, const Tensor& bound) {
  return select_op("minimum", x, bound, [](double xv, double bv) { return bv < xv; });
}

Tensor max_with_scalar(const Tensor& x, double c) {
  require_defined(x, "max_with_scalar");
  auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] < c ? c : X[i];
  return detail_make_result("max_with_scalar", {x}, x.shape(), std::move(out),
                            [x, c](std::span<const double> g, std::span<const double>, auto& gi) {
                              auto X = x.data();
                              for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] = X[i] < c ? 0.0 : g[i];
                            });
}

Tensor min_with_scalar(const Tensor& x, double c) {
  require_defined(x, "min_with_scalar");
  auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] > c ? c : X[i];
  return detail_make_result("min_with_scalar", {x}, x.shape(), std::move(out),
                            [x, c](std::span<const double> g, std::span<const double>, auto& gi) {
                              auto X = x.data();
                              for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] = X[i] > c ? 0.0 : g[i];
                            });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) {
    if (!(A[i] > 0.0)) throw NumericError("log of non-positive value " + std::to_string(A[i]), i);
    out[i] = std::log(A[i]);
  }
  return detail_make_result("log", {a}, a.shape(), std::move(out),
                            [a](std::span<const double> g, std::span<const double>, auto& gi) {
                              auto A = a.data();
                              for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] = g[i] / A[i];
                            });
}

Tensor exp(const Tensor& a) {
  require_defined(a, "exp");
  auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) {
    out[i] = std::exp(A[i]);
    if (!std::isfinite(out[i])) throw NumericError("exp overflow for value " + std::to_string(A[i]), i);
  }
  return detail_make_result("exp", {a}, a.shape(), std::move(out),
                            [](std::span<const double> g, std::span<const double> out, auto& gi) {
                              for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] = g[i] * out[i];
                            });
}

Tensor relu(const Tensor& a) { return max_with_scalar(a, 0.0); }

Tensor softplus(const Tensor& a) {
  require_defined(a, "softplus");
  auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = std::max(A[i], 0.0) + std::log1p(std::exp(-std::abs(A[i])));
  check_finite(out, "softplus");
  return detail_make_result("softplus", {a}, a.shape(), std::move(out),
                            [a](std::span<const double> g, std::span<const double>, auto& gi) {
                              auto A = a.data();
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                const double sig = A[i] >= 0 ? 1.0 / (1.0 + std::exp(-A[i]))
                                                             : std::exp(A[i]) / (1.0 + std::exp(A[i]));
                                gi[0][i] = g[i] * sig;
                              }
                            });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail_make_result("sum", {a}, {1}, {s}, [](std::span<const double> g, std::span<const double>, auto& gi) {
    std::fill(gi[0].begin(), gi[0].end(), g[0]);
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail_make_result("reshape", {a}, std::move(shape), std::move(out),
                            [](std::span<const double> g, std::span<const double>, auto& gi) {
                              std::copy(g.begin(), g.end(), gi[0].begin());
                            });
}

}  // namespace gdnsq
