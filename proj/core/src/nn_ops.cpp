#include "gdnsq/nn_ops.hpp"

#include <algorithm>
#include <cmath>

#include "gdnsq/errors.hpp"

namespace gdnsq {

Tensor apply_activation(const Tensor& x, Activation act) { return act == Activation::relu ? relu(x) : x; }

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.numel() != x.dim(1)) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  auto X = x.data();
  auto B = bias.data();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + j] + B[j];
  return detail_make_result("add_bias", {x, bias}, x.shape(), std::move(out),
                            [n, c](std::span<const double> g, std::span<const double>, auto& gi) {
                              if (!gi[0].empty()) std::copy(g.begin(), g.end(), gi[0].begin());
                              if (!gi[1].empty()) {
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < c; ++j) gi[1][j] += g[i * c + j];
                              }
                            });
}

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0 || in + 2 * padding < kernel) {
    throw DimensionError("convolution window does not fit the input");
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4) throw DimensionError("im2col expects NHWC input, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t OH = conv_out_size(H, kernel, stride, padding);
  const std::size_t OW = conv_out_size(W, kernel, stride, padding);
  const std::size_t cols = kernel * kernel * C;
  // source index per output cell, or -1 for padding
  auto index_of = [=](std::size_t b, std::size_t oy, std::size_t ox, std::size_t ky, std::size_t kx,
                      std::size_t c) -> std::ptrdiff_t {
    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
    const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
    if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) || ix >= static_cast<std::ptrdiff_t>(W)) return -1;
    return static_cast<std::ptrdiff_t>(((b * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * C + c);
  };
  auto X = x.data();
  std::vector<double> out(B * OH * OW * cols, 0.0);
  std::size_t row = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox, ++row) {
        std::size_t col = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx)
            for (std::size_t c = 0; c < C; ++c, ++col) {
              const auto src = index_of(b, oy, ox, ky, kx, c);
              if (src >= 0) out[row * cols + col] = X[static_cast<std::size_t>(src)];
            }
      }
  return detail_make_result(
      "im2col", {x}, {B * OH * OW, cols}, std::move(out),
      [=](std::span<const double> g, std::span<const double>, auto& gi) {
        std::size_t row = 0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox, ++row) {
              std::size_t col = 0;
              for (std::size_t ky = 0; ky < kernel; ++ky)
                for (std::size_t kx = 0; kx < kernel; ++kx)
                  for (std::size_t c = 0; c < C; ++c, ++col) {
                    const auto src = index_of(b, oy, ox, ky, kx, c);
                    if (src >= 0) gi[0][static_cast<std::size_t>(src)] += g[row * cols + col];
                  }
            }
      });
}

namespace {

void check_bn_shapes(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 2 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1)) {
    throw DimensionError("batch_norm: input " + shape_str(x.shape()) + " with affine " + shape_str(gamma.shape()));
  }
}

}  // namespace

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, BatchStats* stats) {
  check_bn_shapes(x, gamma, beta);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (n < 2) throw DimensionError("batch_norm_train needs at least two rows");
  auto X = x.data();
  auto G = gamma.data();
  auto Bt = beta.data();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mu[j] += X[i * c + j];
  for (auto& m : mu) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = X[i * c + j] - mu[j];
      var[j] += d * d;
    }
  for (auto& v : var) v /= static_cast<double>(n);
  std::vector<double> inv_std(c), xhat(n * c), out(n * c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (X[i * c + j] - mu[j]) * inv_std[j];
      out[i * c + j] = G[j] * xhat[i * c + j] + Bt[j];
    }
  if (stats) *stats = {mu, var};
  return detail_make_result(
      "batch_norm_train", {x, gamma, beta}, x.shape(), std::move(out),
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c](std::span<const double> g,
                                                                          std::span<const double>, auto& gi) {
        auto G = gamma.data();
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            sum_g[j] += g[i * c + j];
            sum_gx[j] += g[i * c + j] * xhat[i * c + j];
          }
        if (!gi[0].empty()) {
          const double dn = static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              gi[0][i * c + j] = G[j] * inv_std[j] / dn *
                                 (dn * g[i * c + j] - sum_g[j] - xhat[i * c + j] * sum_gx[j]);
            }
        }
        if (!gi[1].empty()) gi[1] = sum_gx;
        if (!gi[2].empty()) gi[2] = sum_g;
      });
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const std::vector<double>& mean,
                       const std::vector<double>& var, double eps) {
  check_bn_shapes(x, gamma, beta);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (mean.size() != c || var.size() != c) throw DimensionError("batch_norm_eval: statistics size mismatch");
  auto X = x.data();
  auto G = gamma.data();
  auto Bt = beta.data();
  std::vector<double> inv_std(c), xhat(n * c), out(n * c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (X[i * c + j] - mean[j]) * inv_std[j];
      out[i * c + j] = G[j] * xhat[i * c + j] + Bt[j];
    }
  return detail_make_result(
      "batch_norm_eval", {x, gamma, beta}, x.shape(), std::move(out),
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c](std::span<const double> g,
                                                                          std::span<const double>, auto& gi) {
        auto G = gamma.data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double gv = g[i * c + j];
            if (!gi[0].empty()) gi[0][i * c + j] = gv * G[j] * inv_std[j];
            if (!gi[1].empty()) gi[1][j] += gv * xhat[i * c + j];
            if (!gi[2].empty()) gi[2][j] += gv;
          }
      });
}

Tensor log_softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("log_softmax expects [N, C], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto Z = logits.data();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = Z.data() + i * c;
    const double m = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = z[j] - lse;
  }
  return detail_make_result("log_softmax", {logits}, logits.shape(), std::move(out),
                            [n, c](std::span<const double> g, std::span<const double> out, auto& gi) {
                              for (std::size_t i = 0; i < n; ++i) {
                                double gs = 0.0;
                                for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                                for (std::size_t j = 0; j < c; ++j)
                                  gi[0][i * c + j] = g[i * c + j] - std::exp(out[i * c + j]) * gs;
                              }
                            });
}

std::vector<double> softmax_rows(std::span<const double> logits, std::size_t cols) {
  if (cols == 0 || logits.size() % cols != 0) throw DimensionError("softmax_rows: bad column count");
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < logits.size() / cols; ++r) {
    const double* z = logits.data() + r * cols;
    const double m = *std::max_element(z, z + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += (out[r * cols + j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] /= s;
  }
  return out;
}

std::vector<std::size_t> argmax_rows(std::span<const double> values, std::size_t cols) {
  std::vector<std::size_t> out(values.size() / cols);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* row = values.data() + r * cols;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
  }
  return out;
}

}  // namespace gdnsq
