#pragma once

#include <vector>

#include "gdnsq/tensor.hpp"

namespace gdnsq {

enum class Activation { identity, relu };

Tensor apply_activation(const Tensor& x, Activation act);

// x [N, C] + bias [C], broadcast along rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// Unfolds NHWC input [B, H, W, C] into patches [B*OH*OW, K*K*C]; the column
// order is (ky, kx, c). Zero padding.
Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding);

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

// Per-column normalization of x [N, C] with batch statistics.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, BatchStats* stats);

// Per-column normalization with fixed statistics.
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const std::vector<double>& mean,
                       const std::vector<double>& var, double eps);

// Row-wise log-softmax of logits [N, C].
Tensor log_softmax(const Tensor& logits);

// Row-wise softmax of plain values, used for teacher targets and evaluation.
std::vector<double> softmax_rows(std::span<const double> logits, std::size_t cols);

// Index of the largest entry per row.
std::vector<std::size_t> argmax_rows(std::span<const double> values, std::size_t cols);

}  // namespace gdnsq
