#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gdnsq/quantizer.hpp"
#include "gdnsq/tensor.hpp"

namespace gdnsq {

// Probabilities below this are raised to it (and the vector renormalized)
// before any logarithm is taken.
inline constexpr double kProbabilityFloor = 1e-12;

// Discrete distribution, floored and normalized on construction.
class Distribution {
 public:
  explicit Distribution(std::vector<double> probs);

  std::span<const double> probs() const { return probs_; }
  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }

 private:
  std::vector<double> probs_;
};

// Kullback-Leibler divergence in nats.
double kl(const Distribution& p, const Distribution& q);
// Jeffreys divergence kl(p, q) + kl(q, p).
double jeffreys(const Distribution& p, const Distribution& q);

enum class DistillLoss {
  jeffreys,       // symmetric KL between student and teacher softmax outputs
  cross_entropy,  // H(teacher, student)
  hard_label_ce,  // cross-entropy against ground-truth labels (no distillation)
};

std::string to_string(DistillLoss loss);
DistillLoss parse_distill_loss(std::string_view text);

// Batch mean of jeffreys(softmax(student), teacher) over logits [B, C].
// `teacher_probs` is a constant [B, C] row-stochastic matrix.
Tensor jeffreys_distillation(const Tensor& student_logits, std::span<const double> teacher_probs);
Tensor soft_cross_entropy(const Tensor& student_logits, std::span<const double> teacher_probs);
Tensor hard_cross_entropy(const Tensor& student_logits, std::span<const std::size_t> labels);

struct BitTargets {
  double weights = 4.0;
  double activations = 4.0;
};

// P = mean_w max(0, w - w*) + mean_a max(0, a - a*), per-group means.
Tensor potential(const std::vector<Tensor>& weight_bits, const std::vector<Tensor>& activation_bits,
                 const BitTargets& targets);
double potential_value(std::span<const double> weight_bits, std::span<const double> activation_bits,
                       const BitTargets& targets);

// Penalty schedule shared across batches.
struct LossState {
  std::uint64_t step = 0;  // batch index n
  double t_q = 0.0;        // initial_t_q + lambda_n * n
  double t_r = 1.0;
  double c_r = 1.0;  // running mean of past distillation distances; 1 before any batch
  double c_r_sum = 0.0;
  double initial_t_q = 0.0;
  BitTargets targets;
};

// Advances n, then sets t_q = initial_t_q + lr * n and folds batch_d into c_r.
void update_schedule(LossState& state, double lr, double batch_d);

struct LossTerms {
  Tensor total;
  Tensor distance;
  Tensor potential;
};

// t_q * c_r * P + t_r * d. `teacher_logits` and `labels` may be empty when
// the chosen distance does not need them.
LossTerms total_loss(const Tensor& student_logits, std::span<const double> teacher_logits,
                     std::span<const std::size_t> labels, const std::vector<const FakeQuantizer*>& weight_sites,
                     const std::vector<const FakeQuantizer*>& activation_sites, const LossState& state,
                     DistillLoss kind = DistillLoss::jeffreys);

}  // namespace gdnsq
