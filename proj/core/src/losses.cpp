#include "gdnsq/losses.hpp"

#include <algorithm>
#include <cmath>

#include "gdnsq/errors.hpp"
#include "gdnsq/nn_ops.hpp"

namespace gdnsq {

namespace {

std::vector<double> floor_and_normalize(std::vector<double> p) {
  double total = 0.0;
  for (auto& v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("probabilities must be finite and non-negative");
    v = std::max(v, kProbabilityFloor);
    total += v;
  }
  for (auto& v : p) v /= total;
  return p;
}

void check_logits(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("logits must be [B, C], got " + shape_str(logits.shape()));
  const std::size_t c = logits.dim(1);
  auto z = logits.data();
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(z[i])) throw NumericError("non-finite student logit in batch row", i / c);
  }
}

// Floored softmax of one logits row.
void floored_softmax(const double* z, std::size_t c, double* out) {
  const double m = *std::max_element(z, z + c);
  double s = 0.0;
  for (std::size_t j = 0; j < c; ++j) s += (out[j] = std::exp(z[j] - m));
  double t = 0.0;
  for (std::size_t j = 0; j < c; ++j) t += (out[j] = std::max(out[j] / s, kProbabilityFloor));
  for (std::size_t j = 0; j < c; ++j) out[j] /= t;
}

std::vector<double> floored_rows(std::span<const double> probs, std::size_t c) {
  std::vector<double> out(probs.begin(), probs.end());
  for (std::size_t r = 0; r < out.size() / c; ++r) {
    double t = 0.0;
    for (std::size_t j = 0; j < c; ++j) t += (out[r * c + j] = std::max(out[r * c + j], kProbabilityFloor));
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= t;
  }
  return out;
}

}  // namespace

Distribution::Distribution(std::vector<double> probs) {
  if (probs.empty()) throw DomainError("empty distribution");
  probs_ = floor_and_normalize(std::move(probs));
}

double kl(const Distribution& p, const Distribution& q) {
  if (p.size() != q.size()) {
    throw DimensionError("kl: support sizes differ (" + std::to_string(p.size()) + " vs " + std::to_string(q.size()) + ")");
  }
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) d += p[i] * std::log(p[i] / q[i]);
  return std::max(d, 0.0);
}

double jeffreys(const Distribution& p, const Distribution& q) { return kl(p, q) + kl(q, p); }

std::string to_string(DistillLoss loss) {
  switch (loss) {
    case DistillLoss::jeffreys:
      return "jeffreys";
    case DistillLoss::cross_entropy:
      return "cross_entropy";
    case DistillLoss::hard_label_ce:
      return "hard_label_ce";
  }
  return "unknown";
}

DistillLoss parse_distill_loss(std::string_view text) {
  if (text == "jeffreys") return DistillLoss::jeffreys;
  if (text == "cross_entropy") return DistillLoss::cross_entropy;
  if (text == "hard_label_ce") return DistillLoss::hard_label_ce;
  throw DomainError("unknown distillation loss '" + std::string(text) + "'");
}

Tensor jeffreys_distillation(const Tensor& student_logits, std::span<const double> teacher_probs) {
  check_logits(student_logits);
  const std::size_t b = student_logits.dim(0), c = student_logits.dim(1);
  if (teacher_probs.size() != b * c) throw DimensionError("jeffreys: teacher/student batch mismatch");
  auto q = floored_rows(teacher_probs, c);
  std::vector<double> p(b * c);
  auto z = student_logits.data();
  for (std::size_t r = 0; r < b; ++r) floored_softmax(z.data() + r * c, c, p.data() + r * c);
  double total = 0.0;
  for (std::size_t i = 0; i < b * c; ++i) total += (p[i] - q[i]) * (std::log(p[i]) - std::log(q[i]));
  total /= static_cast<double>(b);

  CustomOp op(
      "jeffreys_distillation",
      [total](std::span<const Tensor>) { return CustomOp::ForwardResult{{1}, {total}}; },
      [p, q, b, c](std::span<const double> g, std::span<const Tensor>, std::span<const double>) {
        // dJ/dp_j = log(p_j / q_j) + 1 - q_j / p_j, then through the softmax Jacobian
        std::vector<double> dz(b * c);
        const double scale = g[0] / static_cast<double>(b);
        for (std::size_t r = 0; r < b; ++r) {
          const double* pr = p.data() + r * c;
          const double* qr = q.data() + r * c;
          double dot = 0.0;
          std::vector<double> gp(c);
          for (std::size_t j = 0; j < c; ++j) {
            gp[j] = std::log(pr[j] / qr[j]) + 1.0 - qr[j] / pr[j];
            dot += pr[j] * gp[j];
          }
          for (std::size_t j = 0; j < c; ++j) dz[r * c + j] = scale * pr[j] * (gp[j] - dot);
        }
        return std::vector<std::vector<double>>{std::move(dz)};
      });
  return op({student_logits});
}

Tensor soft_cross_entropy(const Tensor& student_logits, std::span<const double> teacher_probs) {
  check_logits(student_logits);
  const std::size_t b = student_logits.dim(0), c = student_logits.dim(1);
  if (teacher_probs.size() != b * c) throw DimensionError("cross_entropy: teacher/student batch mismatch");
  auto q = floored_rows(teacher_probs, c);
  Tensor target = Tensor::from(std::move(q), {b, c});
  return mul(sum(mul(log_softmax(student_logits), target)), -1.0 / static_cast<double>(b));
}

Tensor hard_cross_entropy(const Tensor& student_logits, std::span<const std::size_t> labels) {
  check_logits(student_logits);
  const std::size_t b = student_logits.dim(0), c = student_logits.dim(1);
  if (labels.size() != b) throw DimensionError("hard_cross_entropy: label count mismatch");
  std::vector<double> onehot(b * c, 0.0);
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= c) throw DomainError("label " + std::to_string(labels[r]) + " out of range");
    onehot[r * c + labels[r]] = 1.0;
  }
  Tensor target = Tensor::from(std::move(onehot), {b, c});
  return mul(sum(mul(log_softmax(student_logits), target)), -1.0 / static_cast<double>(b));
}

Tensor potential(const std::vector<Tensor>& weight_bits, const std::vector<Tensor>& activation_bits,
                 const BitTargets& targets) {
  if (weight_bits.empty() || activation_bits.empty()) throw DomainError("potential needs at least one site per group");
  auto group = [](const std::vector<Tensor>& bits, double target) {
    Tensor acc = relu(add(bits[0], -target));
    for (std::size_t i = 1; i < bits.size(); ++i) acc = add(acc, relu(add(bits[i], -target)));
    return mul(acc, 1.0 / static_cast<double>(bits.size()));
  };
  return add(group(weight_bits, targets.weights), group(activation_bits, targets.activations));
}

double potential_value(std::span<const double> weight_bits, std::span<const double> activation_bits,
                       const BitTargets& targets) {
  if (weight_bits.empty() || activation_bits.empty()) throw DomainError("potential needs at least one site per group");
  auto group = [](std::span<const double> bits, double target) {
    double acc = 0.0;
    for (double w : bits) acc += std::max(0.0, w - target);
    return acc / static_cast<double>(bits.size());
  };
  return group(weight_bits, targets.weights) + group(activation_bits, targets.activations);
}

void update_schedule(LossState& state, double lr, double batch_d) {
  state.step += 1;
  state.t_q = state.initial_t_q + lr * static_cast<double>(state.step);
  state.t_r = 1.0;
  state.c_r_sum += batch_d;
  state.c_r = state.c_r_sum / static_cast<double>(state.step);
}

LossTerms total_loss(const Tensor& student_logits, std::span<const double> teacher_logits,
                     std::span<const std::size_t> labels, const std::vector<const FakeQuantizer*>& weight_sites,
                     const std::vector<const FakeQuantizer*>& activation_sites, const LossState& state,
                     DistillLoss kind) {
  check_logits(student_logits);
  const std::size_t c = student_logits.dim(1);
  Tensor d;
  if (kind == DistillLoss::hard_label_ce) {
    d = hard_cross_entropy(student_logits, labels);
  } else {
    for (std::size_t i = 0; i < teacher_logits.size(); ++i) {
      if (!std::isfinite(teacher_logits[i])) throw NumericError("non-finite teacher logit in batch row", i / c);
    }
    auto teacher = softmax_rows(teacher_logits, c);
    d = kind == DistillLoss::jeffreys ? jeffreys_distillation(student_logits, teacher)
                                      : soft_cross_entropy(student_logits, teacher);
  }
  std::vector<Tensor> wb, ab;
  for (const auto* q : weight_sites) wb.push_back(q->bitwidth());
  for (const auto* q : activation_sites) ab.push_back(q->bitwidth());
  Tensor p = potential(wb, ab, state.targets);
  Tensor total = add(mul(p, state.t_q * state.c_r), mul(d, state.t_r));
  return {total, d, p};
}

}  // namespace gdnsq
