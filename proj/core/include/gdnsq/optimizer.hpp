#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gdnsq/tensor.hpp"

namespace gdnsq {

struct RAdamState {
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<std::vector<double>> m;  // first moments, one per parameter
  std::vector<std::vector<double>> v;  // second moments, one per parameter
};

// Length of the approximated simple moving average, rho_inf = 2 / (1 - beta2) - 1.
double radam_rho_inf(double beta2);
// rho_t = rho_inf - 2 t beta2^t / (1 - beta2^t).
double radam_rho(double beta2, std::uint64_t t);

// One rectified-Adam update in place. When rho_t <= 4 the variance is not
// tractable and the update falls back to bias-corrected momentum SGD.
// Throws NumericError (leaving params and state untouched) if any gradient
// is non-finite.
void radam_step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads,
                RAdamState& state, double lr);

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// RAdam over a fixed list of leaf tensors; reads their accumulated grads.
class RAdam {
 public:
  explicit RAdam(std::vector<NamedParameter> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(double lr);
  void zero_grad();

  const std::vector<NamedParameter>& parameters() const { return params_; }
  RAdamState& state() { return state_; }
  const RAdamState& state() const { return state_; }

 private:
  std::vector<NamedParameter> params_;
  RAdamState state_;
};

enum class LrPhase { constant, annealing };

// Constant learning rate until the bit-width target is reached on audit, then
// lambda_{n+1} = alpha * lambda_n per batch. Never switches back.
struct LrPolicy {
  LrPhase phase = LrPhase::constant;
  double initial = 0.01;
  double alpha = 0.9985;
  double current = 0.01;
};

LrPolicy make_lr_policy(double initial, double alpha = 0.9985);

// Advances the policy by one batch and returns the new learning rate.
double lr_next(LrPolicy& policy, bool audit_reached_target);

}  // namespace gdnsq
