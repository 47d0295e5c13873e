#include "gdnsq/optimizer.hpp"

#include <cmath>

#include "gdnsq/errors.hpp"

namespace gdnsq {

double radam_rho_inf(double beta2) { return 2.0 / (1.0 - beta2) - 1.0; }

double radam_rho(double beta2, std::uint64_t t) {
  const double bt = std::pow(beta2, static_cast<double>(t));
  if (bt == 1.0) return 0.0;
  return radam_rho_inf(beta2) - 2.0 * static_cast<double>(t) * bt / (1.0 - bt);
}

void radam_step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads,
                RAdamState& state, double lr) {
  if (params.size() != grads.size()) throw DimensionError("radam_step: parameter/gradient count mismatch");
  for (std::size_t p = 0; p < grads.size(); ++p) {
    if (grads[p].size() != params[p].size()) {
      throw DimensionError("radam_step: gradient " + std::to_string(p) + " has the wrong size");
    }
    for (std::size_t i = 0; i < grads[p].size(); ++i) {
      if (!std::isfinite(grads[p][i])) {
        throw NumericError("radam_step rejected non-finite gradient in parameter " + std::to_string(p), i);
      }
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("radam_step: state does not match parameters");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double b1 = state.beta1, b2 = state.beta2;
  const double bias1 = 1.0 - std::pow(b1, t);
  const double bias2 = 1.0 - std::pow(b2, t);
  const double rho_inf = radam_rho_inf(b2);
  const double rho = radam_rho(b2, state.step);
  const bool rectify = rho > 4.0;
  double r = 0.0;
  if (rectify) {
    r = std::sqrt((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
  }

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double g = grads[p][i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double m_hat = m[i] / bias1;
      if (rectify) {
        const double v_hat = std::sqrt(v[i] / bias2);
        params[p][i] -= lr * r * m_hat / (v_hat + state.eps);
      } else {
        params[p][i] -= lr * m_hat;
      }
    }
  }
}

RAdam::RAdam(std::vector<NamedParameter> params, double beta1, double beta2, double eps) : params_(std::move(params)) {
  state_.beta1 = beta1;
  state_.beta2 = beta2;
  state_.eps = eps;
}

void RAdam::step(double lr) {
  std::vector<std::span<double>> values;
  std::vector<std::vector<double>> zero_grads;
  std::vector<std::span<const double>> grads;
  values.reserve(params_.size());
  grads.reserve(params_.size());
  zero_grads.reserve(params_.size());
  for (auto& p : params_) {
    values.push_back(p.tensor.mutable_data());
    if (p.tensor.has_grad()) {
      grads.push_back(p.tensor.grad());
    } else {
      zero_grads.emplace_back(p.tensor.numel(), 0.0);
      grads.push_back(zero_grads.back());
    }
  }
  radam_step(values, grads, state_, lr);
}

void RAdam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

LrPolicy make_lr_policy(double initial, double alpha) {
  if (!(initial > 0.0)) throw DomainError("learning rate must be positive");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw DomainError("annealing factor must lie in (0, 1]");
  LrPolicy p;
  p.initial = initial;
  p.current = initial;
  p.alpha = alpha;
  return p;
}

double lr_next(LrPolicy& policy, bool audit_reached_target) {
  if (audit_reached_target) policy.phase = LrPhase::annealing;
  if (policy.phase == LrPhase::annealing) policy.current *= policy.alpha;
  return policy.current;
}

}  // namespace gdnsq
