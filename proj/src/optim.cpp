// SPDX-License-Identifier: Apache-2.0

#include "cgsd/optim.hpp"

#include <cmath>
#include <string>

#include "cgsd/errors.hpp"

namespace cgsd {

namespace {

void prepare(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state, double lr) {
  if (params.size() != grads.size()) {
    throw ContractError("optimizer: " + std::to_string(params.size()) + " params but " +
                        std::to_string(grads.size()) + " grads");
  }
  if (!(lr > 0)) throw ContractError("optimizer: learning rate must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(grads[i])) {
      throw ContractError("optimizer: grad shape " + grads[i].shape_string() + " does not match param " +
                          params[i]->shape_string());
    }
  }
  if (state.m.empty()) {
    for (const Matrix* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  } else if (state.m.size() != params.size()) {
    throw ContractError("optimizer: parameter list changed between steps");
  }
  ++state.step;
}

void update_moments(const Matrix& g, Matrix& m, Matrix& v, const AdamState& s) {
  for (std::size_t j = 0; j < g.size(); ++j) {
    m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
    v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
  }
}

}  // namespace

void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state, double lr) {
  prepare(params, grads, state, lr);
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    update_moments(grads[i], m, v, state);
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

double radam_rho(long step, double beta2) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double t = static_cast<double>(step);
  const double b2t = std::pow(beta2, t);
  return rho_inf - 2.0 * t * b2t / (1.0 - b2t);
}

void radam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state, double lr) {
  prepare(params, grads, state, lr);
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const double rho_inf = 2.0 / (1.0 - state.beta2) - 1.0;
  const double rho = radam_rho(state.step, state.beta2);
  const bool rectified = rho > 4.0;
  const double r = rectified ? std::sqrt(((rho - 4.0) * (rho - 2.0) * rho_inf) /
                                         ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                             : 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    update_moments(grads[i], m, v, state);
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double m_hat = m[j] / bc1;
      if (rectified) {
        const double v_hat = v[j] / bc2;
        p[j] -= lr * r * m_hat / (std::sqrt(v_hat) + state.eps);
      } else {
        p[j] -= lr * m_hat;
      }
    }
  }
}

void validate(const LrPlan& plan) {
  if (!(plan.min_lr > 0) || !(plan.min_lr <= plan.base_lr)) {
    throw ConfigError("lr plan: need 0 < min_lr <= base_lr");
  }
  if (!(plan.warmup_start_lr > 0)) throw ConfigError("lr plan: warmup start lr must be positive");
  if (plan.warmup_epochs < 0 || plan.warmup_epochs >= plan.total_epochs) {
    throw ConfigError("lr plan: need 0 <= warmup_epochs < total_epochs");
  }
}

double lr_at(int epoch, const LrPlan& plan) {
  if (epoch < 0 || epoch >= plan.total_epochs) {
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(plan.total_epochs) + ")");
  }
  if (epoch < plan.warmup_epochs) {
    const double frac = static_cast<double>(epoch) / plan.warmup_epochs;
    return plan.warmup_start_lr + (plan.base_lr - plan.warmup_start_lr) * frac;
  }
  const int span = plan.total_epochs - 1 - plan.warmup_epochs;
  if (span <= 0) return plan.min_lr;
  if (epoch == plan.total_epochs - 1) return plan.min_lr;
  const double progress = static_cast<double>(epoch - plan.warmup_epochs) / span;
  return plan.min_lr + 0.5 * (plan.base_lr - plan.min_lr) * (1.0 + std::cos(M_PI * progress));
}

EmaState EmaState::track(std::span<const Matrix* const> params, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError("ema: decay must lie in [0, 1]");
  EmaState ema;
  ema.mu = mu;
  for (const Matrix* p : params) ema.shadow.push_back(*p);
  return ema;
}

void ema_update(EmaState& ema, std::span<const Matrix* const> params) { ema_update(ema, params, ema.mu); }

void ema_update(EmaState& ema, std::span<const Matrix* const> params, double mu) {
  if (params.size() != ema.shadow.size()) throw ContractError("ema: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& s = ema.shadow[i];
    const Matrix& p = *params[i];
    if (!s.same_shape(p)) throw ContractError("ema: shape mismatch " + s.shape_string() + " vs " + p.shape_string());
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = mu * s[j] + (1.0 - mu) * p[j];
  }
}

double clip_grad_norm(std::span<Matrix> grads, double max_norm) {
  if (!(max_norm > 0)) throw ConfigError("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const Matrix& g : grads)
    for (double v : g.values()) sq += v * v;
  const double total = std::sqrt(sq);
  if (total > max_norm) {
    const double factor = max_norm / total;
    for (Matrix& g : grads)
      for (double& v : g.values()) v *= factor;
  }
  return total;
}

}  // namespace cgsd
