// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "cgsd/numkit.hpp"

namespace cgsd {

/// Moment accumulators for Adam and RAdam. `m` and `v` are sized on the
/// first update to mirror the parameter list.
struct AdamState {
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state, double lr);

/// Rectified Adam. Falls back to a bias-corrected momentum step while the
/// variance estimate is not yet tractable (ρ_t ≤ 4).
void radam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state, double lr);

/// ρ_t of RAdam; exposed for tests and logging.
double radam_rho(long step, double beta2);

struct LrPlan {
  double base_lr = 1e-4;
  double min_lr = 1e-5;
  double warmup_start_lr = 1e-5;
  int warmup_epochs = 0;
  int total_epochs = 1;
};

void validate(const LrPlan& plan);

/// Linear warm-up to base_lr, then cosine annealing that lands exactly on
/// min_lr at the last epoch.
double lr_at(int epoch, const LrPlan& plan);

struct EmaState {
  std::vector<Matrix> shadow;
  double mu = 0.9999;

  static EmaState track(std::span<const Matrix* const> params, double mu);
};

void ema_update(EmaState& ema, std::span<const Matrix* const> params);
/// Same update with an explicit decay for this step only.
void ema_update(EmaState& ema, std::span<const Matrix* const> params, double mu);

/// Scales `grads` in place so their global ℓ₂ norm is at most max_norm.
/// Returns the norm before scaling.
double clip_grad_norm(std::span<Matrix> grads, double max_norm);

}  // namespace cgsd
