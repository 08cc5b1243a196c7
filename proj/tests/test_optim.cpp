#include <cmath>
#include <random>
#include <vector>

#include "cgsd/errors.hpp"
#include "cgsd/optim.hpp"
#include "doctest.h"

using namespace cgsd;

namespace {

// Scalar reference Adam, written out independently of the library loop.
double scalar_adam(double theta, const std::vector<double>& gs, double lr) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0, v = 0;
  for (std::size_t t = 1; t <= gs.size(); ++t) {
    const double g = gs[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    theta -= lr * mh / (std::sqrt(vh) + eps);
  }
  return theta;
}

}  // namespace

TEST_CASE("adam fixed point and first step") {
  Matrix p = Matrix::from_rows({{1.5, -2.0, 0.25}});
  const Matrix before = p;
  std::vector<Matrix*> params{&p};
  const std::vector<Matrix> zero{Matrix(1, 3)};
  AdamState s;
  for (int i = 0; i < 50; ++i) adam_step(params, zero, s, 0.1);
  CHECK(p == before);
  CHECK(s.step == 50);

  AdamState s2;
  const std::vector<Matrix> g{Matrix::from_rows({{3.0, -0.01, 100.0}})};
  adam_step(params, g, s2, 0.01);
  CHECK(p[0] == doctest::Approx(1.5 - 0.01).epsilon(1e-8));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
  CHECK(p[2] == doctest::Approx(0.25 - 0.01).epsilon(1e-8));
}

TEST_CASE("adam two steps match scalar oracle") {
  Matrix p(1, 1, 0.0);
  std::vector<Matrix*> params{&p};
  const std::vector<Matrix> g{Matrix(1, 1, 1.0)};
  AdamState s;
  adam_step(params, g, s, 0.1);
  adam_step(params, g, s, 0.1);
  CHECK(std::abs(p[0] - scalar_adam(0.0, {1.0, 1.0}, 0.1)) < 1e-12);

  // With g = 1 both bias-corrected moments equal 1, so each step is lr/(1+eps).
  CHECK(std::abs(p[0] - (-0.2 / (1 + 1e-8))) < 1e-12);
}

TEST_CASE("adam rejects mismatched shapes") {
  Matrix p(2, 2);
  std::vector<Matrix*> params{&p};
  const std::vector<Matrix> g{Matrix(1, 2)};
  AdamState s;
  CHECK_THROWS_AS(adam_step(params, g, s, 0.1), ContractError);
  CHECK_THROWS_AS(radam_step(params, g, s, 0.1), ContractError);
}

TEST_CASE("radam rectification schedule") {
  CHECK(radam_rho(1, 0.999) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(radam_rho(5, 0.999) < 5.0);
  CHECK(radam_rho(6, 0.999) > 4.0);

  SUBCASE("first step is an un-adapted momentum step") {
    Matrix p(1, 2, 1.0);
    std::vector<Matrix*> params{&p};
    const std::vector<Matrix> g{Matrix::from_rows({{0.5, -4.0}})};
    AdamState s;
    radam_step(params, g, s, 0.1);
    // m̂ = g after one step; θ ← θ − lr·m̂.
    CHECK(std::abs(p[0] - (1.0 - 0.05)) < 1e-15);
    CHECK(std::abs(p[1] - (1.0 + 0.4)) < 1e-15);
  }

  SUBCASE("late steps converge to adam") {
    Matrix pa(1, 1, 0.0), pr(1, 1, 0.0);
    std::vector<Matrix*> a{&pa}, r{&pr};
    AdamState sa, sr;
    std::mt19937_64 gen(4);
    std::normal_distribution<double> dist(1.0, 0.3);
    double last_adam = 0, last_radam = 0;
    for (int step = 0; step < 200000; ++step) {
      const std::vector<Matrix> g{Matrix(1, 1, dist(gen))};
      const double ba = pa[0], br = pr[0];
      adam_step(a, g, sa, 1e-3);
      radam_step(r, g, sr, 1e-3);
      last_adam = pa[0] - ba;
      last_radam = pr[0] - br;
    }
    const double rho = radam_rho(sr.step, 0.999);
    const double rho_inf = 2.0 / 0.001 - 1.0;
    const double rect = std::sqrt(((rho - 4) * (rho - 2) * rho_inf) / ((rho_inf - 4) * (rho_inf - 2) * rho));
    CHECK(rect == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(last_radam == doctest::Approx(last_adam).epsilon(1e-6));
  }

  SUBCASE("zero gradients are a fixed point") {
    Matrix p = Matrix::from_rows({{0.3, 0.7}});
    const Matrix before = p;
    std::vector<Matrix*> params{&p};
    const std::vector<Matrix> zero{Matrix(1, 2)};
    AdamState s;
    for (int i = 0; i < 40; ++i) radam_step(params, zero, s, 0.5);
    CHECK(p == before);
  }
}

TEST_CASE("lr plan endpoints and shape") {
  const LrPlan stage1{1e-4, 1e-6, 1e-5, 3, 22};
  CHECK(lr_at(0, stage1) == 1e-5);
  CHECK(lr_at(3, stage1) == 1e-4);
  CHECK(lr_at(21, stage1) == 1e-6);
  CHECK(lr_at(1, stage1) == doctest::Approx(1e-5 + 3e-5).epsilon(1e-12));

  const LrPlan cosine{3e-4, 1e-5, 3e-4, 0, 11};
  CHECK(std::abs(lr_at(5, cosine) - (3e-4 + 1e-5) / 2) < 1e-12);
  CHECK(lr_at(10, cosine) == 1e-5);
  CHECK(lr_at(0, cosine) == 3e-4);

  double prev = lr_at(3, stage1);
  for (int e = 4; e < 22; ++e) {
    const double cur = lr_at(e, stage1);
    CHECK(cur <= prev);
    prev = cur;
  }
  CHECK_THROWS_AS(lr_at(22, stage1), ContractError);
  CHECK_THROWS_AS(lr_at(-1, stage1), ContractError);
  CHECK_THROWS_AS(validate(LrPlan{1e-4, 1e-3, 1e-5, 0, 5}), ConfigError);
  CHECK_THROWS_AS(validate(LrPlan{1e-4, 1e-5, 1e-5, 5, 5}), ConfigError);
}

TEST_CASE("ema update") {
  Matrix p(1, 2, 1.0);
  const std::vector<const Matrix*> params{&p};

  EmaState zero = EmaState::track(params, 0.0);
  zero.shadow[0] = Matrix(1, 2, -3.0);
  ema_update(zero, params);
  CHECK(zero.shadow[0] == p);

  EmaState frozen = EmaState::track(params, 1.0);
  frozen.shadow[0] = Matrix(1, 2, -3.0);
  for (int i = 0; i < 10; ++i) ema_update(frozen, params);
  CHECK(frozen.shadow[0] == Matrix(1, 2, -3.0));

  EmaState half = EmaState::track(params, 0.5);
  half.shadow[0] = Matrix(1, 2, 0.0);
  ema_update(half, params);
  CHECK(half.shadow[0][0] == 0.5);

  // Dyadic decay keeps every iterate exact, so the geometric law holds exactly.
  for (int n = 1; n < 30; ++n) {
    ema_update(half, params);
    CHECK(std::abs(half.shadow[0][0] - 1.0) == std::ldexp(1.0, -(n + 1)));
  }

  EmaState general = EmaState::track(params, 0.9999);
  general.shadow[0] = Matrix(1, 2, 5.0);
  for (int n = 1; n <= 1000; ++n) ema_update(general, params);
  CHECK(std::abs(general.shadow[0][0] - 1.0) == doctest::Approx(4.0 * std::pow(0.9999, 1000)).epsilon(1e-10));

  Matrix wrong(2, 2);
  const std::vector<const Matrix*> bad{&wrong};
  CHECK_THROWS_AS(ema_update(general, bad), ContractError);
}

TEST_CASE("clip grad norm") {
  std::vector<Matrix> g{Matrix::from_rows({{3.0, 4.0}})};
  CHECK(clip_grad_norm(g, 1.0) == 5.0);
  CHECK(g[0][0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(g[0][1] == doctest::Approx(0.8).epsilon(1e-15));

  std::vector<Matrix> small{Matrix::from_rows({{0.1, -0.2}}), Matrix(2, 2, 0.05)};
  const auto copy = small;
  clip_grad_norm(small, 1.0);
  CHECK(small == copy);

  std::mt19937_64 gen(9);
  std::normal_distribution<double> dist(0.0, 10.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Matrix> gs{Matrix(3, 4), Matrix(1, 7)};
    for (auto& m : gs)
      for (double& v : m.values()) v = dist(gen);
    const auto before = gs;
    clip_grad_norm(gs, 1.0);
    double sq = 0.0, dot = 0.0, sq_before = 0.0;
    for (std::size_t i = 0; i < gs.size(); ++i)
      for (std::size_t j = 0; j < gs[i].size(); ++j) {
        sq += gs[i][j] * gs[i][j];
        sq_before += before[i][j] * before[i][j];
        dot += gs[i][j] * before[i][j];
      }
    CHECK(std::sqrt(sq) <= 1.0 + 1e-9);
    CHECK(std::abs(dot / std::sqrt(sq * sq_before) - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(clip_grad_norm(g, 0.0), ConfigError);
}
