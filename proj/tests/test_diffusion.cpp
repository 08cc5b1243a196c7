#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <utility>
#include <vector>

#include "cgsd/diffusion.hpp"
#include "cgsd/errors.hpp"
#include "doctest.h"

using namespace cgsd;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.values()) v = dist(gen);
  return m;
}

// A one-step schedule with a chosen ᾱ₁.
NoiseSchedule single_step(double alpha_bar) {
  NoiseSchedule s;
  s.t_total = 1;
  s.beta_start = s.beta_end = 1.0 - alpha_bar;
  s.beta = {1.0 - alpha_bar};
  s.alpha = {alpha_bar};
  s.alpha_bar = {1.0, alpha_bar};
  s.one_minus_alpha_bar = {0.0, 1.0 - alpha_bar};
  return s;
}

DenoiserShape small_shape() {
  DenoiserShape s;
  s.d_feat = 4;
  s.k = 3;
  s.temb_dim = 6;
  s.hidden1 = 7;
  s.hidden2 = 5;
  return s;
}

Conditioning random_conditioning(std::size_t n, const DenoiserShape& s, std::mt19937_64& gen) {
  Conditioning c{random_matrix(n, s.d_feat, gen), Matrix(n, s.k), random_matrix(n, s.k, gen, 0.5)};
  Matrix logits = random_matrix(n, s.k, gen);
  c.y_hat0 = softmax_rows(logits);
  return c;
}

Matrix one_hot(std::span<const int> labels, std::size_t k) {
  Matrix m(labels.size(), k);
  for (std::size_t i = 0; i < labels.size(); ++i) m(i, static_cast<std::size_t>(labels[i])) = 1.0;
  return m;
}

// Noise predictor that knows the clean labels and inverts the forward process.
EpsFn oracle_eps(const Matrix& y0, const NoiseSchedule& sched) {
  return [&y0, &sched](const Matrix& y_t, std::span<const int> t, const Conditioning& cond) {
    Matrix eps(y_t.rows(), y_t.cols());
    for (std::size_t i = 0; i < y_t.rows(); ++i) {
      const double ab = sched.alpha_bar[static_cast<std::size_t>(t[i])];
      const double om = sched.one_minus_alpha_bar[static_cast<std::size_t>(t[i])];
      const double sab = std::sqrt(ab);
      for (std::size_t j = 0; j < y_t.cols(); ++j) {
        eps(i, j) = (y_t(i, j) - sab * y0(i % y0.rows(), j) - (1.0 - sab) * cond.y_hat0(i, j)) / std::sqrt(om);
      }
    }
    return eps;
  };
}

}  // namespace

TEST_CASE("schedule tables") {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  CHECK(s.beta_t(1) == 1e-4);
  CHECK(s.beta_t(1000) == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(s.beta_t(500) == doctest::Approx(1e-4 + 499 * (0.0199 / 999)).epsilon(1e-14));
  CHECK(s.beta_t(500) == doctest::Approx(0.010040040040040039).epsilon(1e-14));
  CHECK(s.alpha_bar_t(0) == 1.0);
  for (int t = 1; t <= 1000; ++t) {
    CHECK(s.alpha_bar_t(t) < s.alpha_bar_t(t - 1));
    CHECK(s.alpha_bar_t(t) == s.alpha_bar_t(t - 1) * s.alpha_t(t));
    if (t > 1) CHECK(s.beta_t(t) >= s.beta_t(t - 1));
  }
  CHECK(std::sqrt(s.alpha_bar_t(1000)) < 0.01);

  const NoiseSchedule one = make_schedule(1, 0.3, 0.5);
  CHECK(one.beta == std::vector<double>{0.3});
  CHECK(one.alpha_bar == std::vector<double>{1.0, 0.7});

  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), ConfigError);
  CHECK_THROWS_AS(s.beta_t(0), IndexError);
  CHECK_THROWS_AS(s.alpha_bar_t(1001), IndexError);
}

TEST_CASE("forward sample and inversion") {
  const NoiseSchedule quarter = single_step(0.25);
  const std::vector<double> y0{1, 0}, prior{0.5, 0.5}, eps{1, -1};
  const auto y = forward_sample(y0, prior, 1, eps, quarter);
  const double s = std::sqrt(0.75);
  CHECK(y[0] == doctest::Approx(0.5 + 0.25 + s).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(0.25 - s).epsilon(1e-15));
  CHECK(forward_sample(y0, prior, 0, eps, quarter) == y0);
  CHECK_THROWS_AS(forward_sample(y0, prior, 2, eps, quarter), IndexError);

  const auto back = predict_y0(std::vector<double>{1, 0}, std::vector<double>{0, 0}, prior, 1, quarter);
  CHECK(back[0] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(back[1] == doctest::Approx(-0.5).epsilon(1e-15));

  // ᾱ near zero: y_t ≈ ŷ₀ + ε.
  const NoiseSchedule tiny = single_step(1e-14);
  const auto noisy = forward_sample(y0, prior, 1, eps, tiny);
  CHECK(std::abs(noisy[0] - 1.5) < 1e-6);
  CHECK(std::abs(noisy[1] + 0.5) < 1e-6);

  const NoiseSchedule sched = make_schedule(1000, 1e-4, 0.02);
  std::mt19937_64 gen(3);
  std::normal_distribution<double> normal;
  double worst = 0.0;
  for (int t = 1; t <= 1000; ++t) {
    std::vector<double> e(5), p{0.1, 0.3, 0.2, 0.25, 0.15}, label(5, 0.0);
    label[static_cast<std::size_t>(t % 5)] = 1.0;
    for (double& v : e) v = normal(gen);
    const auto yt = forward_sample(label, p, t, e, sched);
    const auto rec = predict_y0(yt, e, p, t, sched);
    for (std::size_t j = 0; j < 5; ++j) worst = std::max(worst, std::abs(rec[j] - label[j]));
  }
  CHECK(worst < 1e-12);
  // Early steps barely move the label.
  const auto early = predict_y0(std::vector<double>{0.3, 0.7}, std::vector<double>{0.1, -0.2}, prior, 1, sched);
  CHECK(std::abs(early[0] - 0.3) < 2e-2);
}

TEST_CASE("forward marginal matches its analytic moments") {
  const NoiseSchedule sched = make_schedule(1000, 1e-4, 0.02);
  const std::vector<double> y0{0, 0, 1, 0, 0}, prior{0.1, 0.2, 0.4, 0.2, 0.1};
  Rng rng(2024);
  for (int t : {1, 250, 500, 1000}) {
    const int n = 100000;
    std::vector<double> sum(5, 0.0), sum2(5, 0.0);
    std::vector<double> e(5);
    for (int i = 0; i < n; ++i) {
      for (double& v : e) v = rng.normal();
      const auto y = forward_sample(y0, prior, t, e, sched);
      for (std::size_t j = 0; j < 5; ++j) {
        sum[j] += y[j];
        sum2[j] += y[j] * y[j];
      }
    }
    const double ab = sched.alpha_bar_t(t);
    const double var = 1.0 - ab;
    for (std::size_t j = 0; j < 5; ++j) {
      const double m = sum[j] / n;
      const double v = sum2[j] / n - m * m;
      const double expect = std::sqrt(ab) * y0[j] + (1.0 - std::sqrt(ab)) * prior[j];
      CHECK(std::abs(m - expect) < 4.0 * std::sqrt(var / n));
      CHECK(std::abs(v - var) < 0.05 * var);
    }
  }
}

TEST_CASE("posterior coefficient identities hold at every step") {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  const PosteriorCoefficients first = posterior_coefficients(1, s);
  CHECK(first.gamma0 == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(first.gamma1 == 0.0);
  CHECK(std::abs(first.gamma2) < 1e-15);
  CHECK(first.variance == 0.0);
  double w1 = 0, w2 = 0, w3 = 0;
  for (int t = 1; t <= 1000; ++t) {
    const PosteriorCoefficients c = posterior_coefficients(t, s);
    const double ab = s.alpha_bar_t(t), abp = s.alpha_bar_t(t - 1);
    w1 = std::max(w1, std::abs(c.gamma0 + c.gamma1 * std::sqrt(ab) - std::sqrt(abp)));
    w2 = std::max(w2, std::abs(c.gamma1 * (1.0 - std::sqrt(ab)) + c.gamma2 - (1.0 - std::sqrt(abp))));
    w3 = std::max(w3, std::abs(c.gamma1 * c.gamma1 * (1.0 - ab) + c.variance - (1.0 - abp)));
  }
  CHECK(w1 < 1e-12);
  CHECK(w2 < 1e-12);
  CHECK(w3 < 1e-12);

  const std::vector<double> yt{0.4, -0.2}, y0t{1.0, 0.0}, prior{0.6, 0.4};
  const Posterior p1 = posterior_params(yt, y0t, prior, 1, s);
  CHECK(p1.mean[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::abs(p1.mean[1]) < 1e-14);
  CHECK(p1.variance == 0.0);
  CHECK_THROWS_AS(posterior_params(yt, y0t, prior, 0, s), IndexError);
}

TEST_CASE("timestep embedding") {
  const auto zero = timestep_embedding(0);
  REQUIRE(zero.size() == 64);
  for (std::size_t i = 0; i < 64; i += 2) {
    CHECK(zero[i] == 0.0);
    CHECK(zero[i + 1] == 1.0);
  }
  CHECK_THROWS_AS(timestep_embedding(3, 63), ConfigError);
  std::vector<std::vector<double>> table;
  for (int t = 0; t <= 10000; ++t) table.push_back(timestep_embedding(t));
  for (const auto& e : table) {
    double n2 = 0.0;
    for (double v : e) n2 += v * v;
    CHECK(std::sqrt(n2) <= std::sqrt(64.0) + 1e-12);
  }
  bool all_distinct = true;
  for (std::size_t a = 0; a < table.size() && all_distinct; ++a) {
    for (std::size_t b = a + 1; b < table.size(); ++b) {
      bool differs = false;
      for (std::size_t j = 0; j < 64 && !differs; ++j) differs = std::abs(table[a][j] - table[b][j]) > 1e-6;
      if (!differs) {
        all_distinct = false;
        break;
      }
    }
  }
  CHECK(all_distinct);
}

TEST_CASE("denoiser forward") {
  const DenoiserShape shape;
  CHECK(shape.input_dim() == 143);
  CHECK(shape.layout() == "f:64|y_t:5|y_hat0:5|d:5|temb:64");
  const DenoiserNet net = DenoiserNet::create(shape, 1);
  std::mt19937_64 gen(2);
  const auto f = random_matrix(1, 64, gen);
  const std::vector<double> y{0.2, 0.1, -0.3, 0.5, 1.0}, prior{0.2, 0.2, 0.2, 0.2, 0.2}, d{0.1, 0, 0, 0, 0};
  const auto out = eps_predict(net, f.values(), y, prior, d, 7);
  CHECK(out == std::vector<double>(5, 0.0));
  CHECK_THROWS_AS(eps_predict(net, f.values(), std::vector<double>{1, 2}, prior, d, 7), ContractError);

  // Plain and taped forward passes agree.
  DenoiserNet rnd = DenoiserNet::create(small_shape(), 3);
  rnd.w3 = random_matrix(3, 5, gen);
  rnd.b3 = random_matrix(1, 3, gen);
  const Conditioning cond = random_conditioning(6, rnd.shape, gen);
  const Matrix yt = random_matrix(6, 3, gen);
  const std::vector<int> ts{1, 4, 9, 2, 7, 3};
  const Matrix input = conditioning_input(cond, yt, ts, rnd.shape.temb_dim);
  const Matrix plain = rnd.forward(input);
  Tape tape;
  const Matrix taped = eps_forward(bind(tape, rnd, false), tape.constant(input)).value();
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(plain[i] == doctest::Approx(taped[i]).epsilon(1e-14));
  CHECK(rnd.forward(input) == plain);
}

TEST_CASE("epsilon loss") {
  const DenoiserShape shape = small_shape();
  std::mt19937_64 gen(4);
  const NoiseSchedule sched = make_schedule(50, 1e-3, 0.2);
  DiffusionBatch batch;
  batch.cond = random_conditioning(8, shape, gen);
  const std::vector<int> labels{0, 1, 2, 1, 0, 2, 2, 1};
  batch.y0 = one_hot(labels, 3);
  batch.item_ids = {10, 11, 12, 13, 14, 15, 16, 17};

  const EpsFn truth = oracle_eps(batch.y0, sched);
  CHECK(epsilon_loss(truth, batch, sched, 9, 0) < 1e-24);
  const EpsFn shifted = [&](const Matrix& y_t, std::span<const int> t, const Conditioning& c) {
    Matrix e = truth(y_t, t, c);
    for (std::size_t i = 0; i < e.rows(); ++i) e(i, 0) += 1.0;
    return e;
  };
  DiffusionBatch five = batch;
  five.cond.y_hat0 = Matrix(8, 5, 0.2);
  five.cond.d = Matrix(8, 5);
  five.y0 = one_hot(std::vector<int>{0, 1, 2, 3, 4, 0, 1, 2}, 5);
  const EpsFn truth5 = oracle_eps(five.y0, sched);
  const EpsFn shifted5 = [&](const Matrix& y_t, std::span<const int> t, const Conditioning& c) {
    Matrix e = truth5(y_t, t, c);
    for (std::size_t i = 0; i < e.rows(); ++i) e(i, 0) += 1.0;
    return e;
  };
  CHECK(epsilon_loss(shifted5, five, sched, 9, 0) == doctest::Approx(0.2).epsilon(1e-10));
  (void)shifted;

  DenoiserNet net = DenoiserNet::create(shape, 5);
  net.w3 = random_matrix(3, 5, gen, 0.5);
  const double base = epsilon_loss(eps_function(net), batch, sched, 9, 3);
  std::vector<std::size_t> perm{7, 2, 5, 0, 1, 6, 3, 4};
  DiffusionBatch shuffled;
  shuffled.cond = batch.cond.subset(perm);
  shuffled.y0 = batch.y0.select_rows(perm);
  for (auto p : perm) shuffled.item_ids.push_back(batch.item_ids[p]);
  CHECK(epsilon_loss(eps_function(net), shuffled, sched, 9, 3) == doctest::Approx(base).epsilon(1e-14));

  Tape tape;
  const Var taped = epsilon_loss(bind(tape, net, true), shape.temb_dim, batch, sched, 9, 3);
  CHECK(taped.value()[0] == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("epsilon loss gradient matches finite differences") {
  const DenoiserShape shape = small_shape();
  std::mt19937_64 gen(8);
  DenoiserNet net = DenoiserNet::create(shape, 6);
  net.w3 = random_matrix(3, 5, gen, 0.5);
  net.b3 = random_matrix(1, 3, gen, 0.1);
  net.b1 = random_matrix(1, 7, gen, 0.1);
  const NoiseSchedule sched = make_schedule(100, 1e-3, 0.2);
  DiffusionBatch batch;
  batch.cond = random_conditioning(4, shape, gen);
  batch.y0 = one_hot(std::vector<int>{2, 0, 1, 1}, 3);
  batch.item_ids = {0, 1, 2, 3};

  const ScalarFn fn = [&](Tape&, std::span<const Var> in) {
    const DenoiserGraph g{in[0], in[1], in[2], in[3], in[4], in[5]};
    return epsilon_loss(g, shape.temb_dim, batch, sched, 17, 0);
  };
  std::vector<Matrix> points;
  for (const Matrix* m : std::as_const(net).params()) points.push_back(*m);
  CHECK(grad_check(fn, points, 1e-6) < 1e-4);
}

TEST_CASE("reverse step") {
  const NoiseSchedule sched = make_schedule(20, 1e-2, 0.3);
  std::mt19937_64 gen(9);
  const DenoiserShape shape = small_shape();
  DenoiserNet net = DenoiserNet::create(shape, 2);
  net.w3 = random_matrix(3, 5, gen, 0.3);
  const auto f = random_matrix(1, 4, gen);
  const std::vector<double> d{0.3, 0.1, -0.2}, prior{0.5, 0.3, 0.2}, yt{0.9, 0.2, -0.1};

  Rng r1(5);
  const auto out = reverse_step(net, f.values(), d, prior, yt, 1, sched, r1);
  const auto eps = eps_predict(net, f.values(), yt, prior, d, 1);
  const auto y0t = predict_y0(yt, eps, prior, 1, sched);
  for (std::size_t j = 0; j < 3; ++j) CHECK(out[j] == doctest::Approx(y0t[j]).epsilon(1e-13));

  Rng a(77), b(77);
  CHECK(reverse_step(net, f.values(), d, prior, yt, 12, sched, a) ==
        reverse_step(net, f.values(), d, prior, yt, 12, sched, b));
}

TEST_CASE("reverse step with an oracle denoiser reproduces the forward marginal") {
  const NoiseSchedule sched = make_schedule(100, 1e-3, 0.2);
  const int t = 40;
  const std::vector<double> prior{0.2, 0.5, 0.3};
  const Matrix y0 = Matrix::from_rows({{0, 0, 1}});
  const EpsFn oracle = oracle_eps(y0, sched);
  const std::size_t chunk = 1000, chunks = 100;
  Conditioning cond{Matrix(chunk, 1), Matrix(chunk, 3), Matrix(chunk, 3)};
  for (std::size_t i = 0; i < chunk; ++i)
    for (std::size_t j = 0; j < 3; ++j) cond.y_hat0(i, j) = prior[j];

  std::vector<double> sum(3, 0.0), sum2(3, 0.0);
  const double sab = std::sqrt(sched.alpha_bar_t(t));
  for (std::size_t c = 0; c < chunks; ++c) {
    std::vector<Rng> rngs;
    Matrix yt(chunk, 3);
    for (std::size_t i = 0; i < chunk; ++i) {
      rngs.push_back(Rng::stream(31, {c, i}));
      for (std::size_t j = 0; j < 3; ++j)
        yt(i, j) = sab * y0[j] + (1.0 - sab) * prior[j] + std::sqrt(1.0 - sched.alpha_bar_t(t)) * rngs.back().normal();
    }
    const Matrix prev = reverse_step(oracle, cond, yt, t, sched, rngs);
    for (std::size_t i = 0; i < chunk; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        sum[j] += prev(i, j);
        sum2[j] += prev(i, j) * prev(i, j);
      }
  }
  const double n = static_cast<double>(chunk * chunks);
  const double sabp = std::sqrt(sched.alpha_bar_t(t - 1));
  for (std::size_t j = 0; j < 3; ++j) {
    const double m = sum[j] / n;
    const double sd = std::sqrt(sum2[j] / n - m * m);
    const double expect = sabp * y0[j] + (1.0 - sabp) * prior[j];
    CHECK(std::abs(m - expect) < 3.0 * sd / std::sqrt(n));
  }
}

TEST_CASE("sample chain") {
  const NoiseSchedule one = make_schedule(1, 0.5, 0.5);
  const Matrix y0 = Matrix::from_rows({{0, 1, 0}});
  Conditioning cond{Matrix(1, 1), Matrix::from_rows({{0.3, 0.4, 0.3}}), Matrix(1, 3)};
  std::vector<Rng> rngs{Rng(4)};
  const Matrix out = sample_chain(oracle_eps(y0, one), cond, one, rngs);
  for (std::size_t j = 0; j < 3; ++j) CHECK(out[j] == doctest::Approx(y0[j]).epsilon(1e-12));

  const NoiseSchedule sched = make_schedule(30, 1e-3, 0.3);
  std::mt19937_64 gen(10);
  DenoiserNet net = DenoiserNet::create(small_shape(), 8);
  net.w3 = random_matrix(3, 5, gen, 0.3);
  const auto f = random_matrix(1, 4, gen);
  const std::vector<double> d{0.2, 0.0, -0.1}, prior{0.6, 0.3, 0.1};
  Rng a(12), b(12);
  CHECK(sample_chain(net, f.values(), d, prior, sched, a) == sample_chain(net, f.values(), d, prior, sched, b));

  CHECK(chain_timesteps(100, 10) == std::vector<int>{100, 90, 80, 70, 60, 50, 40, 30, 20, 10});
  CHECK(chain_timesteps(7, 3) == std::vector<int>{7, 4, 1});
  CHECK(chain_timesteps(5, 1) == std::vector<int>{5, 4, 3, 2, 1});
  CHECK_THROWS_AS(chain_timesteps(5, 0), ConfigError);

  // With an oracle denoiser every chain, strided or not, lands on y0.
  std::vector<Rng> r1{Rng(1)}, r2{Rng(1)};
  std::vector<int> seen;
  const Matrix full = sample_chain(oracle_eps(y0, sched), cond, sched, r1);
  const Matrix strided = sample_chain(oracle_eps(y0, sched), cond, sched, r2, 10,
                                      [&](int t, const Matrix&) { seen.push_back(t); });
  CHECK(seen == std::vector<int>{30, 20, 10, 0});
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(full[j] == doctest::Approx(y0[j]).epsilon(1e-9));
    CHECK(strided[j] == doctest::Approx(y0[j]).epsilon(1e-9));
  }
}

TEST_CASE("multi-sample inference") {
  const NoiseSchedule sched = make_schedule(10, 1e-2, 0.3);
  std::mt19937_64 gen(12);
  const DenoiserShape shape = small_shape();
  DenoiserNet net = DenoiserNet::create(shape, 4);
  net.w3 = random_matrix(3, 5, gen, 0.3);
  const Conditioning cond = random_conditioning(12, shape, gen);
  std::vector<std::uint64_t> ids(12);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 100 + i;

  InferenceOptions opts;
  CHECK(opts.n_samples == 5);
  const InferenceResult serial = infer_labels(eps_function(net), cond, ids, sched, opts);
  opts.threads = 3;
  const InferenceResult parallel = infer_labels(eps_function(net), cond, ids, sched, opts);
  CHECK(serial.mean_vectors == parallel.mean_vectors);
  CHECK(serial.grades == parallel.grades);
  for (std::size_t i = 0; i < 12; ++i) {
    double total = 0.0;
    for (double p : serial.mean_probs.row(i)) total += p;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Item order does not change any item's result.
  std::vector<std::size_t> perm{11, 3, 7, 0, 9, 1, 5, 2, 10, 4, 8, 6};
  std::vector<std::uint64_t> pids;
  for (auto p : perm) pids.push_back(ids[p]);
  opts.threads = 1;
  const InferenceResult permuted = infer_labels(eps_function(net), cond.subset(perm), pids, sched, opts);
  for (std::size_t r = 0; r < perm.size(); ++r) CHECK(permuted.grades[r] == serial.grades[perm[r]]);

  // One sample reduces to a single chain.
  opts.n_samples = 1;
  const InferenceResult single = infer_labels(eps_function(net), cond, ids, sched, opts);
  std::vector<Rng> rngs;
  for (auto id : ids) rngs.push_back(Rng::stream(opts.seed, {0xc4a1, id, 0}));
  const Matrix chain = sample_chain(eps_function(net), cond, sched, rngs);
  CHECK(single.mean_vectors == chain);
  for (std::size_t i = 0; i < 12; ++i) CHECK(single.grades[i] == argmax_first(chain.row(i)));

  CHECK_THROWS_AS(infer_labels(eps_function(net), cond, ids, sched, InferenceOptions{0, 1, 1, 1}), ConfigError);
}

TEST_CASE("averaging five chains cuts variance about fivefold") {
  const NoiseSchedule sched = make_schedule(10, 1e-2, 0.3);
  std::mt19937_64 gen(13);
  const DenoiserShape shape = small_shape();
  DenoiserNet net = DenoiserNet::create(shape, 4);
  net.w3 = random_matrix(3, 5, gen, 0.3);
  const Conditioning cond = random_conditioning(1, shape, gen);
  const std::vector<std::uint64_t> id{0};
  auto spread = [&](int n_samples) {
    std::vector<double> sum(3, 0.0), sum2(3, 0.0);
    for (int rep = 0; rep < 200; ++rep) {
      InferenceOptions o;
      o.n_samples = n_samples;
      o.seed = 5000 + static_cast<std::uint64_t>(rep);
      const InferenceResult r = infer_labels(eps_function(net), cond, id, sched, o);
      for (std::size_t j = 0; j < 3; ++j) {
        sum[j] += r.mean_vectors[j];
        sum2[j] += r.mean_vectors[j] * r.mean_vectors[j];
      }
    }
    double total = 0.0;
    for (std::size_t j = 0; j < 3; ++j) total += sum2[j] / 200 - (sum[j] / 200) * (sum[j] / 200);
    return total;
  };
  const double ratio = spread(1) / spread(5);
  CHECK(ratio > 5.0 / 1.5);
  CHECK(ratio < 5.0 * 1.5);
}

TEST_CASE("denoiser checkpoint round trip") {
  std::mt19937_64 gen(14);
  DenoiserCheckpoint ck;
  ck.weights = DenoiserNet::create(DenoiserShape{}, 3);
  ck.weights.w3 = random_matrix(5, 128, gen);
  ck.ema = ck.weights;
  ck.ema.b1 = random_matrix(1, 128, gen);
  ck.ema_mu = 0.9999;
  ck.steps = 1234;
  ck.schedule = make_schedule(100, 1e-3, 0.2);
  const auto path = std::filesystem::temp_directory_path() / "cgsd_denoiser_roundtrip.json";
  save_denoiser(path, ck);
  const DenoiserCheckpoint back = load_denoiser(path);
  CHECK(back.weights.fingerprint() == ck.weights.fingerprint());
  CHECK(back.ema.fingerprint() == ck.ema.fingerprint());
  CHECK(back.ema_mu == 0.9999);
  CHECK(back.steps == 1234);
  CHECK(back.schedule.alpha_bar == ck.schedule.alpha_bar);

  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  CHECK(text.find("f:64|y_t:5|y_hat0:5|d:5|temb:64") != std::string::npos);
  text.replace(text.find("cgsd-denoiser-v1"), 16, "cgsd-denoiser-v2");
  std::ofstream(path) << text;
  CHECK_THROWS_AS(load_denoiser(path), VersionError);
  std::filesystem::remove(path);
}
