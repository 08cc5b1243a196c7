// SPDX-License-Identifier: Apache-2.0

#include "cgsd/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "cgsd/digest.hpp"
#include "cgsd/errors.hpp"
#include "json_io.hpp"

namespace cgsd {

using nlohmann::json;

namespace {

void check_step(int t, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.t_total) {
    throw IndexError("timestep " + std::to_string(t) + " out of range [1, " + std::to_string(sched.t_total) + "]");
  }
}

void check_len(std::span<const double> v, std::size_t k, const char* what) {
  if (v.size() != k) {
    throw DimensionError(std::string(what) + ": length " + std::to_string(v.size()) + ", expected " +
                         std::to_string(k));
  }
}

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = (2.0 * rng.uniform() - 1.0) * bound;
  return m;
}

Matrix dense_layer(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out = matmul_nt(x, w);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  }
  return out;
}

/// One posterior transition over all rows given predicted noise.
Matrix posterior_sample(const Matrix& y_t, const Matrix& eps_hat, const Matrix& y_hat0, int t,
                        const NoiseSchedule& sched, const PosteriorCoefficients& c, std::span<Rng> rngs) {
  const double sab = std::sqrt(sched.alpha_bar_t(t));
  const double s1ab = std::sqrt(sched.one_minus_alpha_bar[static_cast<std::size_t>(t)]);
  const double sd = std::sqrt(c.variance);
  Matrix out(y_t.rows(), y_t.cols());
  for (std::size_t i = 0; i < y_t.rows(); ++i) {
    for (std::size_t j = 0; j < y_t.cols(); ++j) {
      const double y0_tilde = (y_t(i, j) - (1.0 - sab) * y_hat0(i, j) - s1ab * eps_hat(i, j)) / sab;
      out(i, j) = c.gamma0 * y0_tilde + c.gamma1 * y_t(i, j) + c.gamma2 * y_hat0(i, j);
    }
    if (c.variance > 0.0) {
      for (std::size_t j = 0; j < y_t.cols(); ++j) out(i, j) += sd * rngs[i].normal();
    }
  }
  return out;
}

void require_rngs(std::span<Rng> rngs, std::size_t n) {
  if (rngs.size() != n) {
    throw ContractError("expected one generator per row: " + std::to_string(n) + " rows, " +
                        std::to_string(rngs.size()) + " generators");
  }
}

Conditioning single_item(std::span<const double> f, std::span<const double> d, std::span<const double> y_hat0) {
  check_len(d, y_hat0.size(), "semantic vector");
  return {Matrix::row_vector(f), Matrix::row_vector(y_hat0), Matrix::row_vector(d)};
}

}  // namespace

// ---- schedule -------------------------------------------------------------------

double NoiseSchedule::beta_t(int t) const {
  check_step(t, *this);
  return beta[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_t(int t) const {
  check_step(t, *this);
  return alpha[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar_t(int t) const {
  if (t < 0 || t > t_total) {
    throw IndexError("timestep " + std::to_string(t) + " out of range [0, " + std::to_string(t_total) + "]");
  }
  return alpha_bar[static_cast<std::size_t>(t)];
}

NoiseSchedule make_schedule(int t_total, double beta_start, double beta_end) {
  if (t_total < 1) throw ConfigError("schedule needs at least one timestep");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.t_total = t_total;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(static_cast<std::size_t>(t_total));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.assign(s.beta.size() + 1, 1.0);
  s.one_minus_alpha_bar.assign(s.beta.size() + 1, 0.0);
  const double step = t_total > 1 ? (beta_end - beta_start) / (t_total - 1) : 0.0;
  for (int t = 1; t <= t_total; ++t) {
    const auto i = static_cast<std::size_t>(t - 1);
    s.beta[i] = t_total > 1 ? beta_start + (t - 1) * step : beta_start;
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i + 1] = s.alpha_bar[i] * s.alpha[i];
    s.one_minus_alpha_bar[i + 1] = s.one_minus_alpha_bar[i] + s.alpha_bar[i] * s.beta[i];
  }
  return s;
}

std::vector<double> forward_sample(std::span<const double> y0, std::span<const double> y_hat0, int t,
                                   std::span<const double> eps, const NoiseSchedule& sched) {
  // t = 0 is accepted as the no-noise limit (alpha_bar[0] = 1).
  const double sab = std::sqrt(sched.alpha_bar_t(t));
  const double s1ab = std::sqrt(sched.one_minus_alpha_bar[static_cast<std::size_t>(t)]);
  check_len(y_hat0, y0.size(), "forward_sample y_hat0");
  check_len(eps, y0.size(), "forward_sample eps");
  std::vector<double> out(y0.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = sab * y0[j] + (1.0 - sab) * y_hat0[j] + s1ab * eps[j];
  return out;
}

std::vector<double> timestep_embedding(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("timestep embedding dimension must be positive and even");
  if (t < 0) throw IndexError("timestep must be nonnegative");
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / dim);
    out[static_cast<std::size_t>(2 * i)] = std::sin(t * freq);
    out[static_cast<std::size_t>(2 * i + 1)] = std::cos(t * freq);
  }
  return out;
}

std::vector<double> predict_y0(std::span<const double> y_t, std::span<const double> eps_hat,
                               std::span<const double> y_hat0, int t, const NoiseSchedule& sched) {
  check_step(t, sched);
  check_len(eps_hat, y_t.size(), "predict_y0 eps_hat");
  check_len(y_hat0, y_t.size(), "predict_y0 y_hat0");
  const double sab = std::sqrt(sched.alpha_bar_t(t));
  const double s1ab = std::sqrt(sched.one_minus_alpha_bar[static_cast<std::size_t>(t)]);
  std::vector<double> out(y_t.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = (y_t[j] - (1.0 - sab) * y_hat0[j] - s1ab * eps_hat[j]) / sab;
  return out;
}

PosteriorCoefficients posterior_coefficients(const Transition& tr) {
  const double sab_t = std::sqrt(tr.alpha_bar_t);
  const double sab_prev = std::sqrt(tr.alpha_bar_prev);
  const double sa = std::sqrt(tr.alpha);
  PosteriorCoefficients c;
  c.gamma0 = tr.beta * sab_prev / tr.one_minus_t;
  c.gamma1 = tr.one_minus_prev * sa / tr.one_minus_t;
  // (√ᾱ_t − 1)/(1 − ᾱ_t) = −1/(1 + √ᾱ_t), which avoids cancellation near t = 1.
  c.gamma2 = 1.0 - (sa + sab_prev) / (1.0 + sab_t);
  c.variance = tr.beta * tr.one_minus_prev / tr.one_minus_t;
  return c;
}

PosteriorCoefficients posterior_coefficients(int t, const NoiseSchedule& sched) {
  check_step(t, sched);
  const auto i = static_cast<std::size_t>(t);
  return posterior_coefficients({sched.beta[i - 1], sched.alpha[i - 1], sched.alpha_bar[i], sched.alpha_bar[i - 1],
                                 sched.one_minus_alpha_bar[i], sched.one_minus_alpha_bar[i - 1]});
}

Posterior posterior_params(std::span<const double> y_t, std::span<const double> y0_tilde,
                           std::span<const double> y_hat0, int t, const NoiseSchedule& sched) {
  const PosteriorCoefficients c = posterior_coefficients(t, sched);
  check_len(y0_tilde, y_t.size(), "posterior y0_tilde");
  check_len(y_hat0, y_t.size(), "posterior y_hat0");
  Posterior p;
  p.variance = c.variance;
  p.mean.resize(y_t.size());
  for (std::size_t j = 0; j < y_t.size(); ++j) {
    p.mean[j] = c.gamma0 * y0_tilde[j] + c.gamma1 * y_t[j] + c.gamma2 * y_hat0[j];
  }
  return p;
}

// ---- denoiser -------------------------------------------------------------------

std::string DenoiserShape::layout() const {
  return "f:" + std::to_string(d_feat) + "|y_t:" + std::to_string(k) + "|y_hat0:" + std::to_string(k) +
         "|d:" + std::to_string(k) + "|temb:" + std::to_string(temb_dim);
}

DenoiserNet DenoiserNet::create(const DenoiserShape& shape, std::uint64_t seed) {
  if (shape.d_feat < 1 || shape.k < 1 || shape.hidden1 < 1 || shape.hidden2 < 1) {
    throw ConfigError("denoiser dimensions must be positive");
  }
  if (shape.temb_dim <= 0 || shape.temb_dim % 2 != 0) {
    throw ConfigError("timestep embedding dimension must be positive and even");
  }
  DenoiserNet net;
  net.shape = shape;
  Rng rng = Rng::stream(seed, {0xde, 1});
  const int in = shape.input_dim();
  net.w1 = uniform_matrix(shape.hidden1, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  net.b1 = Matrix(1, shape.hidden1);
  net.w2 = uniform_matrix(shape.hidden2, shape.hidden1, 1.0 / std::sqrt(static_cast<double>(shape.hidden1)), rng);
  net.b2 = Matrix(1, shape.hidden2);
  net.w3 = Matrix(shape.k, shape.hidden2);
  net.b3 = Matrix(1, shape.k);
  return net;
}

std::vector<Matrix*> DenoiserNet::params() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
std::vector<const Matrix*> DenoiserNet::params() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

Matrix DenoiserNet::forward(const Matrix& input) const {
  if (input.cols() != static_cast<std::size_t>(shape.input_dim())) {
    throw ContractError("denoiser input has " + std::to_string(input.cols()) + " columns, layout " + shape.layout() +
                        " needs " + std::to_string(shape.input_dim()));
  }
  Matrix h1 = dense_layer(input, w1, b1);
  for (double& v : h1.values()) v = smooth_activation(v);
  Matrix h2 = dense_layer(h1, w2, b2);
  for (double& v : h2.values()) v = smooth_activation(v);
  return dense_layer(h2, w3, b3);
}

std::string DenoiserNet::fingerprint() const {
  Fnv1a h;
  for (const Matrix* m : params()) {
    const std::uint64_t dims[2] = {m->rows(), m->cols()};
    h.bytes(dims, sizeof dims);
    h.values(m->values());
  }
  return h.hex();
}

DenoiserGraph bind(Tape& tape, const DenoiserNet& net, bool trainable) {
  auto leaf = [&](const Matrix& m) { return trainable ? tape.parameter(m) : tape.constant(m); };
  return {leaf(net.w1), leaf(net.b1), leaf(net.w2), leaf(net.b2), leaf(net.w3), leaf(net.b3)};
}

Var eps_forward(const DenoiserGraph& g, Var input) {
  const Var h1 = smooth_nonlinearity(add_row(matmul_nt(input, g.w1), g.b1));
  const Var h2 = smooth_nonlinearity(add_row(matmul_nt(h1, g.w2), g.b2));
  return add_row(matmul_nt(h2, g.w3), g.b3);
}

Conditioning Conditioning::subset(std::span<const std::size_t> rows) const {
  return {f.select_rows(rows), y_hat0.select_rows(rows), d.select_rows(rows)};
}

Matrix conditioning_input(const Conditioning& cond, const Matrix& y_t, std::span<const int> t, int temb_dim) {
  const std::size_t n = cond.size();
  const std::size_t k = y_t.cols();
  if (y_t.rows() != n || cond.y_hat0.rows() != n || cond.d.rows() != n || t.size() != n) {
    throw ContractError("conditioning rows disagree: f " + cond.f.shape_string() + ", y_t " + y_t.shape_string() +
                        ", y_hat0 " + cond.y_hat0.shape_string() + ", d " + cond.d.shape_string() + ", t " +
                        std::to_string(t.size()));
  }
  if (cond.y_hat0.cols() != k || cond.d.cols() != k) {
    throw ContractError("conditioning widths disagree: y_t " + y_t.shape_string() + ", y_hat0 " +
                        cond.y_hat0.shape_string() + ", d " + cond.d.shape_string());
  }
  const std::size_t width = cond.f.cols() + 3 * k + static_cast<std::size_t>(temb_dim);
  Matrix input(n, width);
  for (std::size_t i = 0; i < n; ++i) {
    auto out = input.row(i);
    auto it = std::copy(cond.f.row(i).begin(), cond.f.row(i).end(), out.begin());
    it = std::copy(y_t.row(i).begin(), y_t.row(i).end(), it);
    it = std::copy(cond.y_hat0.row(i).begin(), cond.y_hat0.row(i).end(), it);
    it = std::copy(cond.d.row(i).begin(), cond.d.row(i).end(), it);
    const auto emb = timestep_embedding(t[i], temb_dim);
    std::copy(emb.begin(), emb.end(), it);
  }
  return input;
}

std::vector<double> eps_predict(const DenoiserNet& net, std::span<const double> f, std::span<const double> y_t,
                                std::span<const double> y_hat0, std::span<const double> d, int t) {
  const auto& s = net.shape;
  check_len(f, static_cast<std::size_t>(s.d_feat), "eps_predict f");
  for (auto v : {y_t, y_hat0, d}) check_len(v, static_cast<std::size_t>(s.k), "eps_predict label vector");
  if (t < 1) throw IndexError("eps_predict: timestep must be at least 1");
  const Conditioning cond = single_item(f, d, y_hat0);
  const int ts[1] = {t};
  const Matrix out = net.forward(conditioning_input(cond, Matrix::row_vector(y_t), ts, s.temb_dim));
  return {out.values().begin(), out.values().end()};
}

EpsFn eps_function(const DenoiserNet& net) {
  return [&net](const Matrix& y_t, std::span<const int> t, const Conditioning& cond) {
    return net.forward(conditioning_input(cond, y_t, t, net.shape.temb_dim));
  };
}

// ---- objective ------------------------------------------------------------------

NoisyBatch draw_noisy(const DiffusionBatch& batch, const NoiseSchedule& sched, std::uint64_t seed,
                      std::uint64_t step) {
  const std::size_t n = batch.y0.rows();
  const std::size_t k = batch.y0.cols();
  if (n == 0) throw ContractError("diffusion batch is empty");
  if (batch.item_ids.size() != n || batch.cond.size() != n) {
    throw ContractError("diffusion batch parts disagree in length");
  }
  NoisyBatch nb;
  nb.t.resize(n);
  nb.eps = Matrix(n, k);
  nb.y_t = Matrix(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::stream(seed, {0xd1ff, step, batch.item_ids[i]});
    const int t = rng.uniform_int(1, sched.t_total);
    nb.t[i] = t;
    for (std::size_t j = 0; j < k; ++j) nb.eps(i, j) = rng.normal();
    const double sab = std::sqrt(sched.alpha_bar_t(t));
    const double s1ab = std::sqrt(sched.one_minus_alpha_bar[static_cast<std::size_t>(t)]);
    for (std::size_t j = 0; j < k; ++j) {
      nb.y_t(i, j) = sab * batch.y0(i, j) + (1.0 - sab) * batch.cond.y_hat0(i, j) + s1ab * nb.eps(i, j);
    }
  }
  return nb;
}

Var epsilon_loss(const DenoiserGraph& g, int temb_dim, const DiffusionBatch& batch, const NoiseSchedule& sched,
                 std::uint64_t seed, std::uint64_t step) {
  const NoisyBatch nb = draw_noisy(batch, sched, seed, step);
  Tape& tape = *g.w1.tape;
  const Var input = tape.constant(conditioning_input(batch.cond, nb.y_t, nb.t, temb_dim));
  const Var diff = sub(eps_forward(g, input), tape.constant(nb.eps));
  return mean(hadamard(diff, diff));
}

double epsilon_loss(const EpsFn& eps_fn, const DiffusionBatch& batch, const NoiseSchedule& sched,
                    std::uint64_t seed, std::uint64_t step) {
  const NoisyBatch nb = draw_noisy(batch, sched, seed, step);
  const Matrix eps_hat = eps_fn(nb.y_t, nb.t, batch.cond);
  if (!eps_hat.same_shape(nb.eps)) {
    throw ContractError("noise predictor returned " + eps_hat.shape_string() + ", expected " + nb.eps.shape_string());
  }
  double total = 0.0;
  for (std::size_t i = 0; i < eps_hat.size(); ++i) {
    const double e = nb.eps[i] - eps_hat[i];
    total += e * e;
  }
  return total / static_cast<double>(eps_hat.size());
}

// ---- sampling -------------------------------------------------------------------

std::vector<int> chain_timesteps(int t_total, int stride) {
  if (stride < 1) throw ConfigError("chain stride must be at least 1");
  if (t_total < 1) throw ConfigError("chain needs at least one timestep");
  std::vector<int> steps;
  for (int t = t_total; t > 0; t -= stride) steps.push_back(t);
  return steps;
}

Matrix reverse_step(const EpsFn& eps_fn, const Conditioning& cond, const Matrix& y_t, int t,
                    const NoiseSchedule& sched, std::span<Rng> rngs) {
  check_step(t, sched);
  require_rngs(rngs, y_t.rows());
  const std::vector<int> ts(y_t.rows(), t);
  const Matrix eps_hat = eps_fn(y_t, ts, cond);
  return posterior_sample(y_t, eps_hat, cond.y_hat0, t, sched, posterior_coefficients(t, sched), rngs);
}

Matrix sample_chain(const EpsFn& eps_fn, const Conditioning& cond, const NoiseSchedule& sched, std::span<Rng> rngs,
                    int stride, const StepObserver& observer) {
  const std::size_t n = cond.size();
  require_rngs(rngs, n);
  const std::vector<int> steps = chain_timesteps(sched.t_total, stride);
  Matrix y = cond.y_hat0;
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : y.row(i)) v += rngs[i].normal();
  }
  if (observer) observer(sched.t_total, y);
  std::vector<int> ts(n);
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const int t = steps[s];
    const int prev = s + 1 < steps.size() ? steps[s + 1] : 0;
    std::fill(ts.begin(), ts.end(), t);
    const Matrix eps_hat = eps_fn(y, ts, cond);
    PosteriorCoefficients c;
    if (prev == t - 1) {
      c = posterior_coefficients(t, sched);
    } else {
      // Respaced transition: the skipped steps collapse into one with
      // α = ᾱ_t / ᾱ_prev.
      Transition tr;
      tr.alpha_bar_t = sched.alpha_bar_t(t);
      tr.alpha_bar_prev = sched.alpha_bar_t(prev);
      tr.one_minus_t = sched.one_minus_alpha_bar[static_cast<std::size_t>(t)];
      tr.one_minus_prev = sched.one_minus_alpha_bar[static_cast<std::size_t>(prev)];
      tr.alpha = tr.alpha_bar_t / tr.alpha_bar_prev;
      tr.beta = (tr.one_minus_t - tr.one_minus_prev) / tr.alpha_bar_prev;
      c = posterior_coefficients(tr);
    }
    y = posterior_sample(y, eps_hat, cond.y_hat0, t, sched, c, rngs);
    if (observer) observer(prev, y);
  }
  return y;
}

std::vector<double> reverse_step(const DenoiserNet& net, std::span<const double> f, std::span<const double> d,
                                 std::span<const double> y_hat0, std::span<const double> y_t, int t,
                                 const NoiseSchedule& sched, Rng& rng) {
  const Conditioning cond = single_item(f, d, y_hat0);
  const Matrix out = reverse_step(eps_function(net), cond, Matrix::row_vector(y_t), t, sched, std::span<Rng>(&rng, 1));
  return {out.values().begin(), out.values().end()};
}

std::vector<double> sample_chain(const DenoiserNet& net, std::span<const double> f, std::span<const double> d,
                                 std::span<const double> y_hat0, const NoiseSchedule& sched, Rng& rng) {
  const Conditioning cond = single_item(f, d, y_hat0);
  const Matrix out = sample_chain(eps_function(net), cond, sched, std::span<Rng>(&rng, 1));
  return {out.values().begin(), out.values().end()};
}

InferenceResult infer_labels(const EpsFn& eps_fn, const Conditioning& cond, std::span<const std::uint64_t> item_ids,
                             const NoiseSchedule& sched, const InferenceOptions& opts) {
  if (opts.n_samples < 1) throw ConfigError("n_samples must be at least 1");
  if (opts.threads < 1) throw ConfigError("threads must be at least 1");
  const std::size_t n = cond.size();
  if (item_ids.size() != n) throw ContractError("one item id per conditioning row is required");

  const auto samples = static_cast<std::size_t>(opts.n_samples);
  std::vector<Matrix> finals(samples);
  auto run = [&](std::size_t s) {
    std::vector<Rng> rngs;
    rngs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) rngs.push_back(Rng::stream(opts.seed, {0xc4a1, item_ids[i], s}));
    finals[s] = sample_chain(eps_fn, cond, sched, rngs, opts.stride);
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(opts.threads), samples);
  if (workers <= 1) {
    for (std::size_t s = 0; s < samples; ++s) run(s);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t s = w; s < samples; s += workers) run(s);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  const std::size_t k = cond.y_hat0.cols();
  InferenceResult res;
  res.mean_vectors = Matrix(n, k);
  for (const Matrix& m : finals) {
    for (std::size_t i = 0; i < m.size(); ++i) res.mean_vectors[i] += m[i];
  }
  for (double& v : res.mean_vectors.values()) v /= static_cast<double>(samples);
  res.mean_probs = softmax_rows(res.mean_vectors);
  res.grades.resize(n);
  for (std::size_t i = 0; i < n; ++i) res.grades[i] = argmax_first(res.mean_vectors.row(i));
  return res;
}

LabelEstimate infer_label(const DenoiserNet& net, std::span<const double> f, std::span<const double> d,
                          std::span<const double> y_hat0, const NoiseSchedule& sched, int n_samples, Rng& rng) {
  const Conditioning cond = single_item(f, d, y_hat0);
  InferenceOptions opts;
  opts.n_samples = n_samples;
  opts.seed = rng.engine()();
  const std::uint64_t id = 0;
  const InferenceResult r = infer_labels(eps_function(net), cond, std::span<const std::uint64_t>(&id, 1), sched, opts);
  return {r.grades.front(), {r.mean_probs.values().begin(), r.mean_probs.values().end()}};
}

// ---- checkpoint -----------------------------------------------------------------

namespace {

json net_to_json(const DenoiserNet& net) {
  using detail::matrix_to_json;
  return json{{"w1", matrix_to_json(net.w1)}, {"b1", matrix_to_json(net.b1)}, {"w2", matrix_to_json(net.w2)},
              {"b2", matrix_to_json(net.b2)}, {"w3", matrix_to_json(net.w3)}, {"b3", matrix_to_json(net.b3)}};
}

DenoiserNet net_from_json(const json& doc, const DenoiserShape& shape, const std::string& where) {
  using detail::matrix_from_json;
  DenoiserNet net;
  net.shape = shape;
  net.w1 = matrix_from_json(doc, "w1");
  net.b1 = matrix_from_json(doc, "b1");
  net.w2 = matrix_from_json(doc, "w2");
  net.b2 = matrix_from_json(doc, "b2");
  net.w3 = matrix_from_json(doc, "w3");
  net.b3 = matrix_from_json(doc, "b3");
  const DenoiserNet ref = DenoiserNet::create(shape, 0);
  const auto got = net.params();
  const auto want = ref.params();
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (!got[i]->same_shape(*want[i])) {
      throw ParseError(where + ": layer " + std::to_string(i) + " has shape " + got[i]->shape_string() +
                       ", expected " + want[i]->shape_string());
    }
  }
  return net;
}

}  // namespace

void save_denoiser(const std::filesystem::path& path, const DenoiserCheckpoint& ckpt) {
  const DenoiserShape& s = ckpt.weights.shape;
  const json doc{
      {"format", kDenoiserFormat},
      {"layout", s.layout()},
      {"shape",
       {{"d_feat", s.d_feat}, {"k", s.k}, {"temb_dim", s.temb_dim}, {"hidden1", s.hidden1}, {"hidden2", s.hidden2}}},
      {"schedule",
       {{"t_total", ckpt.schedule.t_total},
        {"beta_start", ckpt.schedule.beta_start},
        {"beta_end", ckpt.schedule.beta_end}}},
      {"ema_mu", ckpt.ema_mu},
      {"steps", ckpt.steps},
      {"weights", net_to_json(ckpt.weights)},
      {"ema", net_to_json(ckpt.ema)},
  };
  detail::write_json_file(path, doc);
}

DenoiserCheckpoint load_denoiser(const std::filesystem::path& path) {
  const json doc = detail::read_json_file(path);
  detail::require_format(doc, kDenoiserFormat);
  DenoiserCheckpoint ckpt;
  DenoiserShape shape;
  try {
    const json& s = doc.at("shape");
    shape.d_feat = s.at("d_feat").get<int>();
    shape.k = s.at("k").get<int>();
    shape.temb_dim = s.at("temb_dim").get<int>();
    shape.hidden1 = s.at("hidden1").get<int>();
    shape.hidden2 = s.at("hidden2").get<int>();
    const json& sch = doc.at("schedule");
    ckpt.schedule = make_schedule(sch.at("t_total").get<int>(), sch.at("beta_start").get<double>(),
                                  sch.at("beta_end").get<double>());
    ckpt.ema_mu = doc.at("ema_mu").get<double>();
    ckpt.steps = doc.at("steps").get<long>();
    if (doc.at("layout").get<std::string>() != shape.layout()) {
      throw ParseError(path.string() + ": layout " + doc.at("layout").get<std::string>() + " does not match shape " +
                       shape.layout());
    }
    ckpt.weights = net_from_json(doc.at("weights"), shape, path.string());
    ckpt.ema = net_from_json(doc.at("ema"), shape, path.string());
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return ckpt;
}

}  // namespace cgsd
