// SPDX-License-Identifier: Apache-2.0
//
// Label-space diffusion with a mean-shifted forward process:
//   y_t = √ᾱ_t·y₀ + (1−√ᾱ_t)·ŷ₀ + √(1−ᾱ_t)·ε
// The denoiser predicts ε from the conditioning tuple (f, y_t, ŷ₀, d, t);
// sampling starts from y_T ~ N(ŷ₀, I) and walks the Gaussian posterior back
// to t = 0.
//
// Batched entry points keep one row per item. Every row owns its own RNG so
// that results do not depend on batch composition, order or threading.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cgsd/numkit.hpp"
#include "cgsd/rng.hpp"

namespace cgsd {

struct NoiseSchedule {
  int t_total = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;       // beta[t-1] = β_t
  std::vector<double> alpha;      // alpha[t-1] = 1 − β_t
  std::vector<double> alpha_bar;  // alpha_bar[t] for t = 0..T, alpha_bar[0] = 1
  /// 1 − alpha_bar[t], accumulated without cancellation.
  std::vector<double> one_minus_alpha_bar;

  double beta_t(int t) const;
  double alpha_t(int t) const;
  /// Defined for 0 ≤ t ≤ T.
  double alpha_bar_t(int t) const;
};

NoiseSchedule make_schedule(int t_total, double beta_start, double beta_end);

std::vector<double> forward_sample(std::span<const double> y0, std::span<const double> y_hat0, int t,
                                   std::span<const double> eps, const NoiseSchedule& sched);

/// Interleaved (sin, cos) pairs at geometric frequencies 10000^(−2i/dim).
std::vector<double> timestep_embedding(int t, int dim = 64);

std::vector<double> predict_y0(std::span<const double> y_t, std::span<const double> eps_hat,
                               std::span<const double> y_hat0, int t, const NoiseSchedule& sched);

/// mean = gamma0·ỹ₀ + gamma1·y_t + gamma2·ŷ₀.
struct PosteriorCoefficients {
  double gamma0 = 0.0;
  double gamma1 = 0.0;
  double gamma2 = 0.0;
  double variance = 0.0;
};

struct Transition {
  double beta = 0.0;
  double alpha = 0.0;
  double alpha_bar_t = 0.0;
  double alpha_bar_prev = 1.0;
  double one_minus_t = 0.0;     // 1 − ᾱ_t
  double one_minus_prev = 0.0;  // 1 − ᾱ_prev
};

/// Coefficients for a transition from ᾱ_t back to ᾱ_prev.
PosteriorCoefficients posterior_coefficients(const Transition& tr);
PosteriorCoefficients posterior_coefficients(int t, const NoiseSchedule& sched);

struct Posterior {
  std::vector<double> mean;
  double variance = 0.0;
};

Posterior posterior_params(std::span<const double> y_t, std::span<const double> y0_tilde,
                           std::span<const double> y_hat0, int t, const NoiseSchedule& sched);

// ---- denoiser -----------------------------------------------------------------

struct DenoiserShape {
  int d_feat = 64;
  int k = 5;
  int temb_dim = 64;
  int hidden1 = 128;
  int hidden2 = 128;

  int input_dim() const { return d_feat + 3 * k + temb_dim; }
  /// e.g. "f:64|y_t:5|y_hat0:5|d:5|temb:64".
  std::string layout() const;
};

struct DenoiserNet {
  DenoiserShape shape;
  Matrix w1, b1;  // hidden1 × input, 1 × hidden1
  Matrix w2, b2;  // hidden2 × hidden1
  Matrix w3, b3;  // k × hidden2, zero at construction

  static DenoiserNet create(const DenoiserShape& shape, std::uint64_t seed);

  std::vector<Matrix*> params();
  std::vector<const Matrix*> params() const;

  /// Plain forward pass over rows of the concatenated conditioning input.
  Matrix forward(const Matrix& input) const;
  std::string fingerprint() const;
};

struct DenoiserGraph {
  Var w1, b1, w2, b2, w3, b3;
};

DenoiserGraph bind(Tape& tape, const DenoiserNet& net, bool trainable);
Var eps_forward(const DenoiserGraph& g, Var input);

/// Per-item conditioning, one row per item.
struct Conditioning {
  Matrix f;       // n × D
  Matrix y_hat0;  // n × K
  Matrix d;       // n × K

  std::size_t size() const { return f.rows(); }
  Conditioning subset(std::span<const std::size_t> rows) const;
};

/// Rows [f ∥ y_t ∥ ŷ₀ ∥ d ∥ temb(t_i)].
Matrix conditioning_input(const Conditioning& cond, const Matrix& y_t, std::span<const int> t, int temb_dim);

std::vector<double> eps_predict(const DenoiserNet& net, std::span<const double> f, std::span<const double> y_t,
                                std::span<const double> y_hat0, std::span<const double> d, int t);

/// Noise predictor over a batch: row i of the result is ε̂ for item i at t[i].
using EpsFn = std::function<Matrix(const Matrix& y_t, std::span<const int> t, const Conditioning& cond)>;

/// Wraps `net` (held by reference) as an EpsFn.
EpsFn eps_function(const DenoiserNet& net);

// ---- training objective ---------------------------------------------------------

struct DiffusionBatch {
  Conditioning cond;
  Matrix y0;                           // n × K one-hot
  std::vector<std::uint64_t> item_ids;  // keys the per-item noise substreams
};

struct NoisyBatch {
  std::vector<int> t;
  Matrix eps;
  Matrix y_t;
};

/// Draws t ~ U{1..T} and ε ~ N(0, I) for each item from the substream
/// (seed, step, item_id) and forms y_t.
NoisyBatch draw_noisy(const DiffusionBatch& batch, const NoiseSchedule& sched, std::uint64_t seed,
                      std::uint64_t step);

/// Mean over items and coordinates of (ε − ε̂)².
Var epsilon_loss(const DenoiserGraph& g, int temb_dim, const DiffusionBatch& batch, const NoiseSchedule& sched,
                 std::uint64_t seed, std::uint64_t step);
double epsilon_loss(const EpsFn& eps_fn, const DiffusionBatch& batch, const NoiseSchedule& sched,
                    std::uint64_t seed, std::uint64_t step);

// ---- sampling ---------------------------------------------------------------------

/// Timesteps visited by a chain, descending from T in steps of `stride`.
std::vector<int> chain_timesteps(int t_total, int stride);

/// Called with the starting y_T and after every step with the new state and
/// the timestep it now sits at (0 after the final step).
using StepObserver = std::function<void(int t, const Matrix& y)>;

/// One reverse transition for every row, using the full schedule (t → t−1).
Matrix reverse_step(const EpsFn& eps_fn, const Conditioning& cond, const Matrix& y_t, int t,
                    const NoiseSchedule& sched, std::span<Rng> rngs);

/// Runs the chain for every row; row i draws from rngs[i].
Matrix sample_chain(const EpsFn& eps_fn, const Conditioning& cond, const NoiseSchedule& sched,
                    std::span<Rng> rngs, int stride = 1, const StepObserver& observer = {});

// Single-item forms.
std::vector<double> reverse_step(const DenoiserNet& net, std::span<const double> f, std::span<const double> d,
                                 std::span<const double> y_hat0, std::span<const double> y_t, int t,
                                 const NoiseSchedule& sched, Rng& rng);
std::vector<double> sample_chain(const DenoiserNet& net, std::span<const double> f, std::span<const double> d,
                                 std::span<const double> y_hat0, const NoiseSchedule& sched, Rng& rng);

struct InferenceOptions {
  int n_samples = 5;
  int stride = 1;
  int threads = 1;
  std::uint64_t seed = 42;
};

struct InferenceResult {
  std::vector<int> grades;
  Matrix mean_vectors;  // average of the raw final chain states
  Matrix mean_probs;    // softmax of mean_vectors, for reporting
};

/// Chain s of item i draws from the substream (seed, item_ids[i], s), so the
/// result is independent of thread count and item order.
InferenceResult infer_labels(const EpsFn& eps_fn, const Conditioning& cond, std::span<const std::uint64_t> item_ids,
                             const NoiseSchedule& sched, const InferenceOptions& opts);

struct LabelEstimate {
  int grade = 0;
  std::vector<double> mean_probs;
};

LabelEstimate infer_label(const DenoiserNet& net, std::span<const double> f, std::span<const double> d,
                          std::span<const double> y_hat0, const NoiseSchedule& sched, int n_samples, Rng& rng);

// ---- checkpoint -----------------------------------------------------------------

inline constexpr const char* kDenoiserFormat = "cgsd-denoiser-v1";

struct DenoiserCheckpoint {
  DenoiserNet weights;
  DenoiserNet ema;  // shadow weights; these are used for inference
  double ema_mu = 0.0;
  long steps = 0;
  NoiseSchedule schedule;
};

void save_denoiser(const std::filesystem::path& path, const DenoiserCheckpoint& ckpt);
DenoiserCheckpoint load_denoiser(const std::filesystem::path& path);

}  // namespace cgsd
