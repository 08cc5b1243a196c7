// SPDX-License-Identifier: Apache-2.0
//
// Stage-1 guidance model: a frozen two-layer feature encoder whose output
// projection carries a LoRA adapter, plus learnable per-grade prompt
// embeddings. The semantic vector d holds the cosine similarity of the image
// feature with each grade prompt; its temperature-scaled softmax is the prior
// mean ŷ₀ of the label diffusion.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cgsd/numkit.hpp"
#include "cgsd/rng.hpp"

namespace cgsd {

/// ΔW = (alpha/rank)·B·A with A: rank×d_in and B: d_out×rank.
struct LoraAdapter {
  Matrix a;
  Matrix b;
  int rank = 0;
  double alpha = 0.0;

  double scale() const { return alpha / rank; }
  Matrix increment() const;

  /// B starts at zero so that the adapted layer initially equals the frozen one.
  static LoraAdapter create(int d_in, int d_out, int rank, double alpha, Rng& rng);
};

void validate_lora(int d_in, int d_out, int rank, double alpha);

/// W·x + (alpha/r)·B·(A·x) for a column vector x.
Matrix lora_forward(const Matrix& x, const Matrix& w_frozen, const LoraAdapter& adapter);
/// Row-batched form on a tape: x·Wᵀ + s·(x·Aᵀ)·Bᵀ.
Var lora_forward(Var x_rows, Var w_frozen, Var a, Var b, double scale);

struct GuidanceShape {
  int d_in = 64;
  int hidden = 128;
  int d_feat = 64;
  int k = 5;
  int rank = 8;
  double alpha = 16.0;
};

inline constexpr double kMaxLogitScale = 100.0;
inline constexpr double kNormEps = 1e-8;

struct GuidanceModel {
  GuidanceShape shape;
  Matrix w1;  // hidden × d_in
  Matrix b1;  // 1 × hidden
  Matrix w2;  // d_feat × hidden, carries the adapter
  Matrix b2;  // 1 × d_feat
  LoraAdapter adapter;
  Matrix prompts;    // k × d_feat, normalized on use
  Matrix log_scale;  // 1 × 1
  bool frozen = false;
  std::string stage = "initialized";

  static GuidanceModel create(const GuidanceShape& shape, std::uint64_t seed);

  /// exp(log_scale) capped at kMaxLogitScale.
  double logit_scale() const;
  /// Digest of w1, b1, w2, b2.
  std::string base_fingerprint() const;
  /// Digest of every weight including adapter, prompts and scale.
  std::string full_fingerprint() const;
};

/// Which weights become tape parameters for a forward pass.
enum class Trainable {
  kNone,
  kEverything,        // source-domain pretraining
  kAdapterAndPrompts  // stage 1: LoRA A/B, prompts, log_scale
};

struct GuidanceGraph {
  Var w1, b1, w2, b2, a, b, prompts, log_scale;
  double lora_scale = 0.0;
};

GuidanceGraph bind(Tape& tape, const GuidanceModel& model, Trainable trainable);

Var encode_features(const GuidanceGraph& g, Var x);
/// d = f · normalize_rows(prompts)ᵀ.
Var semantic_scores(const GuidanceGraph& g, Var f);
Var logit_scale(const GuidanceGraph& g);

/// Mean cross-entropy of softmax(scale·d) against the labels.
Var contrastive_loss(Var d, std::span<const int> labels, Var scale);
/// Pairwise ordinal hinge: for a sample of grade k, every pair (a, b) with
/// |a−k| < |b−k| should satisfy d_a − d_b ≥ margin. Averaged over the pairs
/// of each sample, then over the batch.
Var ranking_loss(Var d, std::span<const int> labels, double margin);

struct GuidanceTrainConfig {
  double lambda_rank = 1.0;
  double margin = 0.05;
  double lr_lora = 1e-4;
  double lr_prompt = 2e-3;
  int epochs = 22;
  int batch = 64;
  int warmup_epochs = 3;
  double warmup_start_lr = 1e-5;
  std::uint64_t seed = 42;
};

void validate(const GuidanceTrainConfig& cfg);

/// L_main + λ·L_rank on one batch of raw features.
Var guidance_loss(const GuidanceGraph& g, Var x, std::span<const int> labels, const GuidanceTrainConfig& cfg);

// ---- inference (untaped) ----------------------------------------------------

struct SemanticVector {
  std::vector<double> d;
  std::vector<double> prior;
};

struct GuidanceOutputs {
  Matrix features;  // n × d_feat, unit rows
  Matrix d;         // n × k
  Matrix prior;     // n × k
  std::size_t degenerate_norms = 0;
};

GuidanceOutputs run_guidance(const GuidanceModel& model, const Matrix& x);
Matrix encode_feature(const Matrix& x_rows, const GuidanceModel& model);
SemanticVector semantic_vector(std::span<const double> f, const GuidanceModel& model);

int zero_shot_predict(std::span<const double> x, const GuidanceModel& model);
std::vector<int> zero_shot_predict(const Matrix& x_rows, const GuidanceModel& model);

double contrastive_loss(const Matrix& d, std::span<const int> labels, double scale);
double ranking_loss(const Matrix& d, std::span<const int> labels, double margin);

// ---- checkpoint ---------------------------------------------------------------

inline constexpr const char* kGuidanceFormat = "cgsd-guidance-v1";

void save_guidance(const std::filesystem::path& path, const GuidanceModel& model);
GuidanceModel load_guidance(const std::filesystem::path& path);

}  // namespace cgsd
