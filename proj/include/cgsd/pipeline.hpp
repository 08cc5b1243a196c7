// SPDX-License-Identifier: Apache-2.0
//
// End-to-end orchestration: source-domain pretraining of the base encoder,
// stage-1 adaptation (LoRA + prompts) on the target train split, stage-2
// diffusion training against the frozen guidance model, evaluation, the
// three-row ablation and trajectory export.
//
// Every function is a pure function of its inputs and seeds. Training logs
// are emitted one line per epoch as `stage,epoch,lr,loss[,acc]`.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cgsd/analysis.hpp"
#include "cgsd/data.hpp"
#include "cgsd/diffusion.hpp"
#include "cgsd/guidance.hpp"

namespace cgsd {

using LogSink = std::function<void(const std::string& line)>;

struct PretrainConfig {
  int epochs = 30;
  int batch = 64;
  double lr = 1e-3;
};

struct Stage2Config {
  int t_total = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int epochs = 500;
  int batch = 32;
  double lr = 3e-4;
  double lr_min = 1e-5;
  double clip = 1.0;
  double ema_mu = 0.9999;
  int n_samples = 5;
  int stride = 1;
  int threads = 1;
};

struct RunConfig {
  GuidanceShape shape;
  PretrainConfig pretrain;
  GuidanceTrainConfig stage1;
  Stage2Config stage2;
  double train_fraction = 0.7;
  std::uint64_t seed = 42;
  bool desk_preset = false;
};

void validate(const RunConfig& cfg);

/// T=100 with β endpoints scaled ×10, 40 stage-1 and 60 stage-2 epochs.
RunConfig apply_desk_preset(RunConfig cfg);
/// Desk-scale benchmark: n = 1200, everything else as given.
SyntheticConfig apply_desk_preset(SyntheticConfig cfg);

/// Canonical JSON of every numeric setting.
std::string config_json(const RunConfig& cfg);
/// FNV-1a digest of config_json.
std::string config_digest(const RunConfig& cfg);

struct EpochLog {
  std::string stage;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> accuracy;

  std::string line() const;
};

// ---- data ---------------------------------------------------------------------

struct Benchmark {
  DomainPair domains;
  Split split;  // indices into domains.target
  Dataset target_train;
  Dataset target_test;
  std::string split_hash;
};

Benchmark make_benchmark(DomainPair domains, double train_fraction, std::uint64_t seed);
Benchmark load_benchmark(const std::filesystem::path& data_dir, double train_fraction, std::uint64_t seed);

// ---- training -------------------------------------------------------------------

/// Fits the base encoder, prompts and scale on the source domain with Adam.
/// The result stands in for a pretrained vision-language model.
GuidanceModel pretrain_base(const Dataset& source, const RunConfig& cfg, const LogSink& log = {});

/// Stage 1: RAdam on LoRA (lr_lora) and on prompts + log_scale (lr_prompt)
/// with a warm-up then cosine plan. The returned model is frozen.
GuidanceModel train_stage1(GuidanceModel base, const Dataset& target_train, const GuidanceTrainConfig& cfg,
                           const LogSink& log = {}, std::vector<EpochLog>* history = nullptr);

/// Inputs the denoiser sees for a dataset under a frozen guidance model.
Conditioning guidance_conditioning(const GuidanceModel& guidance, const Matrix& features);

/// Stage 2: Adam with clipping and an EMA shadow, the guidance model held
/// fixed. Throws ContractError unless the guidance model is frozen.
DenoiserCheckpoint train_stage2(const GuidanceModel& guidance, const Dataset& train, const Stage2Config& cfg,
                                std::uint64_t seed, const LogSink& log = {}, std::vector<EpochLog>* history = nullptr);

/// EMA decay used at update n (0-based): min(mu, (1+n)/(10+n)).
double ema_decay_at(long update, double mu);

// ---- evaluation -----------------------------------------------------------------

struct EvalReport {
  std::string mode;  // "zero-shot" or "diffusion"
  ClassificationMetrics metrics;
  std::vector<int> predictions;
  std::size_t n_eval = 0;
  std::uint64_t seed = 0;
  int n_samples = 0;
  std::string config_digest;
  std::string split_hash;
};

EvalReport evaluate(const GuidanceModel& guidance, const DenoiserCheckpoint* denoiser, const Dataset& test,
                    const RunConfig& cfg, const std::string& split_hash);

std::string report_json(const EvalReport& report);

struct AblationRow {
  std::string name;
  EvalReport report;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::string config_digest;
  std::string split_hash;
};

/// Row 1: pretrained base + prompts, zero-shot. Row 2: after stage 1.
/// Row 3: row 2 plus stage 2 and diffusion inference.
AblationReport ablate(const Benchmark& bench, const RunConfig& cfg, const LogSink& log = {});
std::string ablation_json(const AblationReport& report);

// ---- trajectory -----------------------------------------------------------------

struct TrajectoryPoint {
  int t = 0;
  std::size_t item_id = 0;
  int true_label = 0;
  double px = 0.0;
  double py = 0.0;
};

struct Trajectory {
  std::vector<int> steps;
  std::vector<double> silhouettes;  // one per step
  std::vector<TrajectoryPoint> points;
};

/// One seeded chain per test item; records y_t at each requested step and
/// projects each step's cloud to 2D.
Trajectory export_trajectory(const GuidanceModel& guidance, const DenoiserCheckpoint& denoiser, const Dataset& test,
                             std::span<const int> steps, const RunConfig& cfg);

/// Writes `t,item_id,true_label,px,py` rows to `path` and `t,silhouette` rows
/// to `path` + ".silhouette.csv".
void write_trajectory(const std::filesystem::path& path, const Trajectory& traj);

}  // namespace cgsd
