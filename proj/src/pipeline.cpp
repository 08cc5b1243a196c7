// SPDX-License-Identifier: Apache-2.0

#include "cgsd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "cgsd/digest.hpp"
#include "cgsd/errors.hpp"
#include "cgsd/optim.hpp"
#include "json.hpp"

namespace cgsd {

using ojson = nlohmann::ordered_json;

namespace {

constexpr double kReferenceAccuracy = 0.875;
constexpr double kReferenceMacroF1 = 0.731;

std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  return idx;
}

std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, int batch) {
  std::vector<std::vector<std::size_t>> out;
  const auto b = static_cast<std::size_t>(batch);
  for (std::size_t start = 0; start < order.size(); start += b) {
    const std::size_t end = std::min(order.size(), start + b);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<int> pick_labels(const std::vector<int>& labels, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels[i]);
  return out;
}

void require_finite(double loss, const std::string& stage, int epoch) {
  if (!std::isfinite(loss)) {
    throw NumericError(stage + ": non-finite loss at epoch " + std::to_string(epoch));
  }
}

void require_matching(const Dataset& ds, const GuidanceShape& shape) {
  if (ds.n <= 0) throw DataError("dataset is empty");
  if (ds.d_in != shape.d_in || ds.k != shape.k) {
    throw DataError("dataset has d_in=" + std::to_string(ds.d_in) + ", k=" + std::to_string(ds.k) +
                    " but the model expects d_in=" + std::to_string(shape.d_in) + ", k=" + std::to_string(shape.k));
  }
}

double batch_accuracy(const Matrix& d, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (argmax_first(d.row(i)) == labels[i]) ++hits;
  }
  return static_cast<double>(hits);
}

void emit(const LogSink& log, std::vector<EpochLog>* history, EpochLog entry) {
  if (log) log(entry.line());
  if (history) history->push_back(std::move(entry));
}

LrPlan stage_plan(double base, int epochs, int warmup, double warmup_start) {
  LrPlan plan;
  plan.base_lr = base;
  plan.min_lr = 0.01 * base;
  plan.warmup_start_lr = std::min(warmup_start, base);
  plan.total_epochs = epochs;
  plan.warmup_epochs = std::min(warmup, epochs - 1);
  validate(plan);
  return plan;
}

ojson metrics_json(const EvalReport& r) {
  ojson doc;
  doc["mode"] = r.mode;
  doc["accuracy"] = r.metrics.accuracy;
  doc["macro_f1"] = r.metrics.macro_f1;
  doc["per_class_f1"] = r.metrics.per_class_f1;
  doc["confusion"] = r.metrics.confusion.as_rows();
  doc["n_eval"] = r.n_eval;
  doc["n_samples"] = r.n_samples;
  doc["seed"] = r.seed;
  doc["config_digest"] = r.config_digest;
  doc["split_hash"] = r.split_hash;
  return doc;
}

}  // namespace

// ---- configuration ----------------------------------------------------------------

void validate(const RunConfig& cfg) {
  validate_lora(cfg.shape.hidden, cfg.shape.d_feat, cfg.shape.rank, cfg.shape.alpha);
  if (cfg.shape.d_in < 1 || cfg.shape.hidden < 1 || cfg.shape.d_feat < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (cfg.shape.k < 2) throw ConfigError("at least two grades are required");
  if (cfg.pretrain.epochs < 0 || cfg.pretrain.batch < 1 || !(cfg.pretrain.lr > 0)) {
    throw ConfigError("pretraining needs epochs >= 0, batch >= 1 and lr > 0");
  }
  validate(cfg.stage1);
  const Stage2Config& s = cfg.stage2;
  if (s.t_total < 1) throw ConfigError("diffusion steps must be at least 1");
  if (!(s.beta_start > 0) || !(s.beta_end >= s.beta_start) || !(s.beta_end < 1)) {
    throw ConfigError("need 0 < beta_start <= beta_end < 1");
  }
  if (s.epochs < 0 || s.batch < 1) throw ConfigError("stage 2 needs epochs >= 0 and batch >= 1");
  if (!(s.lr > 0) || !(s.lr_min > 0) || s.lr_min > s.lr) throw ConfigError("stage 2 needs 0 < lr_min <= lr");
  if (!(s.clip > 0)) throw ConfigError("gradient clip must be positive");
  if (!(s.ema_mu >= 0 && s.ema_mu <= 1)) throw ConfigError("ema decay must lie in [0, 1]");
  if (s.n_samples < 1) throw ConfigError("n_samples must be at least 1");
  if (s.stride < 1 || s.stride > s.t_total) throw ConfigError("stride must lie in [1, T]");
  if (s.threads < 1) throw ConfigError("threads must be at least 1");
  if (!(cfg.train_fraction > 0 && cfg.train_fraction < 1)) throw ConfigError("train fraction must lie in (0, 1)");
}

RunConfig apply_desk_preset(RunConfig cfg) {
  cfg.desk_preset = true;
  cfg.stage2.t_total = 100;
  cfg.stage2.beta_start = 1e-3;
  cfg.stage2.beta_end = 0.2;
  cfg.stage1.epochs = 40;
  cfg.stage2.epochs = 60;
  return cfg;
}

SyntheticConfig apply_desk_preset(SyntheticConfig cfg) {
  cfg.n = 1200;
  return cfg;
}

std::string config_json(const RunConfig& cfg) {
  ojson doc;
  doc["shape"] = {{"d_in", cfg.shape.d_in},     {"hidden", cfg.shape.hidden}, {"d_feat", cfg.shape.d_feat},
                  {"k", cfg.shape.k},           {"rank", cfg.shape.rank},     {"alpha", cfg.shape.alpha}};
  doc["pretrain"] = {{"epochs", cfg.pretrain.epochs}, {"batch", cfg.pretrain.batch}, {"lr", cfg.pretrain.lr}};
  const GuidanceTrainConfig& g = cfg.stage1;
  doc["stage1"] = {{"lambda_rank", g.lambda_rank}, {"margin", g.margin},
                   {"lr_lora", g.lr_lora},         {"lr_prompt", g.lr_prompt},
                   {"epochs", g.epochs},           {"batch", g.batch},
                   {"warmup_epochs", g.warmup_epochs}, {"warmup_start_lr", g.warmup_start_lr},
                   {"seed", g.seed}};
  const Stage2Config& s = cfg.stage2;
  doc["stage2"] = {{"t_total", s.t_total}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end},
                   {"epochs", s.epochs},   {"batch", s.batch},           {"lr", s.lr},
                   {"lr_min", s.lr_min},   {"clip", s.clip},             {"ema_mu", s.ema_mu},
                   {"n_samples", s.n_samples}, {"stride", s.stride}};
  doc["train_fraction"] = cfg.train_fraction;
  doc["seed"] = cfg.seed;
  doc["desk_preset"] = cfg.desk_preset;
  return doc.dump();
}

std::string config_digest(const RunConfig& cfg) { return Fnv1a().text(config_json(cfg)).hex(); }

std::string EpochLog::line() const {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s,%d,%.6g,%.6f", stage.c_str(), epoch, lr, loss);
  std::string out(buf);
  if (accuracy) {
    std::snprintf(buf, sizeof(buf), ",%.4f", *accuracy);
    out += buf;
  }
  return out;
}

// ---- data ---------------------------------------------------------------------

Benchmark make_benchmark(DomainPair domains, double train_fraction, std::uint64_t seed) {
  Benchmark b;
  b.split = stratified_split(domains.target, train_fraction, seed);
  b.target_train = domains.target.subset(b.split.train);
  b.target_test = domains.target.subset(b.split.test);
  Fnv1a h;
  h.values(std::span<const std::size_t>(b.split.train)).text("|").values(std::span<const std::size_t>(b.split.test));
  b.split_hash = h.hex();
  b.domains = std::move(domains);
  return b;
}

Benchmark load_benchmark(const std::filesystem::path& data_dir, double train_fraction, std::uint64_t seed) {
  return make_benchmark(read_benchmark(data_dir), train_fraction, seed);
}

// ---- training -------------------------------------------------------------------

GuidanceModel pretrain_base(const Dataset& source, const RunConfig& cfg, const LogSink& log) {
  validate(cfg);
  require_matching(source, cfg.shape);
  GuidanceModel model = GuidanceModel::create(cfg.shape, cfg.seed);
  AdamState state;
  const auto n = static_cast<std::size_t>(source.n);
  for (int epoch = 0; epoch < cfg.pretrain.epochs; ++epoch) {
    const auto order = shuffled(n, Rng::stream(cfg.seed, {0x7072, static_cast<std::uint64_t>(epoch)}));
    double loss_sum = 0.0;
    double hits = 0.0;
    for (const auto& idx : batches_of(order, cfg.pretrain.batch)) {
      const std::vector<int> labels = pick_labels(source.labels, idx);
      Tape tape;
      const GuidanceGraph g = bind(tape, model, Trainable::kEverything);
      const Var x = tape.constant(source.features.select_rows(idx));
      const Var loss = guidance_loss(g, x, labels, cfg.stage1);
      require_finite(loss.value()[0], "pretrain", epoch);
      tape.backward(loss);
      loss_sum += loss.value()[0] * static_cast<double>(idx.size());
      hits += batch_accuracy(semantic_scores(g, encode_features(g, x)).value(), labels);
      Matrix* params[] = {&model.w1, &model.b1, &model.w2, &model.b2, &model.prompts, &model.log_scale};
      const Matrix grads[] = {tape.grad(g.w1),      tape.grad(g.b1),      tape.grad(g.w2),
                              tape.grad(g.b2),      tape.grad(g.prompts), tape.grad(g.log_scale)};
      adam_step(params, grads, state, cfg.pretrain.lr);
    }
    emit(log, nullptr,
         {"pretrain", epoch, cfg.pretrain.lr, loss_sum / static_cast<double>(n), hits / static_cast<double>(n)});
  }
  model.stage = "pretrained";
  return model;
}

GuidanceModel train_stage1(GuidanceModel model, const Dataset& train, const GuidanceTrainConfig& cfg,
                           const LogSink& log, std::vector<EpochLog>* history) {
  validate(cfg);
  require_matching(train, model.shape);
  if (model.frozen) throw ContractError("stage 1 needs an unfrozen guidance model");
  const auto n = static_cast<std::size_t>(train.n);
  if (cfg.epochs > 0) {
    const LrPlan lora_plan = stage_plan(cfg.lr_lora, cfg.epochs, cfg.warmup_epochs, cfg.warmup_start_lr);
    const LrPlan prompt_plan = stage_plan(cfg.lr_prompt, cfg.epochs, cfg.warmup_epochs, cfg.warmup_start_lr);
    AdamState lora_state;
    AdamState prompt_state;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      const double lr_lora = lr_at(epoch, lora_plan);
      const double lr_prompt = lr_at(epoch, prompt_plan);
      const auto order = shuffled(n, Rng::stream(cfg.seed, {0x5431, static_cast<std::uint64_t>(epoch)}));
      double loss_sum = 0.0;
      double hits = 0.0;
      for (const auto& idx : batches_of(order, cfg.batch)) {
        const std::vector<int> labels = pick_labels(train.labels, idx);
        Tape tape;
        const GuidanceGraph g = bind(tape, model, Trainable::kAdapterAndPrompts);
        const Var x = tape.constant(train.features.select_rows(idx));
        const Var loss = guidance_loss(g, x, labels, cfg);
        require_finite(loss.value()[0], "stage1", epoch);
        tape.backward(loss);
        loss_sum += loss.value()[0] * static_cast<double>(idx.size());
        hits += batch_accuracy(semantic_scores(g, encode_features(g, x)).value(), labels);

        Matrix* lora_params[] = {&model.adapter.a, &model.adapter.b};
        const Matrix lora_grads[] = {tape.grad(g.a), tape.grad(g.b)};
        radam_step(lora_params, lora_grads, lora_state, lr_lora);
        Matrix* prompt_params[] = {&model.prompts, &model.log_scale};
        const Matrix prompt_grads[] = {tape.grad(g.prompts), tape.grad(g.log_scale)};
        radam_step(prompt_params, prompt_grads, prompt_state, lr_prompt);
      }
      emit(log, history,
           {"stage1", epoch, lr_lora, loss_sum / static_cast<double>(n), hits / static_cast<double>(n)});
    }
  }
  model.frozen = true;
  model.stage = "adapted";
  return model;
}

Conditioning guidance_conditioning(const GuidanceModel& guidance, const Matrix& features) {
  GuidanceOutputs out = run_guidance(guidance, features);
  return Conditioning{std::move(out.features), std::move(out.prior), std::move(out.d)};
}

double ema_decay_at(long update, double mu) {
  const double n = static_cast<double>(update);
  return std::min(mu, (1.0 + n) / (10.0 + n));
}

DenoiserCheckpoint train_stage2(const GuidanceModel& guidance, const Dataset& train, const Stage2Config& cfg,
                                std::uint64_t seed, const LogSink& log, std::vector<EpochLog>* history) {
  if (!guidance.frozen) throw ContractError("stage 2 needs a frozen guidance model");
  require_matching(train, guidance.shape);
  RunConfig check;
  check.shape = guidance.shape;
  check.stage2 = cfg;
  validate(check);

  DenoiserCheckpoint ckpt;
  ckpt.schedule = make_schedule(cfg.t_total, cfg.beta_start, cfg.beta_end);
  DenoiserShape shape;
  shape.d_feat = guidance.shape.d_feat;
  shape.k = guidance.shape.k;
  ckpt.weights = DenoiserNet::create(shape, seed);
  ckpt.ema = ckpt.weights;
  ckpt.ema_mu = cfg.ema_mu;

  DiffusionBatch all;
  all.cond = guidance_conditioning(guidance, train.features);
  const auto n = static_cast<std::size_t>(train.n);
  const auto k = static_cast<std::size_t>(shape.k);
  all.y0 = Matrix(n, k);
  for (std::size_t i = 0; i < n; ++i) all.y0(i, static_cast<std::size_t>(train.labels[i])) = 1.0;

  EmaState ema = EmaState::track(ckpt.weights.params(), cfg.ema_mu);
  AdamState state;
  LrPlan plan;
  plan.base_lr = cfg.lr;
  plan.min_lr = cfg.lr_min;
  plan.warmup_start_lr = cfg.lr;
  plan.total_epochs = std::max(cfg.epochs, 1);
  validate(plan);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, plan);
    const auto order = shuffled(n, Rng::stream(seed, {0x5742, static_cast<std::uint64_t>(epoch)}));
    double loss_sum = 0.0;
    for (const auto& idx : batches_of(order, cfg.batch)) {
      DiffusionBatch batch;
      batch.cond = all.cond.subset(idx);
      batch.y0 = all.y0.select_rows(idx);
      batch.item_ids.assign(idx.begin(), idx.end());
      Tape tape;
      const DenoiserGraph g = bind(tape, ckpt.weights, true);
      const Var loss = epsilon_loss(g, shape.temb_dim, batch, ckpt.schedule, seed,
                                    static_cast<std::uint64_t>(ckpt.steps));
      require_finite(loss.value()[0], "stage2", epoch);
      tape.backward(loss);
      loss_sum += loss.value()[0] * static_cast<double>(idx.size());
      std::vector<Matrix> grads{tape.grad(g.w1), tape.grad(g.b1), tape.grad(g.w2),
                                tape.grad(g.b2), tape.grad(g.w3), tape.grad(g.b3)};
      clip_grad_norm(grads, cfg.clip);
      const std::vector<Matrix*> params = ckpt.weights.params();
      adam_step(params, grads, state, lr);
      const std::vector<const Matrix*> view(params.begin(), params.end());
      ema_update(ema, view, ema_decay_at(ckpt.steps, cfg.ema_mu));
      ++ckpt.steps;
    }
    emit(log, history, {"stage2", epoch, lr, loss_sum / static_cast<double>(n), std::nullopt});
  }

  const std::vector<Matrix*> shadow = ckpt.ema.params();
  for (std::size_t i = 0; i < shadow.size(); ++i) *shadow[i] = ema.shadow[i];
  return ckpt;
}

// ---- evaluation -----------------------------------------------------------------

EvalReport evaluate(const GuidanceModel& guidance, const DenoiserCheckpoint* denoiser, const Dataset& test,
                    const RunConfig& cfg, const std::string& split_hash) {
  require_matching(test, guidance.shape);
  EvalReport r;
  r.n_eval = static_cast<std::size_t>(test.n);
  r.seed = cfg.seed;
  r.config_digest = config_digest(cfg);
  r.split_hash = split_hash;
  if (denoiser == nullptr) {
    r.mode = "zero-shot";
    r.predictions = zero_shot_predict(test.features, guidance);
  } else {
    if (denoiser->weights.shape.d_feat != guidance.shape.d_feat || denoiser->weights.shape.k != guidance.shape.k) {
      throw DataError("denoiser checkpoint does not match the guidance model dimensions");
    }
    r.mode = "diffusion";
    r.n_samples = cfg.stage2.n_samples;
    const Conditioning cond = guidance_conditioning(guidance, test.features);
    std::vector<std::uint64_t> ids(r.n_eval);
    std::iota(ids.begin(), ids.end(), std::uint64_t{0});
    InferenceOptions opts;
    opts.n_samples = cfg.stage2.n_samples;
    opts.stride = cfg.stage2.stride;
    opts.threads = cfg.stage2.threads;
    opts.seed = cfg.seed;
    r.predictions = infer_labels(eps_function(denoiser->ema), cond, ids, denoiser->schedule, opts).grades;
  }
  r.metrics = confusion_and_metrics(r.predictions, test.labels, test.k);
  return r;
}

std::string report_json(const EvalReport& report) {
  ojson doc = metrics_json(report);
  doc["paper_reference"] = {{"accuracy", kReferenceAccuracy}, {"macro_f1", kReferenceMacroF1}};
  return doc.dump(2) + "\n";
}

AblationReport ablate(const Benchmark& bench, const RunConfig& cfg, const LogSink& log) {
  validate(cfg);
  AblationReport out;
  out.config_digest = config_digest(cfg);
  out.split_hash = bench.split_hash;

  GuidanceModel base = pretrain_base(bench.domains.source, cfg, log);
  GuidanceModel frozen_base = base;
  frozen_base.frozen = true;
  out.rows.push_back({"pretrained zero-shot", evaluate(frozen_base, nullptr, bench.target_test, cfg, bench.split_hash)});

  const GuidanceModel adapted = train_stage1(std::move(base), bench.target_train, cfg.stage1, log);
  out.rows.push_back({"+ LoRA adaptation", evaluate(adapted, nullptr, bench.target_test, cfg, bench.split_hash)});

  const DenoiserCheckpoint ckpt = train_stage2(adapted, bench.target_train, cfg.stage2, cfg.seed, log);
  out.rows.push_back({"+ diffusion", evaluate(adapted, &ckpt, bench.target_test, cfg, bench.split_hash)});
  return out;
}

std::string ablation_json(const AblationReport& report) {
  static constexpr double kRefAcc[] = {0.773, 0.847, 0.875};
  static constexpr double kRefF1[] = {0.540, 0.686, 0.731};
  ojson doc;
  doc["config_digest"] = report.config_digest;
  doc["split_hash"] = report.split_hash;
  ojson rows = ojson::array();
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    ojson row;
    row["name"] = report.rows[i].name;
    row["metrics"] = metrics_json(report.rows[i].report);
    if (i < 3) row["paper_reference"] = {{"accuracy", kRefAcc[i]}, {"macro_f1", kRefF1[i]}};
    rows.push_back(std::move(row));
  }
  doc["rows"] = std::move(rows);
  return doc.dump(2) + "\n";
}

// ---- trajectory -----------------------------------------------------------------

Trajectory export_trajectory(const GuidanceModel& guidance, const DenoiserCheckpoint& denoiser, const Dataset& test,
                             std::span<const int> steps, const RunConfig& cfg) {
  if (steps.empty()) throw ConfigError("at least one trajectory step is required");
  require_matching(test, guidance.shape);
  const int stride = cfg.stage2.stride;
  if (stride < 1 || stride > denoiser.schedule.t_total) throw ConfigError("stride must lie in [1, T]");
  std::vector<int> visited = chain_timesteps(denoiser.schedule.t_total, stride);
  visited.push_back(0);
  const std::set<int> reachable(visited.begin(), visited.end());
  for (int t : steps) {
    if (!reachable.count(t)) {
      throw ConfigError("trajectory step " + std::to_string(t) + " is not visited by the chain");
    }
  }

  const Conditioning cond = guidance_conditioning(guidance, test.features);
  const auto n = static_cast<std::size_t>(test.n);
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rngs.push_back(Rng::stream(cfg.seed, {0x7a1, i}));

  std::vector<std::pair<int, Matrix>> snapshots;
  const std::set<int> wanted(steps.begin(), steps.end());
  const StepObserver observer = [&](int t, const Matrix& y) {
    if (wanted.count(t)) snapshots.emplace_back(t, y);
  };
  sample_chain(eps_function(denoiser.ema), cond, denoiser.schedule, rngs, stride, observer);

  Trajectory traj;
  for (int t : steps) {
    const auto it = std::find_if(snapshots.begin(), snapshots.end(), [t](const auto& s) { return s.first == t; });
    const Matrix proj = pca_project_2d(it->second);
    traj.steps.push_back(t);
    traj.silhouettes.push_back(silhouette_score(it->second, test.labels));
    for (std::size_t i = 0; i < n; ++i) {
      traj.points.push_back({t, i, test.labels[i], proj(i, 0), proj(i, 1)});
    }
  }
  return traj;
}

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "t,item_id,true_label,px,py\n";
  for (const TrajectoryPoint& p : traj.points) {
    out << p.t << ',' << p.item_id << ',' << p.true_label << ',' << format_double(p.px) << ','
        << format_double(p.py) << '\n';
  }
  std::filesystem::path side = path;
  side += ".silhouette.csv";
  std::ofstream sil(side);
  if (!sil) throw DataError("cannot write " + side.string());
  sil << "t,silhouette\n";
  for (std::size_t i = 0; i < traj.steps.size(); ++i) {
    sil << traj.steps[i] << ',' << format_double(traj.silhouettes[i]) << '\n';
  }
  if (!out || !sil) throw DataError("write failed for " + path.string());
}

}  // namespace cgsd
