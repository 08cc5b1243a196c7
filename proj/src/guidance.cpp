// SPDX-License-Identifier: Apache-2.0

#include "cgsd/guidance.hpp"

#include <algorithm>
#include <cmath>

#include "cgsd/digest.hpp"
#include "cgsd/errors.hpp"
#include "json_io.hpp"

namespace cgsd {

using nlohmann::json;

namespace {

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = (2.0 * rng.uniform() - 1.0) * bound;
  return m;
}

void check_labels(std::span<const int> labels, std::size_t batch, std::size_t k) {
  if (labels.size() != batch) {
    throw DataError("label count " + std::to_string(labels.size()) + " does not match batch " +
                    std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw DataError("label " + std::to_string(y) + " out of range [0," + std::to_string(k) + ")");
    }
  }
}

void validate_shape(const GuidanceShape& s) {
  if (s.d_in < 1 || s.hidden < 1 || s.d_feat < 1) throw ConfigError("guidance dimensions must be positive");
  if (s.k < 2) throw ConfigError("guidance model needs at least 2 grades, got " + std::to_string(s.k));
  validate_lora(s.hidden, s.d_feat, s.rank, s.alpha);
}

void hash_matrix(Fnv1a& h, const Matrix& m) {
  const std::uint64_t dims[2] = {m.rows(), m.cols()};
  h.bytes(dims, sizeof dims);
  h.values(m.values());
}

}  // namespace

// ---- LoRA ---------------------------------------------------------------------

void validate_lora(int d_in, int d_out, int rank, double alpha) {
  if (rank < 1 || rank > std::min(d_in, d_out)) {
    throw ConfigError("LoRA rank must lie in [1, " + std::to_string(std::min(d_in, d_out)) + "], got " +
                      std::to_string(rank));
  }
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("LoRA alpha must be positive");
}

Matrix LoraAdapter::increment() const {
  Matrix delta = matmul(b, a);
  for (double& v : delta.values()) v *= scale();
  return delta;
}

LoraAdapter LoraAdapter::create(int d_in, int d_out, int rank, double alpha, Rng& rng) {
  validate_lora(d_in, d_out, rank, alpha);
  LoraAdapter ad;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.a = uniform_matrix(rank, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
  ad.b = Matrix(d_out, rank);
  return ad;
}

Matrix lora_forward(const Matrix& x, const Matrix& w_frozen, const LoraAdapter& adapter) {
  validate_lora(static_cast<int>(w_frozen.cols()), static_cast<int>(w_frozen.rows()), adapter.rank,
                adapter.alpha);
  if (x.cols() != 1 || x.rows() != w_frozen.cols()) {
    throw DimensionError("lora_forward: x " + x.shape_string() + " against W " + w_frozen.shape_string());
  }
  if (adapter.a.rows() != static_cast<std::size_t>(adapter.rank) || adapter.a.cols() != w_frozen.cols() ||
      adapter.b.rows() != w_frozen.rows() || adapter.b.cols() != static_cast<std::size_t>(adapter.rank)) {
    throw DimensionError("lora_forward: adapter A " + adapter.a.shape_string() + ", B " +
                         adapter.b.shape_string() + " do not fit W " + w_frozen.shape_string());
  }
  Matrix out = matmul(w_frozen, x);
  const Matrix low = matmul(adapter.b, matmul(adapter.a, x));
  const double s = adapter.scale();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * low[i];
  return out;
}

Var lora_forward(Var x_rows, Var w_frozen, Var a, Var b, double scale_factor) {
  return add(matmul_nt(x_rows, w_frozen), scale(matmul_nt(matmul_nt(x_rows, a), b), scale_factor));
}

// ---- model --------------------------------------------------------------------

GuidanceModel GuidanceModel::create(const GuidanceShape& shape, std::uint64_t seed) {
  validate_shape(shape);
  GuidanceModel m;
  m.shape = shape;
  Rng base = Rng::stream(seed, {0x6775, 1});
  m.w1 = uniform_matrix(shape.hidden, shape.d_in, 1.0 / std::sqrt(static_cast<double>(shape.d_in)), base);
  m.b1 = Matrix(1, shape.hidden);
  m.w2 = uniform_matrix(shape.d_feat, shape.hidden, 1.0 / std::sqrt(static_cast<double>(shape.hidden)), base);
  m.b2 = Matrix(1, shape.d_feat);
  Rng lora = Rng::stream(seed, {0x6775, 2});
  m.adapter = LoraAdapter::create(shape.hidden, shape.d_feat, shape.rank, shape.alpha, lora);
  Rng prompt = Rng::stream(seed, {0x6775, 3});
  m.prompts = Matrix(shape.k, shape.d_feat);
  for (double& v : m.prompts.values()) v = prompt.normal();
  m.log_scale = Matrix(1, 1, std::log(1.0 / 0.07));
  return m;
}

double GuidanceModel::logit_scale() const { return std::min(std::exp(log_scale[0]), kMaxLogitScale); }

std::string GuidanceModel::base_fingerprint() const {
  Fnv1a h;
  for (const Matrix* m : {&w1, &b1, &w2, &b2}) hash_matrix(h, *m);
  return h.hex();
}

std::string GuidanceModel::full_fingerprint() const {
  Fnv1a h;
  for (const Matrix* m : {&w1, &b1, &w2, &b2, &adapter.a, &adapter.b, &prompts, &log_scale}) hash_matrix(h, *m);
  return h.hex();
}

GuidanceGraph bind(Tape& tape, const GuidanceModel& model, Trainable trainable) {
  if (model.frozen && trainable != Trainable::kNone) {
    throw ContractError("guidance model is frozen; it cannot be bound for training");
  }
  const bool base = trainable == Trainable::kEverything;
  const bool adapter = trainable == Trainable::kAdapterAndPrompts;
  const bool prompts = trainable != Trainable::kNone;
  auto leaf = [&](const Matrix& m, bool train) { return train ? tape.parameter(m) : tape.constant(m); };
  GuidanceGraph g;
  g.w1 = leaf(model.w1, base);
  g.b1 = leaf(model.b1, base);
  g.w2 = leaf(model.w2, base);
  g.b2 = leaf(model.b2, base);
  g.a = leaf(model.adapter.a, adapter);
  g.b = leaf(model.adapter.b, adapter);
  g.prompts = leaf(model.prompts, prompts);
  g.log_scale = leaf(model.log_scale, prompts);
  g.lora_scale = model.adapter.scale();
  return g;
}

Var encode_features(const GuidanceGraph& g, Var x) {
  const Var h = smooth_nonlinearity(add_row(matmul_nt(x, g.w1), g.b1));
  const Var z = add_row(lora_forward(h, g.w2, g.a, g.b, g.lora_scale), g.b2);
  return l2_normalize_rows(z, kNormEps);
}

Var semantic_scores(const GuidanceGraph& g, Var f) {
  return matmul_nt(f, l2_normalize_rows(g.prompts, kNormEps));
}

Var logit_scale(const GuidanceGraph& g) { return clamped_exp(g.log_scale, kMaxLogitScale); }

// ---- losses -------------------------------------------------------------------

Var contrastive_loss(Var d, std::span<const int> labels, Var scale_var) {
  check_labels(labels, d.rows(), d.cols());
  if (!std::isfinite(scale_var.value()[0])) throw NumericError("contrastive_loss: non-finite logit scale");
  if (!(scale_var.value()[0] > 0.0)) throw ContractError("contrastive_loss: scale must be positive");
  const Var picked = pick_columns(log_softmax_rows(scale_by(d, scale_var)), labels);
  return scale(mean(picked), -1.0);
}

Var ranking_loss(Var d, std::span<const int> labels, double margin) {
  if (!(margin >= 0.0)) throw ConfigError("ranking margin must be nonnegative");
  const std::size_t batch = d.rows();
  const std::size_t k = d.cols();
  check_labels(labels, batch, k);

  // Column p of `pairs` is e_a − e_b for the ordered pair (a, b), so d·pairs
  // yields every difference d_a − d_b at once.
  std::vector<std::pair<int, int>> ordered;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      if (a != b) ordered.emplace_back(static_cast<int>(a), static_cast<int>(b));
    }
  }
  Tape& tape = *d.tape;
  if (ordered.empty()) return tape.constant(Matrix(1, 1));
  Matrix pairs(k, ordered.size());
  for (std::size_t p = 0; p < ordered.size(); ++p) {
    pairs(ordered[p].first, p) = 1.0;
    pairs(ordered[p].second, p) = -1.0;
  }
  Matrix weights(batch, ordered.size());
  for (std::size_t i = 0; i < batch; ++i) {
    const int y = labels[i];
    std::vector<std::size_t> active;
    for (std::size_t p = 0; p < ordered.size(); ++p) {
      if (std::abs(ordered[p].first - y) < std::abs(ordered[p].second - y)) active.push_back(p);
    }
    for (std::size_t p : active) weights(i, p) = 1.0 / (static_cast<double>(active.size()) * batch);
  }
  const Var diffs = matmul(d, tape.constant(std::move(pairs)));
  const Var hinge = relu(add_scalar(scale(diffs, -1.0), margin));
  return sum(hadamard(hinge, tape.constant(std::move(weights))));
}

void validate(const GuidanceTrainConfig& cfg) {
  if (!(cfg.lambda_rank >= 0.0)) throw ConfigError("lambda_rank must be nonnegative");
  if (!(cfg.margin >= 0.0)) throw ConfigError("margin must be nonnegative");
  if (!(cfg.lr_lora > 0.0) || !(cfg.lr_prompt > 0.0)) throw ConfigError("learning rates must be positive");
  if (cfg.epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (cfg.batch < 1) throw ConfigError("batch must be at least 1");
  if (cfg.warmup_epochs < 0) throw ConfigError("warmup epochs must be nonnegative");
  if (!(cfg.warmup_start_lr > 0.0)) throw ConfigError("warmup start lr must be positive");
}

Var guidance_loss(const GuidanceGraph& g, Var x, std::span<const int> labels, const GuidanceTrainConfig& cfg) {
  if (x.rows() == 0) throw ContractError("guidance_loss: empty batch");
  const Var d = semantic_scores(g, encode_features(g, x));
  const Var main = contrastive_loss(d, labels, logit_scale(g));
  if (cfg.lambda_rank == 0.0) return main;
  return add(main, scale(ranking_loss(d, labels, cfg.margin), cfg.lambda_rank));
}

// ---- inference ------------------------------------------------------------------

GuidanceOutputs run_guidance(const GuidanceModel& model, const Matrix& x) {
  if (x.cols() != static_cast<std::size_t>(model.shape.d_in)) {
    throw DimensionError("run_guidance: features " + x.shape_string() + ", model expects " +
                         std::to_string(model.shape.d_in) + " columns");
  }
  Tape tape;
  const GuidanceGraph g = bind(tape, model, Trainable::kNone);
  const Var f = encode_features(g, tape.constant(x));
  const Var d = semantic_scores(g, f);
  GuidanceOutputs out;
  out.features = f.value();
  out.d = d.value();
  Matrix logits = d.value();
  const double s = model.logit_scale();
  for (double& v : logits.values()) v *= s;
  out.prior = softmax_rows(logits);
  out.degenerate_norms = tape.degenerate_norm_warnings();
  return out;
}

Matrix encode_feature(const Matrix& x_rows, const GuidanceModel& model) {
  return run_guidance(model, x_rows).features;
}

SemanticVector semantic_vector(std::span<const double> f, const GuidanceModel& model) {
  if (f.size() != static_cast<std::size_t>(model.shape.d_feat)) {
    throw DimensionError("semantic_vector: feature length " + std::to_string(f.size()) + ", expected " +
                         std::to_string(model.shape.d_feat));
  }
  double norm2 = 0.0;
  for (double v : f) norm2 += v * v;
  if (std::abs(std::sqrt(norm2) - 1.0) > 1e-6) throw ContractError("semantic_vector: feature is not unit norm");
  const Matrix protos = l2_normalize_rows(model.prompts, kNormEps).rows;
  const Matrix d = matmul_nt(Matrix::row_vector(f), protos);
  Matrix logits = d;
  const double s = model.logit_scale();
  for (double& v : logits.values()) v *= s;
  const Matrix prior = softmax_rows(logits);
  return {{d.values().begin(), d.values().end()}, {prior.values().begin(), prior.values().end()}};
}

int zero_shot_predict(std::span<const double> x, const GuidanceModel& model) {
  return zero_shot_predict(Matrix::row_vector(x), model).front();
}

std::vector<int> zero_shot_predict(const Matrix& x_rows, const GuidanceModel& model) {
  const GuidanceOutputs out = run_guidance(model, x_rows);
  std::vector<int> preds(out.d.rows());
  for (std::size_t i = 0; i < preds.size(); ++i) preds[i] = argmax_first(out.d.row(i));
  return preds;
}

double contrastive_loss(const Matrix& d, std::span<const int> labels, double scale_value) {
  Tape tape;
  return contrastive_loss(tape.constant(d), labels, tape.constant(Matrix(1, 1, scale_value))).value()[0];
}

double ranking_loss(const Matrix& d, std::span<const int> labels, double margin) {
  Tape tape;
  return ranking_loss(tape.constant(d), labels, margin).value()[0];
}

// ---- checkpoint -----------------------------------------------------------------

void save_guidance(const std::filesystem::path& path, const GuidanceModel& model) {
  using detail::matrix_to_json;
  const json doc{
      {"format", kGuidanceFormat},
      {"stage", model.stage},
      {"frozen", model.frozen},
      {"shape",
       {{"d_in", model.shape.d_in}, {"hidden", model.shape.hidden}, {"d_feat", model.shape.d_feat}, {"k", model.shape.k}}},
      {"lora",
       {{"rank", model.adapter.rank},
        {"alpha", model.adapter.alpha},
        {"a", matrix_to_json(model.adapter.a)},
        {"b", matrix_to_json(model.adapter.b)}}},
      {"w1", matrix_to_json(model.w1)},
      {"b1", matrix_to_json(model.b1)},
      {"w2", matrix_to_json(model.w2)},
      {"b2", matrix_to_json(model.b2)},
      {"prompts", matrix_to_json(model.prompts)},
      {"log_scale", model.log_scale[0]},
  };
  detail::write_json_file(path, doc);
}

GuidanceModel load_guidance(const std::filesystem::path& path) {
  using detail::matrix_from_json;
  const json doc = detail::read_json_file(path);
  detail::require_format(doc, kGuidanceFormat);
  GuidanceModel m;
  try {
    const json& shape = doc.at("shape");
    m.shape.d_in = shape.at("d_in").get<int>();
    m.shape.hidden = shape.at("hidden").get<int>();
    m.shape.d_feat = shape.at("d_feat").get<int>();
    m.shape.k = shape.at("k").get<int>();
    const json& lora = doc.at("lora");
    m.shape.rank = lora.at("rank").get<int>();
    m.shape.alpha = lora.at("alpha").get<double>();
    m.adapter.rank = m.shape.rank;
    m.adapter.alpha = m.shape.alpha;
    m.adapter.a = matrix_from_json(lora, "a");
    m.adapter.b = matrix_from_json(lora, "b");
    m.log_scale = Matrix(1, 1, doc.at("log_scale").get<double>());
    m.frozen = doc.at("frozen").get<bool>();
    m.stage = doc.at("stage").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  m.w1 = matrix_from_json(doc, "w1");
  m.b1 = matrix_from_json(doc, "b1");
  m.w2 = matrix_from_json(doc, "w2");
  m.b2 = matrix_from_json(doc, "b2");
  m.prompts = matrix_from_json(doc, "prompts");

  const auto& s = m.shape;
  auto expect = [&](const Matrix& mat, int rows, int cols, const char* name) {
    if (mat.rows() != static_cast<std::size_t>(rows) || mat.cols() != static_cast<std::size_t>(cols)) {
      throw ParseError(path.string() + ": " + name + " has shape " + mat.shape_string() + ", expected " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
  };
  try {
    validate_shape(s);
  } catch (const ConfigError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  expect(m.w1, s.hidden, s.d_in, "w1");
  expect(m.b1, 1, s.hidden, "b1");
  expect(m.w2, s.d_feat, s.hidden, "w2");
  expect(m.b2, 1, s.d_feat, "b2");
  expect(m.adapter.a, s.rank, s.hidden, "lora.a");
  expect(m.adapter.b, s.d_feat, s.rank, "lora.b");
  expect(m.prompts, s.k, s.d_feat, "prompts");
  return m;
}

}  // namespace cgsd
