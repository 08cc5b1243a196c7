// SPDX-License-Identifier: Apache-2.0

#include "cgsd/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cgsd/errors.hpp"

namespace cgsd {

// ---- Matrix ----------------------------------------------------------------

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged initializer for Matrix");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::column_vector(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw IndexError("row index out of range");
    std::copy_n(row(indices[i]).begin(), cols_, out.row(i).begin());
  }
  return out;
}

// ---- kernels -----------------------------------------------------------------

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + a.shape_string() + " by " +
                         b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: cannot multiply " + a.shape_string() + " by transpose of " +
                         b.shape_string());
  }
  Matrix out(a.rows(), b.rows());
  const std::size_t inner = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double acc = 0.0;
      for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: cannot multiply transpose of " + a.shape_string() + " by " +
                         b.shape_string());
  }
  Matrix out(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aki * brow[j];
    }
  }
  return out;
}

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {
constexpr double kActivationSlope = 1.702;
}

double smooth_activation(double x) { return x * logistic(kActivationSlope * x); }

double smooth_activation_derivative(double x) {
  const double s = logistic(kActivationSlope * x);
  return s + kActivationSlope * x * s * (1.0 - s);
}

int argmax_first(std::span<const double> v) {
  if (v.empty()) throw ContractError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<int>(best);
}

Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (double& v : o) v /= total;
  }
  return out;
}

namespace {

Matrix log_softmax_values(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (double v : in) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < in.size(); ++j) out(i, j) = in[j] - lse;
  }
  return out;
}

}  // namespace

NormalizedRows l2_normalize_rows(const Matrix& x, double eps) {
  if (!(eps > 0)) throw ConfigError("l2_normalize_rows: eps must be positive");
  NormalizedRows result{Matrix(x.rows(), x.cols()), 0};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    double sq = 0.0;
    for (double v : in) sq += v * v;
    const double norm = std::sqrt(sq);
    const double denom = norm < eps ? eps : norm;
    if (norm < eps) ++result.degenerate;
    auto o = result.rows.row(i);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] / denom;
  }
  return result;
}

// ---- Tape ----------------------------------------------------------------------

const Matrix& Var::value() const { return tape->value(*this); }
const Matrix& Var::grad() const { return tape->grad(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, true, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Matrix value) {
  Matrix grad(value.rows(), value.cols());
  nodes_.push_back(Node{std::move(value), std::move(grad), true, true, {}});
  return Var{this, nodes_.size() - 1};
}

const Matrix& Tape::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (!node.is_leaf || !node.requires_grad) {
    throw ContractError("grad requested for a node that is not a parameter leaf");
  }
  return node.grad;
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape != this) throw ContractError("op mixes values from different tapes");
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(backward) : Backward{}});
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(Var target, const Matrix& contribution) {
  accumulate_scaled(target, contribution, 1.0);
}

void Tape::accumulate_scaled(Var target, const Matrix& contribution, double scale) {
  if (!nodes_[target.id].requires_grad) return;
  Matrix& adj = adjoints_[target.id];
  if (adj.empty()) adj = Matrix(contribution.rows(), contribution.cols());
  require_same_shape(adj, contribution, "accumulate");
  auto dst = adj.values();
  auto src = contribution.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

void Tape::backward(Var loss) {
  if (loss.tape != this || loss.id >= nodes_.size()) {
    throw ContractError("backward: loss is not on this tape");
  }
  const Matrix& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: loss must be 1x1, got " + lv.shape_string());
  }
  if (!nodes_[loss.id].requires_grad) return;
  adjoints_.assign(nodes_.size(), Matrix());
  adjoints_[loss.id] = Matrix(1, 1, 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (adjoints_[i].empty()) continue;
    Node& node = nodes_[i];
    if (node.backward) {
      node.backward(*this, adjoints_[i], node.value);
    } else if (node.is_leaf && node.requires_grad) {
      auto dst = node.grad.values();
      auto src = adjoints_[i].values();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    adjoints_[i] = Matrix();
  }
  adjoints_.clear();
}

void Tape::zero_grad() {
  for (Node& node : nodes_) {
    if (node.is_leaf && node.requires_grad) std::fill(node.grad.values().begin(), node.grad.values().end(), 0.0);
  }
}

// ---- ops -----------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tape = *a.tape;
  return tape.record(matmul(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_adjoint(a)) t.accumulate(a, matmul_nt(g, b.value()));
    if (t.needs_adjoint(b)) t.accumulate(b, matmul_tn(a.value(), g));
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& tape = *a.tape;
  return tape.record(matmul_nt(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_adjoint(a)) t.accumulate(a, matmul(g, b.value()));
    if (t.needs_adjoint(b)) t.accumulate(b, matmul_tn(g, a.value()));
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate_scaled(b, g, -1.0);
  });
}

Var hadamard(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    const auto gv = g.values();
    if (t.needs_adjoint(a)) {
      Matrix da = b.value();
      auto d = da.values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= gv[i];
      t.accumulate(a, da);
    }
    if (t.needs_adjoint(b)) {
      Matrix db = a.value();
      auto d = db.values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= gv[i];
      t.accumulate(b, db);
    }
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.values()) v *= s;
  return a.tape->record(std::move(out), {a},
                        [a, s](Tape& t, const Matrix& g, const Matrix&) { t.accumulate_scaled(a, g, s); });
}

Var add_scalar(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.values()) v += s;
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g); });
}

Var scale_by(Var a, Var s) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw DimensionError("scale_by: scale must be 1x1, got " + s.value().shape_string());
  }
  const double sv = s.value()[0];
  Matrix out = a.value();
  for (double& v : out.values()) v *= sv;
  return a.tape->record(std::move(out), {a, s}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_adjoint(a)) t.accumulate_scaled(a, g, s.value()[0]);
    if (t.needs_adjoint(s)) {
      double dot = 0.0;
      auto av = a.value().values();
      auto gv = g.values();
      for (std::size_t i = 0; i < av.size(); ++i) dot += av[i] * gv[i];
      t.accumulate(s, Matrix(1, 1, dot));
    }
  });
}

Var add_row(Var a, Var bias) {
  const Matrix& av = a.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw DimensionError("add_row: bias " + bv.shape_string() + " does not fit " + av.shape_string());
  }
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv[j];
  }
  return a.tape->record(std::move(out), {a, bias}, [a, bias](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (t.needs_adjoint(bias)) {
      Matrix db(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        auto r = g.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) db[j] += r[j];
      }
      t.accumulate(bias, db);
    }
  });
}

Var smooth_nonlinearity(Var x) {
  Matrix out = x.value();
  for (double& v : out.values()) v = smooth_activation(v);
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Matrix& g, const Matrix&) {
    Matrix dx = g;
    auto d = dx.values();
    auto xv = x.value().values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= smooth_activation_derivative(xv[i]);
    t.accumulate(x, dx);
  });
}

Var relu(Var x) {
  Matrix out = x.value();
  for (double& v : out.values()) v = v > 0 ? v : 0.0;
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Matrix& g, const Matrix&) {
    Matrix dx = g;
    auto d = dx.values();
    auto xv = x.value().values();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!(xv[i] > 0)) d[i] = 0.0;
    t.accumulate(x, dx);
  });
}

Var clamped_exp(Var x, double cap) {
  Matrix out = x.value();
  for (double& v : out.values()) v = std::min(std::exp(v), cap);
  return x.tape->record(std::move(out), {x}, [x, cap](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix dx = g;
    auto d = dx.values();
    auto yv = y.values();
    auto xv = x.value().values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::exp(xv[i]) < cap ? d[i] * yv[i] : 0.0;
    t.accumulate(x, dx);
  });
}

Var softmax_rows(Var x) {
  return x.tape->record(softmax_rows(x.value()), {x}, [x](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix dx(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto yr = y.row(i);
      auto gr = g.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < yr.size(); ++j) dx(i, j) = yr[j] * (gr[j] - dot);
    }
    t.accumulate(x, dx);
  });
}

Var log_softmax_rows(Var x) {
  Matrix y = log_softmax_values(x.value());
  return x.tape->record(std::move(y), {x}, [x](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix p = softmax_rows(x.value());
    Matrix dx(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto gr = g.row(i);
      double total = 0.0;
      for (double v : gr) total += v;
      for (std::size_t j = 0; j < gr.size(); ++j) dx(i, j) = gr[j] - p(i, j) * total;
    }
    t.accumulate(x, dx);
  });
}

Var l2_normalize_rows(Var x, double eps) {
  NormalizedRows normalized = l2_normalize_rows(x.value(), eps);
  if (normalized.degenerate > 0) x.tape->note_degenerate_norm(normalized.degenerate);
  return x.tape->record(std::move(normalized.rows), {x}, [x, eps](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& xv = x.value();
    Matrix dx(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      auto xr = xv.row(i);
      auto gr = g.row(i);
      double sq = 0.0;
      for (double v : xr) sq += v * v;
      const double norm = std::sqrt(sq);
      if (norm < eps) {
        for (std::size_t j = 0; j < xr.size(); ++j) dx(i, j) = gr[j] / eps;
        continue;
      }
      double gx = 0.0;
      for (std::size_t j = 0; j < xr.size(); ++j) gx += gr[j] * xr[j];
      const double inv = 1.0 / norm;
      const double inv3 = inv * inv * inv;
      for (std::size_t j = 0; j < xr.size(); ++j) dx(i, j) = gr[j] * inv - xr[j] * gx * inv3;
    }
    t.accumulate(x, dx);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& tape = *parts.front().tape;
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row count mismatch " + parts.front().value().shape_string() +
                           " vs " + p.value().shape_string());
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Matrix& v = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(v.row(i).begin(), v.cols(), out.row(i).begin() + static_cast<std::ptrdiff_t>(offset));
    offset += v.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(std::move(out), parts, [inputs](Tape& t, const Matrix& g, const Matrix&) {
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t c = p.cols();
      if (t.needs_adjoint(p)) {
        Matrix slice(g.rows(), c);
        for (std::size_t i = 0; i < g.rows(); ++i)
          std::copy_n(g.row(i).begin() + static_cast<std::ptrdiff_t>(off), c, slice.row(i).begin());
        t.accumulate(p, slice);
      }
      off += c;
    }
  });
}

Var pick_columns(Var x, std::span<const int> columns) {
  const Matrix& xv = x.value();
  if (columns.size() != xv.rows()) {
    throw DimensionError("pick_columns: " + std::to_string(columns.size()) + " indices for " +
                         xv.shape_string());
  }
  Matrix out(xv.rows(), 1);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    if (columns[i] < 0 || static_cast<std::size_t>(columns[i]) >= xv.cols()) {
      throw IndexError("pick_columns: column " + std::to_string(columns[i]) + " out of range");
    }
    out[i] = xv(i, static_cast<std::size_t>(columns[i]));
  }
  std::vector<int> cols(columns.begin(), columns.end());
  return x.tape->record(std::move(out), {x}, [x, cols](Tape& t, const Matrix& g, const Matrix&) {
    Matrix dx(x.rows(), x.cols());
    for (std::size_t i = 0; i < cols.size(); ++i) dx(i, static_cast<std::size_t>(cols[i])) = g[i];
    t.accumulate(x, dx);
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  return x.tape->record(Matrix(1, 1, total), {x}, [x](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(x, Matrix(x.rows(), x.cols(), g[0]));
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

// ---- grad_check ----------------------------------------------------------------

namespace {

double evaluate_scalar(const ScalarFn& fn, std::span<const Matrix> points) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(points.size());
  for (const Matrix& p : points) leaves.push_back(tape.constant(p));
  Var loss = fn(tape, leaves);
  if (loss.rows() != 1 || loss.cols() != 1) throw ContractError("grad_check: fn is not scalar-valued");
  return loss.value()[0];
}

}  // namespace

double grad_check(const ScalarFn& fn, std::span<const Matrix> points, double h) {
  if (!(h > 0)) throw ConfigError("grad_check: h must be positive");

  Tape tape;
  std::vector<Var> leaves;
  for (const Matrix& p : points) leaves.push_back(tape.parameter(p));
  Var loss = fn(tape, leaves);
  if (loss.rows() != 1 || loss.cols() != 1) throw ContractError("grad_check: fn is not scalar-valued");
  tape.backward(loss);

  const double first = evaluate_scalar(fn, points);
  const double second = evaluate_scalar(fn, points);
  if (first != second || first != loss.value()[0]) {
    throw ContractError("grad_check: fn is not deterministic");
  }

  std::vector<Matrix> probe(points.begin(), points.end());
  double worst = 0.0;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    const Matrix& auto_grad = tape.grad(leaves[p]);
    for (std::size_t i = 0; i < probe[p].size(); ++i) {
      const double saved = probe[p][i];
      probe[p][i] = saved + h;
      const double up = evaluate_scalar(fn, probe);
      probe[p][i] = saved - h;
      const double down = evaluate_scalar(fn, probe);
      probe[p][i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double ga = auto_grad[i];
      const double denom = std::max({1.0, std::abs(ga), std::abs(fd)});
      worst = std::max(worst, std::abs(ga - fd) / denom);
    }
  }
  return worst;
}

double grad_check(const ScalarFn& fn, const Matrix& point, double h) {
  return grad_check(fn, std::span<const Matrix>(&point, 1), h);
}

}  // namespace cgsd
