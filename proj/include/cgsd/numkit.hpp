// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices and a tape-based reverse-mode gradient engine.
//
// A Tape owns every value produced during one forward pass. Leaves are added
// with constant() or parameter(); every op appends a node and, when any input
// requires a gradient, the adjoint rule for that node. backward() replays the
// rules in reverse and accumulates into the grads of parameter leaves.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace cgsd {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> values);
  static Matrix column_vector(std::span<const double> values);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const;

  Matrix transposed() const;
  Matrix select_rows(std::span<const std::size_t> indices) const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Plain (untaped) kernels shared by ops, oracles and inference code.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// aᵀ · b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

double logistic(double x);
/// g(x) = x·σ(1.702x).
double smooth_activation(double x);
double smooth_activation_derivative(double x);

/// Index of the largest entry; the smaller index wins ties.
int argmax_first(std::span<const double> v);

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  /// Adjoint rule: receives the node's output adjoint (and its value) and
  /// pushes contributions into input adjoints through Tape::accumulate.
  using Backward = std::function<void(Tape&, const Matrix& out_adjoint, const Matrix& out_value)>;

  Var constant(Matrix value);
  Var parameter(Matrix value);

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  /// Accumulated gradient of a parameter leaf (zeros before any backward).
  const Matrix& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Reverse sweep from a 1×1 loss. Repeated calls accumulate into grads.
  void backward(Var loss);
  void zero_grad();

  /// Append an op result. `backward` is dropped when no input needs a gradient.
  Var record(Matrix value, std::span<const Var> inputs, Backward backward);
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  /// Used by adjoint rules to add a contribution into an input's adjoint.
  void accumulate(Var target, const Matrix& contribution);
  void accumulate_scaled(Var target, const Matrix& contribution, double scale);
  bool needs_adjoint(Var v) const { return nodes_[v.id].requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Count of rows that hit the eps floor in l2_normalize_rows.
  std::size_t degenerate_norm_warnings() const { return degenerate_norms_; }
  void note_degenerate_norm(std::size_t count = 1) { degenerate_norms_ += count; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool is_leaf = false;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoints_;
  std::size_t degenerate_norms_ = 0;
};

// ---- differentiable ops ----------------------------------------------------

Var matmul(Var a, Var b);
/// a · bᵀ; the natural form for y = x·Wᵀ with W stored out×in.
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// Multiply every entry of `a` by the 1×1 value `s`.
Var scale_by(Var a, Var s);
/// a (m×n) + bias (1×n) broadcast over rows.
Var add_row(Var a, Var bias);
Var smooth_nonlinearity(Var x);
Var relu(Var x);
/// min(exp(x), cap) elementwise; the gradient is zero where the cap binds.
Var clamped_exp(Var x, double cap);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
Var l2_normalize_rows(Var x, double eps);
Var concat_cols(std::span<const Var> parts);
/// out[i] = x(i, columns[i]) as an m×1 column.
Var pick_columns(Var x, std::span<const int> columns);
Var sum(Var x);
Var mean(Var x);

// ---- untaped versions of the row-wise ops ---------------------------------

Matrix softmax_rows(const Matrix& x);

struct NormalizedRows {
  Matrix rows;
  std::size_t degenerate = 0;
};
NormalizedRows l2_normalize_rows(const Matrix& x, double eps);

// ---- finite-difference checking -------------------------------------------

/// Builds a scalar loss on `tape` from leaves holding the probe points.
using ScalarFn = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

/// Max over all coordinates of |g_auto − g_fd| / max(1, |g_auto|, |g_fd|),
/// with central differences of step h. Throws ContractError if `fn` is not
/// deterministic.
double grad_check(const ScalarFn& fn, std::span<const Matrix> points, double h);
double grad_check(const ScalarFn& fn, const Matrix& point, double h);

}  // namespace cgsd
