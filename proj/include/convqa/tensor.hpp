// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace convqa {

class Tensor;

namespace detail {
struct TensorImpl;
TensorImpl& impl(const Tensor& t);
}  // namespace detail

// Dense row-major tensor of doubles with an optional gradient buffer.
// Handles share storage; copying a Tensor is shallow. A rank-0 shape is a
// scalar. grad() is populated by Tape::backward and accumulates across
// calls until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int ndim() const;
  int size() const;
  int dim(int axis) const;

  std::span<const double> data() const;
  std::span<double> data();
  // Gradient view; allocates a zero buffer on first access.
  std::span<const double> grad() const;
  std::span<double> grad();
  void zero_grad();

  // Value of a single-element tensor.
  double value() const;

  bool requires_grad() const;
  void set_requires_grad(bool v);
  bool is_leaf() const;

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
  friend detail::TensorImpl& detail::impl(const Tensor& t);
};

// Execution record for reverse-mode differentiation. Operations append
// themselves in execution order, so every record appears after the records
// that produced its parents. backward() sweeps the records once in reverse,
// propagating through per-tensor scratch buffers that are reset on every
// call; the results are then committed into the persistent grad of each
// tensor with requires_grad(). Repeated backward calls therefore accumulate
// exactly. A tape and the tensors recorded on it belong to one thread.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::vector<Tensor> parents, Tensor output, BackwardFn backward);

  // Reverse sweep from `loss`, which must hold exactly one element.
  void backward(const Tensor& loss);

  std::size_t num_ops() const { return records_.size(); }
  void clear() { records_.clear(); }

 private:
  struct Record {
    std::vector<Tensor> parents;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Record> records_;
};

// Temporarily clears requires_grad on a set of tensors (model parameters
// during a pass whose gradients must not reach them). Any backward that
// should honor the pause has to run while the guard is alive, because
// commit checks the flag at backward time.
class GradPause {
 public:
  explicit GradPause(std::span<Tensor> tensors);
  ~GradPause();
  GradPause(const GradPause&) = delete;
  GradPause& operator=(const GradPause&) = delete;

 private:
  std::vector<std::pair<Tensor, bool>> saved_;
};

// ---- Differentiable operations -------------------------------------------
// Every op validates shapes, computes the forward value, and registers a
// backward rule on the tape when any parent is tracked.

// (m,k)x(k,n) -> (m,n); (m,k)x(k) -> (m); (k)x(k,n) -> (n)
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor add_scalar(Tape& tape, const Tensor& a, double constant);
Tensor clamp_min(Tape& tape, const Tensor& a, double floor);

// mat[r x c] + bias[c] broadcast over rows.
Tensor add_bias(Tape& tape, const Tensor& mat, const Tensor& bias);
// Row i of mat scaled by factors[i].
Tensor scale_rows(Tape& tape, const Tensor& mat, const Tensor& factors);
Tensor row(Tape& tape, const Tensor& mat, int index);
Tensor column(Tape& tape, const Tensor& mat, int index);
Tensor slice_cols(Tape& tape, const Tensor& mat, int begin, int end);
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
// Concatenation of vectors into one vector.
Tensor concat(Tape& tape, std::span<const Tensor> parts);

Tensor relu(Tape& tape, const Tensor& a);
Tensor sigmoid(Tape& tape, const Tensor& a);
Tensor tanh(Tape& tape, const Tensor& a);
// Elementwise natural log; rejects non-positive inputs.
Tensor log(Tape& tape, const Tensor& a);

// Normalization along `axis` with max subtraction. Rejects NaN input.
Tensor softmax(Tape& tape, const Tensor& a, int axis);

Tensor sum(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);
Tensor l2_norm(Tape& tape, const Tensor& a);

// -log p[target] for a probability vector p; probabilities are floored at
// kProbFloor inside the log. Gradient flows into p.
Tensor cross_entropy(Tape& tape, const Tensor& p, int target);

// sum_i p_i (log p_i - log q_i) with both sides floored at kProbFloor and
// zero-probability entries of p skipped. Gradient flows into q only; p is
// treated as a constant.
Tensor kl_divergence(Tape& tape, const Tensor& p, const Tensor& q);

// Per-row normalization of x[r x c]: gain * (x - mean) / sqrt(var + eps) + bias.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);

// Sum of token and position embedding rows for a token sequence. The output
// always participates in the graph so its gradient is readable after
// backward; gradients also scatter back into the tables when those require
// grad. When `override_values` is nonempty it replaces the forward values
// (the difference from the looked-up rows acts as an additive constant, so
// table gradients are unaffected). `track = false` produces a plain
// constant, recording nothing.
Tensor embedding_lookup(Tape& tape, const Tensor& token_table, const Tensor& position_table,
                        std::span<const int> token_ids, std::span<const int> positions,
                        std::span<const double> override_values = {}, bool track = true);

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kMaskedScore = -1e30;

std::string shape_string(const std::vector<int>& shape);

}  // namespace convqa
