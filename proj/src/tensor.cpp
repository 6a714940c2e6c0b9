// SPDX-License-Identifier: Apache-2.0
#include "convqa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "convqa/errors.hpp"
#include "convqa/kernels.hpp"

namespace convqa {

namespace detail {
struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;     // persistent, sized on first use
  std::vector<double> scratch;  // per-backward traversal buffer
  bool requires_grad = false;
  bool leaf = true;
};

TensorImpl& impl(const Tensor& t) {
  if (!t.impl_) throw ContractError("operation on an undefined tensor");
  return *t.impl_;
}
}  // namespace detail

using detail::impl;
using detail::TensorImpl;

namespace {

int shape_size(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

// Scratch accessor for backward rules; sized lazily.
std::vector<double>& scr(const Tensor& t) {
  auto& i = impl(t);
  if (i.scratch.size() != i.data.size()) i.scratch.assign(i.data.size(), 0.0);
  return i.scratch;
}

Tensor make_tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad,
                   bool leaf) {
  Tensor t = Tensor::from_data(std::move(shape), std::move(data), requires_grad);
  impl(t).leaf = leaf;
  return t;
}

Tensor make_output(std::vector<int> shape, std::vector<double> data, bool tracked) {
  return make_tensor(std::move(shape), std::move(data), tracked, !tracked);
}

bool tracked(const Tensor& a) { return a.defined() && a.requires_grad(); }

[[noreturn]] void dim_error(const std::string& what, const Tensor& a, const Tensor& b) {
  throw DimensionError(what + ": shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

void require_same_shape(const std::string& what, const Tensor& a, const Tensor& b) {
  if (impl(a).shape != impl(b).shape) dim_error(what, a, b);
}

void require_matrix(const std::string& what, const Tensor& a) {
  if (a.ndim() != 2)
    throw DimensionError(what + ": expected a matrix, got shape " + shape_string(a.shape()));
}

// Elementwise unary op: y = f(x), dx += dfdx(x, y) * dy.
template <typename Fwd, typename Bwd>
Tensor unary_op(Tape& tape, const Tensor& a, Fwd fwd, Bwd bwd) {
  const auto& ai = impl(a);
  std::vector<double> out(ai.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ai.data[i]);
  bool track = tracked(a);
  Tensor y = make_output(ai.shape, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, bwd] {
      const auto& go = scr(y);
      auto& ga = scr(a);
      const auto& xi = impl(a).data;
      const auto& yi = impl(y).data;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += bwd(xi[i], yi[i]) * go[i];
    });
  }
  return y;
}

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  int n = shape_size(shape);
  return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                   requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  int n = shape_size(shape);
  return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                   requires_grad);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  for (int d : shape)
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
  if (static_cast<std::size_t>(shape_size(shape)) != data.size())
    throw DimensionError("shape " + shape_string(shape) + " does not match buffer of " +
                         std::to_string(data.size()) + " values");
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const { return impl(*this).shape; }
int Tensor::ndim() const { return static_cast<int>(impl(*this).shape.size()); }
int Tensor::size() const { return shape_size(impl(*this).shape); }

int Tensor::dim(int axis) const {
  const auto& s = impl(*this).shape;
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(s));
  return s[axis];
}

std::span<const double> Tensor::data() const { return impl(*this).data; }
std::span<double> Tensor::data() { return impl(*this).data; }

std::span<const double> Tensor::grad() const {
  auto& i = impl(*this);
  if (i.grad.size() != i.data.size()) i.grad.assign(i.data.size(), 0.0);
  return i.grad;
}

std::span<double> Tensor::grad() {
  auto& i = impl(*this);
  if (i.grad.size() != i.data.size()) i.grad.assign(i.data.size(), 0.0);
  return i.grad;
}

void Tensor::zero_grad() {
  auto& i = impl(*this);
  i.grad.assign(i.data.size(), 0.0);
}

double Tensor::value() const {
  const auto& i = impl(*this);
  if (i.data.size() != 1)
    throw ContractError("value() on tensor of shape " + shape_string(i.shape));
  return i.data[0];
}

bool Tensor::requires_grad() const { return impl(*this).requires_grad; }
void Tensor::set_requires_grad(bool v) { impl(*this).requires_grad = v; }
bool Tensor::is_leaf() const { return impl(*this).leaf; }

// ---- Tape ------------------------------------------------------------------

void Tape::record(std::vector<Tensor> parents, Tensor output, BackwardFn backward) {
  records_.push_back({std::move(parents), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward requires a single-element loss tensor");

  // Reset traversal buffers for every tensor this tape touches, then walk
  // the records once in reverse.
  std::unordered_set<TensorImpl*> seen;
  std::vector<Tensor> touched;
  auto visit = [&](const Tensor& t) {
    if (seen.insert(&impl(t)).second) {
      impl(t).scratch.assign(impl(t).data.size(), 0.0);
      touched.push_back(t);
    }
  };
  visit(loss);
  for (const auto& r : records_) {
    visit(r.output);
    for (const auto& p : r.parents) visit(p);
  }

  impl(loss).scratch[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->fn();

  // Commit into persistent gradients of everything that asks for them.
  for (const auto& t : touched) {
    auto& i = impl(t);
    if (!i.requires_grad) continue;
    if (i.grad.size() != i.data.size()) i.grad.assign(i.data.size(), 0.0);
    for (std::size_t j = 0; j < i.grad.size(); ++j) i.grad[j] += i.scratch[j];
  }
}

// ---- GradPause -------------------------------------------------------------

GradPause::GradPause(std::span<Tensor> tensors) {
  saved_.reserve(tensors.size());
  for (auto& t : tensors) {
    saved_.emplace_back(t, t.requires_grad());
    t.set_requires_grad(false);
  }
}

GradPause::~GradPause() {
  for (auto& [t, flag] : saved_) t.set_requires_grad(flag);
}

// ---- Linear algebra --------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  int am = 0, ak = 0, bk = 0, bn = 0;
  bool a_vec = a.ndim() == 1, b_vec = b.ndim() == 1;
  if (a.ndim() == 2) {
    am = a.dim(0);
    ak = a.dim(1);
  } else if (a_vec) {
    am = 1;
    ak = a.dim(0);
  } else {
    dim_error("matmul", a, b);
  }
  if (b.ndim() == 2) {
    bk = b.dim(0);
    bn = b.dim(1);
  } else if (b_vec) {
    bk = b.dim(0);
    bn = 1;
  } else {
    dim_error("matmul", a, b);
  }
  if (a_vec && b_vec) dim_error("matmul of two vectors", a, b);
  if (ak != bk) dim_error("matmul inner dimensions disagree", a, b);

  std::vector<double> out(static_cast<std::size_t>(am) * bn);
  kernels::matmul(impl(a).data.data(), impl(b).data.data(), out.data(), am, ak, bn);

  std::vector<int> out_shape;
  if (a_vec)
    out_shape = {bn};
  else if (b_vec)
    out_shape = {am};
  else
    out_shape = {am, bn};

  bool track = tracked(a) || tracked(b);
  Tensor y = make_output(std::move(out_shape), std::move(out), track);
  if (track) {
    tape.record({a, b}, y, [a, b, y, am, ak, bn] {
      const auto& go = scr(y);
      kernels::matmul_grad_lhs(go.data(), impl(b).data.data(), scr(a).data(), am, ak, bn);
      kernels::matmul_grad_rhs(impl(a).data.data(), go.data(), scr(b).data(), am, ak, bn);
    });
  }
  return y;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_matrix("transpose", a);
  int r = a.dim(0), c = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  const auto& x = impl(a).data;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = x[static_cast<std::size_t>(i) * c + j];
  bool track = tracked(a);
  Tensor y = make_output({c, r}, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, r, c] {
      const auto& go = scr(y);
      auto& ga = scr(a);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          ga[static_cast<std::size_t>(i) * c + j] += go[static_cast<std::size_t>(j) * r + i];
    });
  }
  return y;
}

// ---- Elementwise -----------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const auto& ai = impl(a).data;
  const auto& bi = impl(b).data;
  std::vector<double> out(ai.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai[i] + bi[i];
  bool track = tracked(a) || tracked(b);
  Tensor y = make_output(impl(a).shape, std::move(out), track);
  if (track) {
    tape.record({a, b}, y, [a, b, y] {
      const auto& go = scr(y);
      auto& ga = scr(a);
      auto& gb = scr(b);
      for (std::size_t i = 0; i < go.size(); ++i) {
        ga[i] += go[i];
        gb[i] += go[i];
      }
    });
  }
  return y;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const auto& ai = impl(a).data;
  const auto& bi = impl(b).data;
  std::vector<double> out(ai.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai[i] - bi[i];
  bool track = tracked(a) || tracked(b);
  Tensor y = make_output(impl(a).shape, std::move(out), track);
  if (track) {
    tape.record({a, b}, y, [a, b, y] {
      const auto& go = scr(y);
      auto& ga = scr(a);
      auto& gb = scr(b);
      for (std::size_t i = 0; i < go.size(); ++i) {
        ga[i] += go[i];
        gb[i] -= go[i];
      }
    });
  }
  return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const auto& ai = impl(a).data;
  const auto& bi = impl(b).data;
  std::vector<double> out(ai.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai[i] * bi[i];
  bool track = tracked(a) || tracked(b);
  Tensor y = make_output(impl(a).shape, std::move(out), track);
  if (track) {
    tape.record({a, b}, y, [a, b, y] {
      const auto& go = scr(y);
      auto& ga = scr(a);
      auto& gb = scr(b);
      const auto& av = impl(a).data;
      const auto& bv = impl(b).data;
      for (std::size_t i = 0; i < go.size(); ++i) {
        ga[i] += bv[i] * go[i];
        gb[i] += av[i] * go[i];
      }
    });
  }
  return y;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  return unary_op(
      tape, a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(Tape& tape, const Tensor& a, double constant) {
  return unary_op(
      tape, a, [constant](double x) { return x + constant; },
      [](double, double) { return 1.0; });
}

Tensor clamp_min(Tape& tape, const Tensor& a, double floor) {
  return unary_op(
      tape, a, [floor](double x) { return x < floor ? floor : x; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

Tensor relu(Tape& tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape& tape, const Tensor& a) {
  return unary_op(
      tape, a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(Tape& tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor log(Tape& tape, const Tensor& a) {
  for (double x : impl(a).data)
    if (!(x > 0.0)) throw ComputationError("log of non-positive value " + std::to_string(x));
  return unary_op(
      tape, a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

// ---- Structured ops --------------------------------------------------------

Tensor add_bias(Tape& tape, const Tensor& mat, const Tensor& bias) {
  require_matrix("add_bias", mat);
  if (bias.ndim() != 1 || bias.dim(0) != mat.dim(1)) dim_error("add_bias", mat, bias);
  int r = mat.dim(0), c = mat.dim(1);
  const auto& m = impl(mat).data;
  const auto& b = impl(bias).data;
  std::vector<double> out(m.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(i) * c + j] = m[static_cast<std::size_t>(i) * c + j] + b[j];
  bool track = tracked(mat) || tracked(bias);
  Tensor y = make_output({r, c}, std::move(out), track);
  if (track) {
    tape.record({mat, bias}, y, [mat, bias, y, r, c] {
      const auto& go = scr(y);
      auto& gm = scr(mat);
      auto& gb = scr(bias);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          double g = go[static_cast<std::size_t>(i) * c + j];
          gm[static_cast<std::size_t>(i) * c + j] += g;
          gb[j] += g;
        }
    });
  }
  return y;
}

Tensor scale_rows(Tape& tape, const Tensor& mat, const Tensor& factors) {
  require_matrix("scale_rows", mat);
  if (factors.ndim() != 1 || factors.dim(0) != mat.dim(0)) dim_error("scale_rows", mat, factors);
  int r = mat.dim(0), c = mat.dim(1);
  const auto& m = impl(mat).data;
  const auto& f = impl(factors).data;
  std::vector<double> out(m.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(i) * c + j] = m[static_cast<std::size_t>(i) * c + j] * f[i];
  bool track = tracked(mat) || tracked(factors);
  Tensor y = make_output({r, c}, std::move(out), track);
  if (track) {
    tape.record({mat, factors}, y, [mat, factors, y, r, c] {
      const auto& go = scr(y);
      auto& gm = scr(mat);
      auto& gf = scr(factors);
      const auto& m = impl(mat).data;
      const auto& f = impl(factors).data;
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) {
          std::size_t idx = static_cast<std::size_t>(i) * c + j;
          gm[idx] += f[i] * go[idx];
          acc += m[idx] * go[idx];
        }
        gf[i] += acc;
      }
    });
  }
  return y;
}

Tensor row(Tape& tape, const Tensor& mat, int index) {
  require_matrix("row", mat);
  int r = mat.dim(0), c = mat.dim(1);
  if (index < 0 || index >= r)
    throw IndexError("row " + std::to_string(index) + " out of range for shape " +
                     shape_string(mat.shape()));
  const auto& m = impl(mat).data;
  std::vector<double> out(m.begin() + static_cast<std::size_t>(index) * c,
                          m.begin() + static_cast<std::size_t>(index + 1) * c);
  bool track = tracked(mat);
  Tensor y = make_output({c}, std::move(out), track);
  if (track) {
    tape.record({mat}, y, [mat, y, index, c] {
      const auto& go = scr(y);
      auto& gm = scr(mat);
      for (int j = 0; j < c; ++j) gm[static_cast<std::size_t>(index) * c + j] += go[j];
    });
  }
  return y;
}

Tensor column(Tape& tape, const Tensor& mat, int index) {
  require_matrix("column", mat);
  int r = mat.dim(0), c = mat.dim(1);
  if (index < 0 || index >= c)
    throw IndexError("column " + std::to_string(index) + " out of range for shape " +
                     shape_string(mat.shape()));
  const auto& m = impl(mat).data;
  std::vector<double> out(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out[i] = m[static_cast<std::size_t>(i) * c + index];
  bool track = tracked(mat);
  Tensor y = make_output({r}, std::move(out), track);
  if (track) {
    tape.record({mat}, y, [mat, y, index, r, c] {
      const auto& go = scr(y);
      auto& gm = scr(mat);
      for (int i = 0; i < r; ++i) gm[static_cast<std::size_t>(i) * c + index] += go[i];
    });
  }
  return y;
}

Tensor slice_cols(Tape& tape, const Tensor& mat, int begin, int end) {
  require_matrix("slice_cols", mat);
  int r = mat.dim(0), c = mat.dim(1);
  if (begin < 0 || end > c || begin >= end)
    throw IndexError("column slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for shape " + shape_string(mat.shape()));
  int w = end - begin;
  const auto& m = impl(mat).data;
  std::vector<double> out(static_cast<std::size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<std::size_t>(i) * w + j] = m[static_cast<std::size_t>(i) * c + begin + j];
  bool track = tracked(mat);
  Tensor y = make_output({r, w}, std::move(out), track);
  if (track) {
    tape.record({mat}, y, [mat, y, begin, r, c, w] {
      const auto& go = scr(y);
      auto& gm = scr(mat);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          gm[static_cast<std::size_t>(i) * c + begin + j] +=
              go[static_cast<std::size_t>(i) * w + j];
    });
  }
  return y;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols of zero parts");
  int r = parts[0].dim(0);
  int total = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_matrix("concat_cols", p);
    if (p.dim(0) != r) dim_error("concat_cols row mismatch", parts[0], p);
    total += p.dim(1);
    track = track || tracked(p);
  }
  std::vector<double> out(static_cast<std::size_t>(r) * total);
  int off = 0;
  for (const auto& p : parts) {
    int c = p.dim(1);
    const auto& m = impl(p).data;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        out[static_cast<std::size_t>(i) * total + off + j] = m[static_cast<std::size_t>(i) * c + j];
    off += c;
  }
  Tensor y = make_output({r, total}, std::move(out), track);
  if (track) {
    std::vector<Tensor> ps(parts.begin(), parts.end());
    tape.record(ps, y, [ps, y, r, total] {
      const auto& go = scr(y);
      int off = 0;
      for (const auto& p : ps) {
        int c = p.dim(1);
        auto& gp = scr(p);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            gp[static_cast<std::size_t>(i) * c + j] +=
                go[static_cast<std::size_t>(i) * total + off + j];
        off += c;
      }
    });
  }
  return y;
}

Tensor concat(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat of zero parts");
  int total = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.ndim() != 1)
      throw DimensionError("concat expects vectors, got shape " + shape_string(p.shape()));
    total += p.dim(0);
    track = track || tracked(p);
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(total));
  for (const auto& p : parts) {
    const auto& d = impl(p).data;
    out.insert(out.end(), d.begin(), d.end());
  }
  Tensor y = make_output({total}, std::move(out), track);
  if (track) {
    std::vector<Tensor> ps(parts.begin(), parts.end());
    tape.record(ps, y, [ps, y] {
      const auto& go = scr(y);
      std::size_t off = 0;
      for (const auto& p : ps) {
        auto& gp = scr(p);
        for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += go[off + j];
        off += gp.size();
      }
    });
  }
  return y;
}

// ---- Softmax ---------------------------------------------------------------

Tensor softmax(Tape& tape, const Tensor& a, int axis) {
  const auto& shape = impl(a).shape;
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(shape));
  for (double x : impl(a).data)
    if (std::isnan(x)) throw ComputationError("softmax input contains NaN");

  int len = shape[axis];
  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) inner *= shape[i];

  const auto& x = impl(a).data;
  std::vector<double> out(x.size());
  if (inner == 1) {
    kernels::softmax_rows(x.data(), out.data(), outer, len);
  } else {
    for (int o = 0; o < outer; ++o)
      for (int in = 0; in < inner; ++in) {
        std::size_t base = static_cast<std::size_t>(o) * len * inner + in;
        double mx = x[base];
        for (int t = 1; t < len; ++t) mx = std::max(mx, x[base + static_cast<std::size_t>(t) * inner]);
        double sum = 0.0;
        for (int t = 0; t < len; ++t) {
          double e = std::exp(x[base + static_cast<std::size_t>(t) * inner] - mx);
          out[base + static_cast<std::size_t>(t) * inner] = e;
          sum += e;
        }
        for (int t = 0; t < len; ++t) out[base + static_cast<std::size_t>(t) * inner] /= sum;
      }
  }

  bool track = tracked(a);
  Tensor y = make_output(shape, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, outer, len, inner] {
      const auto& go = scr(y);
      auto& ga = scr(a);
      const auto& yv = impl(y).data;
      for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
          std::size_t base = static_cast<std::size_t>(o) * len * inner + in;
          double dot = 0.0;
          for (int t = 0; t < len; ++t) {
            std::size_t idx = base + static_cast<std::size_t>(t) * inner;
            dot += go[idx] * yv[idx];
          }
          for (int t = 0; t < len; ++t) {
            std::size_t idx = base + static_cast<std::size_t>(t) * inner;
            ga[idx] += yv[idx] * (go[idx] - dot);
          }
        }
    });
  }
  return y;
}

// ---- Reductions ------------------------------------------------------------

Tensor sum(Tape& tape, const Tensor& a) {
  const auto& x = impl(a).data;
  double s = 0.0;
  for (double v : x) s += v;
  bool track = tracked(a);
  Tensor y = make_output({}, {s}, track);
  if (track) {
    tape.record({a}, y, [a, y] {
      double g = scr(y)[0];
      auto& ga = scr(a);
      for (auto& v : ga) v += g;
    });
  }
  return y;
}

Tensor mean(Tape& tape, const Tensor& a) {
  const auto& x = impl(a).data;
  if (x.empty()) throw ContractError("mean of an empty tensor");
  double s = 0.0;
  for (double v : x) s += v;
  double n = static_cast<double>(x.size());
  bool track = tracked(a);
  Tensor y = make_output({}, {s / n}, track);
  if (track) {
    tape.record({a}, y, [a, y, n] {
      double g = scr(y)[0] / n;
      auto& ga = scr(a);
      for (auto& v : ga) v += g;
    });
  }
  return y;
}

Tensor l2_norm(Tape& tape, const Tensor& a) {
  const auto& x = impl(a).data;
  double s = 0.0;
  for (double v : x) s += v * v;
  double norm = std::sqrt(s);
  bool track = tracked(a);
  Tensor y = make_output({}, {norm}, track);
  if (track) {
    tape.record({a}, y, [a, y, norm] {
      if (norm == 0.0) return;
      double g = scr(y)[0] / norm;
      auto& ga = scr(a);
      const auto& xv = impl(a).data;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += xv[i] * g;
    });
  }
  return y;
}

// ---- Distribution losses ---------------------------------------------------

Tensor cross_entropy(Tape& tape, const Tensor& p, int target) {
  const auto& x = impl(p).data;
  if (target < 0 || target >= static_cast<int>(x.size()))
    throw IndexError("cross_entropy target " + std::to_string(target) +
                     " out of range for distribution of length " + std::to_string(x.size()));
  double pt = x[static_cast<std::size_t>(target)];
  double val = -std::log(std::max(pt, kProbFloor));
  bool track = tracked(p);
  Tensor y = make_output({}, {val}, track);
  if (track) {
    tape.record({p}, y, [p, y, target] {
      double g = scr(y)[0];
      double pt = impl(p).data[static_cast<std::size_t>(target)];
      if (pt > kProbFloor) scr(p)[static_cast<std::size_t>(target)] -= g / pt;
    });
  }
  return y;
}

Tensor kl_divergence(Tape& tape, const Tensor& p, const Tensor& q) {
  require_same_shape("kl_divergence", p, q);
  const auto& pv = impl(p).data;
  const auto& qv = impl(q).data;
  double val = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] <= 0.0) continue;
    val += pv[i] * (std::log(std::max(pv[i], kProbFloor)) - std::log(std::max(qv[i], kProbFloor)));
  }
  bool track = tracked(q);  // p is a constant here by definition
  Tensor y = make_output({}, {val}, track);
  if (track) {
    tape.record({q}, y, [p, q, y] {
      double g = scr(y)[0];
      auto& gq = scr(q);
      const auto& pv = impl(p).data;
      const auto& qv = impl(q).data;
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] <= 0.0 || qv[i] <= kProbFloor) continue;
        gq[i] -= g * pv[i] / qv[i];
      }
    });
  }
  return y;
}

// ---- Layer norm ------------------------------------------------------------

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require_matrix("layer_norm", x);
  int r = x.dim(0), c = x.dim(1);
  if (gain.ndim() != 1 || gain.dim(0) != c) dim_error("layer_norm gain", x, gain);
  if (bias.ndim() != 1 || bias.dim(0) != c) dim_error("layer_norm bias", x, bias);

  const auto& xv = impl(x).data;
  const auto& gv = impl(gain).data;
  const auto& bv = impl(bias).data;
  std::vector<double> out(xv.size());
  std::vector<double> inv_std(static_cast<std::size_t>(r));
  std::vector<double> centered(xv.size());
  for (int i = 0; i < r; ++i) {
    std::size_t base = static_cast<std::size_t>(i) * c;
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += xv[base + j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      double d = xv[base + j] - m;
      centered[base + j] = d;
      var += d * d;
    }
    var /= c;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < c; ++j) out[base + j] = centered[base + j] * is * gv[j] + bv[j];
  }

  bool track = tracked(x) || tracked(gain) || tracked(bias);
  Tensor y = make_output({r, c}, std::move(out), track);
  if (track) {
    // Keep the normalized activations for the backward rule.
    auto xhat = std::make_shared<std::vector<double>>(std::move(centered));
    auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
    for (int i = 0; i < r; ++i) {
      std::size_t base = static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) (*xhat)[base + j] *= (*istd)[static_cast<std::size_t>(i)];
    }
    tape.record({x, gain, bias}, y, [x, gain, bias, y, xhat, istd, r, c] {
      const auto& go = scr(y);
      auto& gx = scr(x);
      auto& gg = scr(gain);
      auto& gb = scr(bias);
      const auto& gv = impl(gain).data;
      for (int i = 0; i < r; ++i) {
        std::size_t base = static_cast<std::size_t>(i) * c;
        double mean_gh = 0.0, mean_ghx = 0.0;
        for (int j = 0; j < c; ++j) {
          double gh = go[base + j] * gv[j];
          mean_gh += gh;
          mean_ghx += gh * (*xhat)[base + j];
        }
        mean_gh /= c;
        mean_ghx /= c;
        double is = (*istd)[static_cast<std::size_t>(i)];
        for (int j = 0; j < c; ++j) {
          double gh = go[base + j] * gv[j];
          gx[base + j] += is * (gh - mean_gh - (*xhat)[base + j] * mean_ghx);
          gg[j] += go[base + j] * (*xhat)[base + j];
          gb[j] += go[base + j];
        }
      }
    });
  }
  return y;
}

// ---- Embedding lookup ------------------------------------------------------

Tensor embedding_lookup(Tape& tape, const Tensor& token_table, const Tensor& position_table,
                        std::span<const int> token_ids, std::span<const int> positions,
                        std::span<const double> override_values, bool track) {
  require_matrix("embedding token table", token_table);
  require_matrix("embedding position table", position_table);
  int vocab = token_table.dim(0), dim = token_table.dim(1);
  int max_pos = position_table.dim(0);
  if (position_table.dim(1) != dim) dim_error("embedding tables", token_table, position_table);
  if (token_ids.size() != positions.size())
    throw ContractError("embedding_lookup: " + std::to_string(token_ids.size()) + " ids vs " +
                        std::to_string(positions.size()) + " positions");
  int t_len = static_cast<int>(token_ids.size());
  if (!override_values.empty() &&
      override_values.size() != static_cast<std::size_t>(t_len) * dim)
    throw DimensionError("embedding override has " + std::to_string(override_values.size()) +
                         " values, expected " + std::to_string(t_len * dim));

  for (int t = 0; t < t_len; ++t) {
    if (token_ids[t] < 0 || token_ids[t] >= vocab)
      throw IndexError("token id " + std::to_string(token_ids[t]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    if (positions[t] < 0 || positions[t] >= max_pos)
      throw IndexError("position " + std::to_string(positions[t]) +
                       " outside position table of size " + std::to_string(max_pos));
  }

  std::vector<double> out(static_cast<std::size_t>(t_len) * dim);
  if (!override_values.empty()) {
    std::copy(override_values.begin(), override_values.end(), out.begin());
  } else {
    const auto& tok = impl(token_table).data;
    const auto& pos = impl(position_table).data;
    for (int t = 0; t < t_len; ++t) {
      std::size_t ob = static_cast<std::size_t>(t) * dim;
      std::size_t tb = static_cast<std::size_t>(token_ids[t]) * dim;
      std::size_t pb = static_cast<std::size_t>(positions[t]) * dim;
      for (int j = 0; j < dim; ++j) out[ob + j] = tok[tb + j] + pos[pb + j];
    }
  }

  // The output is the gradient surface for input-space perturbations, so it
  // is tracked whenever recording is on at all, independent of the tables.
  Tensor y = make_output({t_len, dim}, std::move(out), track);
  if (track && t_len > 0) {
    std::vector<int> ids(token_ids.begin(), token_ids.end());
    std::vector<int> pss(positions.begin(), positions.end());
    tape.record({token_table, position_table}, y,
                [token_table, position_table, y, ids = std::move(ids), pss = std::move(pss), dim] {
                  const auto& go = scr(y);
                  auto& gt = scr(token_table);
                  auto& gp = scr(position_table);
                  for (std::size_t t = 0; t < ids.size(); ++t) {
                    std::size_t ob = t * dim;
                    std::size_t tb = static_cast<std::size_t>(ids[t]) * dim;
                    std::size_t pb = static_cast<std::size_t>(pss[t]) * dim;
                    for (int j = 0; j < dim; ++j) {
                      gt[tb + j] += go[ob + j];
                      gp[pb + j] += go[ob + j];
                    }
                  }
                });
  }
  return y;
}

}  // namespace convqa
