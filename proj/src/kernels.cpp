// SPDX-License-Identifier: Apache-2.0
#include "convqa/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace convqa::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::kOpenMP};

// Below these sizes the parallel region costs more than the loop.
constexpr long long kMatmulMinFlops = 16384;
constexpr long long kSoftmaxMinElems = 4096;

inline void matmul_row(const double* a, const double* b, double* out_row,
                       int i, int k, int n) {
  double* row = out_row;
  std::fill(row, row + n, 0.0);
  const double* arow = a + static_cast<long long>(i) * k;
  for (int t = 0; t < k; ++t) {
    double av = arow[t];
    const double* brow = b + static_cast<long long>(t) * n;
    for (int j = 0; j < n; ++j) row[j] += av * brow[j];
  }
}

inline void grad_lhs_row(const double* g, const double* b, double* ga,
                         int i, int k, int n) {
  const double* grow = g + static_cast<long long>(i) * n;
  double* garow = ga + static_cast<long long>(i) * k;
  for (int t = 0; t < k; ++t) {
    const double* brow = b + static_cast<long long>(t) * n;
    double acc = 0.0;
    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
    garow[t] += acc;
  }
}

inline void grad_rhs_row(const double* a, const double* g, double* gb,
                         int t, int m, int k, int n) {
  double* gbrow = gb + static_cast<long long>(t) * n;
  for (int i = 0; i < m; ++i) {
    double av = a[static_cast<long long>(i) * k + t];
    const double* grow = g + static_cast<long long>(i) * n;
    for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
  }
}

inline void softmax_row(const double* x, double* out, int cols) {
  double mx = x[0];
  for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  double sum = 0.0;
  for (int j = 0; j < cols; ++j) {
    double e = std::exp(x[j] - mx);
    out[j] = e;
    sum += e;
  }
  double inv = 1.0 / sum;
  for (int j = 0; j < cols; ++j) out[j] *= inv;
}
}  // namespace

Backend active_backend() { return g_backend.load(std::memory_order_relaxed); }
void set_backend(Backend b) { g_backend.store(b, std::memory_order_relaxed); }

namespace serial {

void matmul(const double* a, const double* b, double* out, int m, int k, int n) {
  for (int i = 0; i < m; ++i) matmul_row(a, b, out + static_cast<long long>(i) * n, i, k, n);
}

void matmul_grad_lhs(const double* g, const double* b, double* ga, int m, int k, int n) {
  for (int i = 0; i < m; ++i) grad_lhs_row(g, b, ga, i, k, n);
}

void matmul_grad_rhs(const double* a, const double* g, double* gb, int m, int k, int n) {
  for (int t = 0; t < k; ++t) grad_rhs_row(a, g, gb, t, m, k, n);
}

void softmax_rows(const double* x, double* out, int rows, int cols) {
  for (int i = 0; i < rows; ++i)
    softmax_row(x + static_cast<long long>(i) * cols, out + static_cast<long long>(i) * cols, cols);
}

}  // namespace serial

namespace omp {

void matmul(const double* a, const double* b, double* out, int m, int k, int n) {
  long long flops = static_cast<long long>(m) * k * n;
#pragma omp parallel for schedule(static) if (flops >= kMatmulMinFlops)
  for (int i = 0; i < m; ++i) matmul_row(a, b, out + static_cast<long long>(i) * n, i, k, n);
}

void matmul_grad_lhs(const double* g, const double* b, double* ga, int m, int k, int n) {
  long long flops = static_cast<long long>(m) * k * n;
#pragma omp parallel for schedule(static) if (flops >= kMatmulMinFlops)
  for (int i = 0; i < m; ++i) grad_lhs_row(g, b, ga, i, k, n);
}

void matmul_grad_rhs(const double* a, const double* g, double* gb, int m, int k, int n) {
  long long flops = static_cast<long long>(m) * k * n;
#pragma omp parallel for schedule(static) if (flops >= kMatmulMinFlops)
  for (int t = 0; t < k; ++t) grad_rhs_row(a, g, gb, t, m, k, n);
}

void softmax_rows(const double* x, double* out, int rows, int cols) {
  long long elems = static_cast<long long>(rows) * cols;
#pragma omp parallel for schedule(static) if (elems >= kSoftmaxMinElems)
  for (int i = 0; i < rows; ++i)
    softmax_row(x + static_cast<long long>(i) * cols, out + static_cast<long long>(i) * cols, cols);
}

}  // namespace omp

void matmul(const double* a, const double* b, double* out, int m, int k, int n) {
  if (active_backend() == Backend::kOpenMP)
    omp::matmul(a, b, out, m, k, n);
  else
    serial::matmul(a, b, out, m, k, n);
}

void matmul_grad_lhs(const double* g, const double* b, double* ga, int m, int k, int n) {
  if (active_backend() == Backend::kOpenMP)
    omp::matmul_grad_lhs(g, b, ga, m, k, n);
  else
    serial::matmul_grad_lhs(g, b, ga, m, k, n);
}

void matmul_grad_rhs(const double* a, const double* g, double* gb, int m, int k, int n) {
  if (active_backend() == Backend::kOpenMP)
    omp::matmul_grad_rhs(a, g, gb, m, k, n);
  else
    serial::matmul_grad_rhs(a, g, gb, m, k, n);
}

void softmax_rows(const double* x, double* out, int rows, int cols) {
  if (active_backend() == Backend::kOpenMP)
    omp::softmax_rows(x, out, rows, cols);
  else
    serial::softmax_rows(x, out, rows, cols);
}

}  // namespace convqa::kernels
