// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace convqa::kernels {

// Raw compute kernels behind the tensor engine. Each kernel exists twice:
// a serial reference implementation and an OpenMP variant. The OpenMP
// variant assigns each output row to exactly one thread and runs the same
// serial inner loop, so the two produce bit-identical results for any
// thread count. The serial path stays available for tests and benchmarks;
// dispatch goes through the process-wide backend switch.
enum class Backend { kSerial, kOpenMP };

Backend active_backend();
void set_backend(Backend b);

namespace serial {
// out[m x n] = a[m x k] * b[k x n]
void matmul(const double* a, const double* b, double* out, int m, int k, int n);
// ga[m x k] += g[m x n] * b[k x n]^T
void matmul_grad_lhs(const double* g, const double* b, double* ga, int m, int k, int n);
// gb[k x n] += a[m x k]^T * g[m x n]
void matmul_grad_rhs(const double* a, const double* g, double* gb, int m, int k, int n);
// Row-wise softmax with max subtraction.
void softmax_rows(const double* x, double* out, int rows, int cols);
}  // namespace serial

namespace omp {
void matmul(const double* a, const double* b, double* out, int m, int k, int n);
void matmul_grad_lhs(const double* g, const double* b, double* ga, int m, int k, int n);
void matmul_grad_rhs(const double* a, const double* g, double* gb, int m, int k, int n);
void softmax_rows(const double* x, double* out, int rows, int cols);
}  // namespace omp

// Dispatch on the active backend.
void matmul(const double* a, const double* b, double* out, int m, int k, int n);
void matmul_grad_lhs(const double* g, const double* b, double* ga, int m, int k, int n);
void matmul_grad_rhs(const double* a, const double* g, double* gb, int m, int k, int n);
void softmax_rows(const double* x, double* out, int rows, int cols);

}  // namespace convqa::kernels
