#pragma once

#include <cstddef>

// Dense compute kernels behind the tensor ops. Each kernel exists twice:
// a plain serial loop (the reference) and an OpenMP version parallelized
// over independent output elements. Both accumulate per output element in
// the same order with 64-bit accumulators, so their results are
// bit-identical and independent of the thread count.

namespace codac::kernels {

// Worker count for the OpenMP kernels and for coarse-grained fan-out
// (seed sweeps). 1 disables parallel regions entirely.
int thread_count();
void set_thread_count(int n);

// C[m x n] = A[m x k] * B[k x n]
void matmul_nn_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nn_omp(const double* a, const double* b, double* c, int m, int k, int n);

// C[m x n] = A[m x k] * B[n x k]^T
void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt_omp(const double* a, const double* b, double* c, int m, int k, int n);

// C[k x n] = A[m x k]^T * B[m x n]
void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn_omp(const double* a, const double* b, double* c, int m, int k, int n);

// Dilated 1-D convolution, same-length symmetric zero padding.
// x: [t_len x c_in], w: [c_out x c_in x ksize], y: [t_len x c_out]
void conv1d_serial(const double* x, const double* w, double* y,
                   int t_len, int c_in, int c_out, int ksize, int dilation);
void conv1d_omp(const double* x, const double* w, double* y,
                int t_len, int c_in, int c_out, int ksize, int dilation);

// Gradient w.r.t. x: gy [t_len x c_out] -> gx [t_len x c_in] (accumulated).
void conv1d_grad_x_serial(const double* gy, const double* w, double* gx,
                          int t_len, int c_in, int c_out, int ksize, int dilation);
void conv1d_grad_x_omp(const double* gy, const double* w, double* gx,
                       int t_len, int c_in, int c_out, int ksize, int dilation);

// Gradient w.r.t. w: gw [c_out x c_in x ksize] (accumulated).
void conv1d_grad_w_serial(const double* gy, const double* x, double* gw,
                          int t_len, int c_in, int c_out, int ksize, int dilation);
void conv1d_grad_w_omp(const double* gy, const double* x, double* gw,
                       int t_len, int c_in, int c_out, int ksize, int dilation);

// Dispatchers used by the tensor ops: OpenMP when thread_count() > 1.
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);
void conv1d(const double* x, const double* w, double* y,
            int t_len, int c_in, int c_out, int ksize, int dilation);
void conv1d_grad_x(const double* gy, const double* w, double* gx,
                   int t_len, int c_in, int c_out, int ksize, int dilation);
void conv1d_grad_w(const double* gy, const double* x, double* gw,
                   int t_len, int c_in, int c_out, int ksize, int dilation);

}  // namespace codac::kernels
