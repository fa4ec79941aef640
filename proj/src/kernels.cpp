#include "codac/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <vector>

namespace codac::kernels {

namespace {
std::atomic<int> g_threads{1};
}

int thread_count() { return g_threads.load(std::memory_order_relaxed); }

void set_thread_count(int n) {
  g_threads.store(std::max(1, n), std::memory_order_relaxed);
}

// Row-parallel, k-outer accumulation: every output element sums its k terms
// in ascending order in both variants.
void matmul_nn_serial(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_nn_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) num_threads(g_threads.load())
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = acc;
    }
  }
}

void matmul_nt_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) num_threads(g_threads.load())
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = acc;
    }
  }
}

void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < k; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * n;
    std::fill(ci, ci + n, 0.0);
    for (int p = 0; p < m; ++p) {
      const double api = a[static_cast<std::size_t>(p) * k + i];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void matmul_tn_omp(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) num_threads(g_threads.load())
  for (int i = 0; i < k; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * n;
    std::fill(ci, ci + n, 0.0);
    for (int p = 0; p < m; ++p) {
      const double api = a[static_cast<std::size_t>(p) * k + i];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

namespace {

inline void conv1d_point(const double* x, const double* w, double* y,
                         int t, int t_len, int c_in, int c_out, int ksize, int dilation) {
  const int pad = (ksize - 1) * dilation / 2;
  for (int co = 0; co < c_out; ++co) {
    const double* wc = w + static_cast<std::size_t>(co) * c_in * ksize;
    double acc = 0.0;
    for (int ci = 0; ci < c_in; ++ci) {
      for (int kk = 0; kk < ksize; ++kk) {
        const int src = t + (kk * dilation - pad);
        if (src < 0 || src >= t_len) continue;
        acc += x[static_cast<std::size_t>(src) * c_in + ci] * wc[ci * ksize + kk];
      }
    }
    y[static_cast<std::size_t>(t) * c_out + co] = acc;
  }
}

inline void conv1d_grad_x_point(const double* gy, const double* w, double* gx,
                                int t, int t_len, int c_in, int c_out, int ksize, int dilation) {
  const int pad = (ksize - 1) * dilation / 2;
  for (int ci = 0; ci < c_in; ++ci) {
    double acc = 0.0;
    // y[t', co] depends on x[t, ci] when t = t' + k*dilation - pad.
    for (int kk = 0; kk < ksize; ++kk) {
      const int tp = t - (kk * dilation - pad);
      if (tp < 0 || tp >= t_len) continue;
      const double* g = gy + static_cast<std::size_t>(tp) * c_out;
      for (int co = 0; co < c_out; ++co) {
        acc += g[co] * w[(static_cast<std::size_t>(co) * c_in + ci) * ksize + kk];
      }
    }
    gx[static_cast<std::size_t>(t) * c_in + ci] += acc;
  }
}

inline void conv1d_grad_w_chan(const double* gy, const double* x, double* gw,
                               int co, int t_len, int c_in, int c_out, int ksize, int dilation) {
  const int pad = (ksize - 1) * dilation / 2;
  for (int ci = 0; ci < c_in; ++ci) {
    for (int kk = 0; kk < ksize; ++kk) {
      double acc = 0.0;
      for (int t = 0; t < t_len; ++t) {
        const int src = t + (kk * dilation - pad);
        if (src < 0 || src >= t_len) continue;
        acc += gy[static_cast<std::size_t>(t) * c_out + co] *
               x[static_cast<std::size_t>(src) * c_in + ci];
      }
      gw[(static_cast<std::size_t>(co) * c_in + ci) * ksize + kk] += acc;
    }
  }
}

}  // namespace

void conv1d_serial(const double* x, const double* w, double* y,
                   int t_len, int c_in, int c_out, int ksize, int dilation) {
  for (int t = 0; t < t_len; ++t) conv1d_point(x, w, y, t, t_len, c_in, c_out, ksize, dilation);
}

void conv1d_omp(const double* x, const double* w, double* y,
                int t_len, int c_in, int c_out, int ksize, int dilation) {
#pragma omp parallel for schedule(static) num_threads(g_threads.load())
  for (int t = 0; t < t_len; ++t) conv1d_point(x, w, y, t, t_len, c_in, c_out, ksize, dilation);
}

void conv1d_grad_x_serial(const double* gy, const double* w, double* gx,
                          int t_len, int c_in, int c_out, int ksize, int dilation) {
  for (int t = 0; t < t_len; ++t)
    conv1d_grad_x_point(gy, w, gx, t, t_len, c_in, c_out, ksize, dilation);
}

void conv1d_grad_x_omp(const double* gy, const double* w, double* gx,
                       int t_len, int c_in, int c_out, int ksize, int dilation) {
#pragma omp parallel for schedule(static) num_threads(g_threads.load())
  for (int t = 0; t < t_len; ++t)
    conv1d_grad_x_point(gy, w, gx, t, t_len, c_in, c_out, ksize, dilation);
}

void conv1d_grad_w_serial(const double* gy, const double* x, double* gw,
                          int t_len, int c_in, int c_out, int ksize, int dilation) {
  for (int co = 0; co < c_out; ++co)
    conv1d_grad_w_chan(gy, x, gw, co, t_len, c_in, c_out, ksize, dilation);
}

void conv1d_grad_w_omp(const double* gy, const double* x, double* gw,
                       int t_len, int c_in, int c_out, int ksize, int dilation) {
#pragma omp parallel for schedule(static) num_threads(g_threads.load())
  for (int co = 0; co < c_out; ++co)
    conv1d_grad_w_chan(gy, x, gw, co, t_len, c_in, c_out, ksize, dilation);
}

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  if (thread_count() > 1) matmul_nn_omp(a, b, c, m, k, n);
  else matmul_nn_serial(a, b, c, m, k, n);
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  if (thread_count() > 1) matmul_nt_omp(a, b, c, m, k, n);
  else matmul_nt_serial(a, b, c, m, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  if (thread_count() > 1) matmul_tn_omp(a, b, c, m, k, n);
  else matmul_tn_serial(a, b, c, m, k, n);
}

void conv1d(const double* x, const double* w, double* y,
            int t_len, int c_in, int c_out, int ksize, int dilation) {
  if (thread_count() > 1) conv1d_omp(x, w, y, t_len, c_in, c_out, ksize, dilation);
  else conv1d_serial(x, w, y, t_len, c_in, c_out, ksize, dilation);
}

void conv1d_grad_x(const double* gy, const double* w, double* gx,
                   int t_len, int c_in, int c_out, int ksize, int dilation) {
  if (thread_count() > 1) conv1d_grad_x_omp(gy, w, gx, t_len, c_in, c_out, ksize, dilation);
  else conv1d_grad_x_serial(gy, w, gx, t_len, c_in, c_out, ksize, dilation);
}

void conv1d_grad_w(const double* gy, const double* x, double* gw,
                   int t_len, int c_in, int c_out, int ksize, int dilation) {
  if (thread_count() > 1) conv1d_grad_w_omp(gy, x, gw, t_len, c_in, c_out, ksize, dilation);
  else conv1d_grad_w_serial(gy, x, gw, t_len, c_in, c_out, ksize, dilation);
}

}  // namespace codac::kernels
