#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

// Data-parallel compute kernels. Every parallel kernel partitions work by
// output element (rows of C, rows of a softmax, one (batch, head) pair), so
// the per-element accumulation order is identical to the serial reference and
// results are bit-identical at any thread count. The *_serial variants are
// kept as the reference implementations for tests and the benchmark tool.
//
// The per-unit workers are noinline: with fp contraction enabled the
// compiler would otherwise specialize each call site with different fma
// placement, and the parallel/serial results would stop being bit-equal.
#if defined(__GNUC__) || defined(__clang__)
#define WM_NOINLINE __attribute__((noinline))
#else
#define WM_NOINLINE
#endif

namespace wm::kernels {

// Work size below which spawning threads costs more than it saves.
inline constexpr int64_t kParallelCutoff = 16 * 1024;

// ---------------------------------------------------------------- gemm
// C[m x n] (+)= A[m x k] * B[k x n]

template <typename T>
WM_NOINLINE void gemm_nn_serial(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (!accumulate)
      for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
    const T* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
#pragma omp parallel for schedule(static) if (m * k * n > kParallelCutoff)
  for (int64_t i = 0; i < m; ++i) gemm_nn_serial(a + i * k, b, c + i * n, 1, k, n, accumulate);
}

// C[m x n] (+)= A[m x k] * B[n x k]^T. The per-element accumulation runs
// over ascending p either way, so the transpose-and-stream variant used for
// large shapes is bit-identical to the reference dot loop.
template <typename T>
WM_NOINLINE void gemm_nt_serial(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = accumulate ? ci[j] : T(0);
      for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = acc;
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
  if (m * k * n <= kParallelCutoff) {
    gemm_nt_serial(a, b, c, m, k, n, accumulate);
    return;
  }
  std::vector<T> bt(static_cast<size_t>(k * n));
#pragma omp parallel
  {
#pragma omp for schedule(static)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t p = 0; p < k; ++p) bt[static_cast<size_t>(p * n + j)] = b[j * k + p];
#pragma omp for schedule(static)
    for (int64_t i = 0; i < m; ++i) gemm_nn_serial(a + i * k, bt.data(), c + i * n, 1, k, n, accumulate);
  }
}

// C[m x n] (+)= A[k x m]^T * B[k x n], one output row per work unit
template <typename T>
WM_NOINLINE void gemm_tn_row(const T* a, const T* b, T* c, int64_t i, int64_t m, int64_t k, int64_t n, bool accumulate) {
  T* ci = c + i * n;
  if (!accumulate)
    for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
  for (int64_t p = 0; p < k; ++p) {
    const T av = a[p * m + i];
    const T* bp = b + p * n;
    for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

template <typename T>
void gemm_tn_serial(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) gemm_tn_row(a, b, c, i, m, k, n, accumulate);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
#pragma omp parallel for schedule(static) if (m * k * n > kParallelCutoff)
  for (int64_t i = 0; i < m; ++i) gemm_tn_row(a, b, c, i, m, k, n, accumulate);
}

// ---------------------------------------------------------------- softmax

// In-place log-softmax of each length-`cols` row, max-subtraction stabilized.
// Row sums are accumulated in double regardless of T.
template <typename T>
WM_NOINLINE void log_softmax_rows_serial(T* x, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    T* row = x + r * cols;
    T mx = row[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    const T lse = mx + static_cast<T>(std::log(sum));
    for (int64_t j = 0; j < cols; ++j) row[j] -= lse;
  }
}

template <typename T>
void log_softmax_rows(T* x, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > kParallelCutoff)
  for (int64_t r = 0; r < rows; ++r) log_softmax_rows_serial(x + r * cols, 1, cols);
}

template <typename T>
WM_NOINLINE void softmax_rows_serial(T* x, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    T* row = x + r * cols;
    T mx = row[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      row[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)));
      sum += static_cast<double>(row[j]);
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (int64_t j = 0; j < cols; ++j) row[j] *= inv;
  }
}

template <typename T>
void softmax_rows(T* x, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > kParallelCutoff)
  for (int64_t r = 0; r < rows; ++r) softmax_rows_serial(x + r * cols, 1, cols);
}

// ---------------------------------------------------------------- layer norm

// y = (x - mean) / sqrt(var + eps) * gain + bias, per row. Mean/var in double.
template <typename T>
WM_NOINLINE void layer_norm_rows_serial(const T* x, const T* gain, const T* bias, T* y, int64_t rows, int64_t cols,
                            double eps) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    double mean = 0.0;
    for (int64_t j = 0; j < cols; ++j) mean += static_cast<double>(xr[j]);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double d = static_cast<double>(xr[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < cols; ++j)
      yr[j] = static_cast<T>((static_cast<double>(xr[j]) - mean) * inv_std) * gain[j] + bias[j];
  }
}

template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* y, int64_t rows, int64_t cols, double eps) {
#pragma omp parallel for schedule(static) if (rows * cols > kParallelCutoff)
  for (int64_t r = 0; r < rows; ++r) layer_norm_rows_serial(x + r * cols, gain, bias, y + r * cols, 1, cols, eps);
}

// Backward of layer_norm_rows. Accumulates into dx, dgain, dbias. dgain/dbias
// accumulation is a column reduction, kept serial for determinism.
template <typename T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* dy, T* dx, T* dgain, T* dbias, int64_t rows,
                              int64_t cols, double eps) {
#pragma omp parallel for schedule(static) if (rows * cols > kParallelCutoff)
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    const T* dyr = dy + r * cols;
    T* dxr = dx + r * cols;
    double mean = 0.0;
    for (int64_t j = 0; j < cols; ++j) mean += static_cast<double>(xr[j]);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double d = static_cast<double>(xr[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    // dl/dxhat_j = dy_j * gain_j ; fold the two row reductions
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double xhat = (static_cast<double>(xr[j]) - mean) * inv_std;
      const double dxhat = static_cast<double>(dyr[j]) * static_cast<double>(gain[j]);
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
    }
    const double inv_cols = 1.0 / static_cast<double>(cols);
    for (int64_t j = 0; j < cols; ++j) {
      const double xhat = (static_cast<double>(xr[j]) - mean) * inv_std;
      const double dxhat = static_cast<double>(dyr[j]) * static_cast<double>(gain[j]);
      dxr[j] += static_cast<T>((dxhat - inv_cols * sum_dxhat - xhat * inv_cols * sum_dxhat_xhat) * inv_std);
    }
  }
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    const T* dyr = dy + r * cols;
    double mean = 0.0;
    for (int64_t j = 0; j < cols; ++j) mean += static_cast<double>(xr[j]);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double d = static_cast<double>(xr[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < cols; ++j) {
      const double xhat = (static_cast<double>(xr[j]) - mean) * inv_std;
      dgain[j] += dyr[j] * static_cast<T>(xhat);
      dbias[j] += dyr[j];
    }
  }
}

// ---------------------------------------------------------------- attention

// Causal multi-head attention over row-major [B*T, C] projections. One
// (batch, head) pair is the unit of work; the parallel and serial drivers
// call the same per-pair routine, so their results are bit-identical.
// `scores` is caller-provided scratch of size B*H*T*T, retained for backward.
template <typename T>
WM_NOINLINE void attention_head_forward(const T* q, const T* k, const T* v, T* scores, T* out, int64_t b, int64_t h,
                            int64_t Tlen, int64_t n_heads, int64_t C) {
  const int64_t hd = C / n_heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  T* sc = scores + ((b * n_heads + h) * Tlen) * Tlen;
  for (int64_t t = 0; t < Tlen; ++t) {
    const T* qt = q + (b * Tlen + t) * C + h * hd;
    T* sct = sc + t * Tlen;
    for (int64_t u = 0; u <= t; ++u) {
      const T* ku = k + (b * Tlen + u) * C + h * hd;
      T acc = T(0);
      for (int64_t d = 0; d < hd; ++d) acc += qt[d] * ku[d];
      sct[u] = acc * scale;
    }
    softmax_rows_serial(sct, 1, t + 1);
    for (int64_t u = t + 1; u < Tlen; ++u) sct[u] = T(0);
    T* ot = out + (b * Tlen + t) * C + h * hd;
    for (int64_t d = 0; d < hd; ++d) ot[d] = T(0);
    for (int64_t u = 0; u <= t; ++u) {
      const T w = sct[u];
      const T* vu = v + (b * Tlen + u) * C + h * hd;
      for (int64_t d = 0; d < hd; ++d) ot[d] += w * vu[d];
    }
  }
}

template <typename T>
void attention_forward(const T* q, const T* k, const T* v, T* scores, T* out, int64_t B, int64_t Tlen,
                       int64_t n_heads, int64_t C) {
#pragma omp parallel for schedule(static) collapse(2)
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < n_heads; ++h) attention_head_forward(q, k, v, scores, out, b, h, Tlen, n_heads, C);
}

template <typename T>
void attention_forward_serial(const T* q, const T* k, const T* v, T* scores, T* out, int64_t B, int64_t Tlen,
                              int64_t n_heads, int64_t C) {
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < n_heads; ++h) attention_head_forward(q, k, v, scores, out, b, h, Tlen, n_heads, C);
}

// Backward of attention_forward. Accumulates into dq, dk, dv. Each (b, h)
// pair owns disjoint slices of all six gradient regions, so the parallel
// partition stays race-free and deterministic.
template <typename T>
void attention_backward(const T* q, const T* k, const T* v, const T* scores, const T* dout, T* dq, T* dk, T* dv,
                        int64_t B, int64_t Tlen, int64_t n_heads, int64_t C) {
  const int64_t hd = C / n_heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
#pragma omp parallel for schedule(static) collapse(2)
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t h = 0; h < n_heads; ++h) {
      const T* sc = scores + ((b * n_heads + h) * Tlen) * Tlen;
      std::vector<T> dsc(static_cast<size_t>(Tlen));
      for (int64_t t = 0; t < Tlen; ++t) {
        const T* sct = sc + t * Tlen;
        const T* dot = dout + (b * Tlen + t) * C + h * hd;
        // dV and d(softmax weights)
        for (int64_t u = 0; u <= t; ++u) {
          const T* vu = v + (b * Tlen + u) * C + h * hd;
          T* dvu = dv + (b * Tlen + u) * C + h * hd;
          T acc = T(0);
          for (int64_t d = 0; d < hd; ++d) {
            acc += dot[d] * vu[d];
            dvu[d] += sct[u] * dot[d];
          }
          dsc[static_cast<size_t>(u)] = acc;
        }
        // softmax backward: ds_u = w_u * (dw_u - sum_j w_j dw_j)
        double dot_ws = 0.0;
        for (int64_t u = 0; u <= t; ++u) dot_ws += static_cast<double>(sct[u]) * static_cast<double>(dsc[static_cast<size_t>(u)]);
        const T* qt = q + (b * Tlen + t) * C + h * hd;
        T* dqt = dq + (b * Tlen + t) * C + h * hd;
        for (int64_t u = 0; u <= t; ++u) {
          const T ds = sct[u] * (dsc[static_cast<size_t>(u)] - static_cast<T>(dot_ws));
          const T dlogit = ds * scale;
          const T* ku = k + (b * Tlen + u) * C + h * hd;
          T* dku = dk + (b * Tlen + u) * C + h * hd;
          for (int64_t d = 0; d < hd; ++d) {
            dqt[d] += dlogit * ku[d];
            dku[d] += dlogit * qt[d];
          }
        }
      }
    }
  }
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace wm::kernels
