#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>

namespace dst::num::kernels {

namespace detail {

typedef double v8d __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof(v)); }

inline void add8(double* p, v8d v) { store8(p, load8(p) + v); }

}  // namespace detail

inline void gemm_panel(std::size_t m, std::size_t k, std::size_t n, const double* a, std::size_t lda,
                       const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  using detail::v8d;
  constexpr std::size_t R = 6;
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) {
    std::size_t i = 0;
    for (; i + R <= m; i += R) {
      v8d acc[R][2] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const v8d b0 = detail::load8(b + p * ldb + j);
        const v8d b1 = detail::load8(b + p * ldb + j + 8);
        for (std::size_t r = 0; r < R; ++r) {
          const double av = a[(i + r) * lda + p];
          acc[r][0] += av * b0;
          acc[r][1] += av * b1;
        }
      }
      for (std::size_t r = 0; r < R; ++r) {
        double* cr = c + (i + r) * ldc + j;
        if (accumulate) {
          detail::add8(cr, acc[r][0]);
          detail::add8(cr + 8, acc[r][1]);
        } else {
          detail::store8(cr, acc[r][0]);
          detail::store8(cr + 8, acc[r][1]);
        }
      }
    }
    for (; i < m; ++i) {
      v8d a0 = {}, a1 = {};
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * lda + p];
        a0 += av * detail::load8(b + p * ldb + j);
        a1 += av * detail::load8(b + p * ldb + j + 8);
      }
      double* cr = c + i * ldc + j;
      if (accumulate) {
        detail::add8(cr, a0);
        detail::add8(cr + 8, a1);
      } else {
        detail::store8(cr, a0);
        detail::store8(cr + 8, a1);
      }
    }
  }
  for (; j + 8 <= n; j += 8) {
    std::size_t i = 0;
    for (; i + R <= m; i += R) {
      v8d acc[R] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const v8d b0 = detail::load8(b + p * ldb + j);
        for (std::size_t r = 0; r < R; ++r) acc[r] += a[(i + r) * lda + p] * b0;
      }
      for (std::size_t r = 0; r < R; ++r) {
        double* cr = c + (i + r) * ldc + j;
        if (accumulate)
          detail::add8(cr, acc[r]);
        else
          detail::store8(cr, acc[r]);
      }
    }
    for (; i < m; ++i) {
      v8d a0 = {};
      for (std::size_t p = 0; p < k; ++p) a0 += a[i * lda + p] * detail::load8(b + p * ldb + j);
      double* cr = c + i * ldc + j;
      if (accumulate)
        detail::add8(cr, a0);
      else
        detail::store8(cr, a0);
    }
  }
  if (j < n) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t jj = j; jj < n; ++jj) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[i * lda + p] * b[p * ldb + jj];
        if (accumulate)
          c[i * ldc + jj] += s;
        else
          c[i * ldc + jj] = s;
      }
    }
  }
}

// C[m x n] (+)= A[m x k] * B[k x n], all row-major with explicit leading
// dimensions. k is consumed in ascending panels of kPanel so B stays in cache.
inline void gemm(std::size_t m, std::size_t k, std::size_t n, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t kPanel = 256;
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0);
    return;
  }
  for (std::size_t p = 0; p < k; p += kPanel) {
    gemm_panel(m, std::min(kPanel, k - p), n, a + p, lda, b + p * ldb, ldb, c, ldc, accumulate || p > 0);
  }
}

// out[cols x rows] = in[rows x cols]^T
inline void transpose(std::size_t rows, std::size_t cols, const double* in, std::size_t ldi,
                      double* out, std::size_t ldo) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * ldo + i] = in[i * ldi + j];
}

inline double dot(const double* a, const double* b, std::size_t n) {
  if (n == 8) {
    const detail::v8d p = detail::load8(a) * detail::load8(b);
    double s = 0.0;
    for (int i = 0; i < 8; ++i) s += p[i];
    return s;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  if (n == 8) {
    detail::add8(y, alpha * detail::load8(x));
    return;
  }
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace dst::num::kernels
