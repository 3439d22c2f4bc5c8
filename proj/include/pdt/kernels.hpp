#pragma once

// Dense matmul kernels behind the tensor ops. Row-major throughout.
// The float paths use AVX2+FMA when the build enables them; everything has a
// portable fallback. Within one build the results are bit-deterministic:
// each output element is computed by a fixed sequence of operations.

#include <cstdint>
#include <cstring>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define PDT_HAVE_AVX2 1
#endif

namespace pdt::detail {

template <class T>
inline T dot(const T* a, const T* b, int64_t n) {
  T acc = T(0);
#pragma omp simd reduction(+ : acc)
  for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
inline void axpy(T* y, T a, const T* x, int64_t n) {
#pragma omp simd
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[M,N] (+)= A[M,K] * B[K,N]
template <class T>
void mm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
           bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(T) * m * n);
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) axpy(crow, arow[p], b + p * n, n);
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <class T>
void mm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
           bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      T d = dot(arow, b + j * k, k);
      crow[j] = accumulate ? crow[j] + d : d;
    }
  }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <class T>
void mm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
           bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(T) * m * n);
  for (int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) axpy(c + i * n, arow[i], brow, n);
  }
}

#ifdef PDT_HAVE_AVX2

// 4-row x 16-col register tile; B rows stream through L1.
inline void mm_nn_f32(const float* a, const float* b, float* c, int64_t m,
                      int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * m * n);
  int64_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const float* a0 = a + (i + 0) * k;
    const float* a1 = a + (i + 1) * k;
    const float* a2 = a + (i + 2) * k;
    const float* a3 = a + (i + 3) * k;
    float* c0 = c + (i + 0) * n;
    float* c1 = c + (i + 1) * n;
    float* c2 = c + (i + 2) * n;
    float* c3 = c + (i + 3) * n;
    int64_t j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256 acc00 = _mm256_loadu_ps(c0 + j), acc01 = _mm256_loadu_ps(c0 + j + 8);
      __m256 acc10 = _mm256_loadu_ps(c1 + j), acc11 = _mm256_loadu_ps(c1 + j + 8);
      __m256 acc20 = _mm256_loadu_ps(c2 + j), acc21 = _mm256_loadu_ps(c2 + j + 8);
      __m256 acc30 = _mm256_loadu_ps(c3 + j), acc31 = _mm256_loadu_ps(c3 + j + 8);
      for (int64_t p = 0; p < k; ++p) {
        const float* brow = b + p * n + j;
        __m256 b0 = _mm256_loadu_ps(brow);
        __m256 b1 = _mm256_loadu_ps(brow + 8);
        __m256 va = _mm256_set1_ps(a0[p]);
        acc00 = _mm256_fmadd_ps(va, b0, acc00);
        acc01 = _mm256_fmadd_ps(va, b1, acc01);
        va = _mm256_set1_ps(a1[p]);
        acc10 = _mm256_fmadd_ps(va, b0, acc10);
        acc11 = _mm256_fmadd_ps(va, b1, acc11);
        va = _mm256_set1_ps(a2[p]);
        acc20 = _mm256_fmadd_ps(va, b0, acc20);
        acc21 = _mm256_fmadd_ps(va, b1, acc21);
        va = _mm256_set1_ps(a3[p]);
        acc30 = _mm256_fmadd_ps(va, b0, acc30);
        acc31 = _mm256_fmadd_ps(va, b1, acc31);
      }
      _mm256_storeu_ps(c0 + j, acc00);
      _mm256_storeu_ps(c0 + j + 8, acc01);
      _mm256_storeu_ps(c1 + j, acc10);
      _mm256_storeu_ps(c1 + j + 8, acc11);
      _mm256_storeu_ps(c2 + j, acc20);
      _mm256_storeu_ps(c2 + j + 8, acc21);
      _mm256_storeu_ps(c3 + j, acc30);
      _mm256_storeu_ps(c3 + j + 8, acc31);
    }
    for (; j < n; ++j) {
      float s0 = c0[j], s1 = c1[j], s2 = c2[j], s3 = c3[j];
      for (int64_t p = 0; p < k; ++p) {
        float bv = b[p * n + j];
        s0 += a0[p] * bv;
        s1 += a1[p] * bv;
        s2 += a2[p] * bv;
        s3 += a3[p] * bv;
      }
      c0[j] = s0;
      c1[j] = s1;
      c2[j] = s2;
      c3[j] = s3;
    }
  }
  for (; i < m; ++i) {
    float* crow = c + i * n;
    const float* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) axpy(crow, arow[p], b + p * n, n);
  }
}

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

inline float dot_f32(const float* a, const float* b, int64_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  }
  float s = hsum8(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void mm_nt_f32(const float* a, const float* b, float* c, int64_t m,
                      int64_t k, int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      float d = dot_f32(arow, b + j * k, k);
      crow[j] = accumulate ? crow[j] + d : d;
    }
  }
}

#endif  // PDT_HAVE_AVX2

template <class T>
inline void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k,
                      int64_t n, bool accumulate) {
#ifdef PDT_HAVE_AVX2
  if constexpr (std::is_same_v<T, float>) {
    mm_nn_f32(a, b, c, m, k, n, accumulate);
    return;
  }
#endif
  mm_nn(a, b, c, m, k, n, accumulate);
}

template <class T>
inline void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k,
                      int64_t n, bool accumulate) {
#ifdef PDT_HAVE_AVX2
  if constexpr (std::is_same_v<T, float>) {
    mm_nt_f32(a, b, c, m, k, n, accumulate);
    return;
  }
#endif
  mm_nt(a, b, c, m, k, n, accumulate);
}

template <class T>
inline void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k,
                      int64_t n, bool accumulate) {
  mm_tn(a, b, c, m, k, n, accumulate);
}

}  // namespace pdt::detail
