#include "ssjdn/simd.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define SSJDN_X86 1
#include <immintrin.h>
#else
#define SSJDN_X86 0
#endif

namespace ssjdn::simd {

#if SSJDN_X86
namespace {

#define SSJDN_AVX2 __attribute__((target("avx2,fma")))

SSJDN_AVX2 inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 acc = _mm_add_ps(lo, hi);
  acc = _mm_hadd_ps(acc, acc);
  acc = _mm_hadd_ps(acc, acc);
  return _mm_cvtss_f32(acc);
}

SSJDN_AVX2 inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  __m128d acc = _mm_add_pd(lo, hi);
  acc = _mm_hadd_pd(acc, acc);
  return _mm_cvtsd_f64(acc);
}

SSJDN_AVX2 float dot_avx2(const float* a, const float* b, std::size_t n) {
  __m256 s0 = _mm256_setzero_ps();
  __m256 s1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), s1);
  }
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s0);
  }
  float sum = hsum(_mm256_add_ps(s0, s1));
  for (; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

SSJDN_AVX2 double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
  }
  double sum = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

SSJDN_AVX2 void axpy_avx2(float a, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

SSJDN_AVX2 void axpy_avx2(double a, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

SSJDN_AVX2 void mul_avx2(const float* a, const float* b, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

SSJDN_AVX2 void mul_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

#undef SSJDN_AVX2

}  // namespace

template <typename T>
const KernelTable<T>& avx2_kernels() {
  static const KernelTable<T> table{
      static_cast<T (*)(const T*, const T*, std::size_t)>(&dot_avx2),
      static_cast<void (*)(T, const T*, T*, std::size_t)>(&axpy_avx2),
      static_cast<void (*)(const T*, const T*, T*, std::size_t)>(&mul_avx2)};
  return table;
}

bool avx2_available() {
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

#else

template <typename T>
const KernelTable<T>& avx2_kernels() {
  return scalar_kernels<T>();
}

bool avx2_available() { return false; }

#endif

template const KernelTable<float>& avx2_kernels<float>();
template const KernelTable<double>& avx2_kernels<double>();

}  // namespace ssjdn::simd
