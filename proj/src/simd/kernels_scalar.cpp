#include "ssjdn/simd.hpp"

namespace ssjdn::simd {
namespace {

template <typename T>
T dot_scalar(const T* a, const T* b, std::size_t n) {
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

template <typename T>
void axpy_scalar(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void mul_scalar(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

}  // namespace

template <typename T>
const KernelTable<T>& scalar_kernels() {
  static const KernelTable<T> table{&dot_scalar<T>, &axpy_scalar<T>, &mul_scalar<T>};
  return table;
}

template const KernelTable<float>& scalar_kernels<float>();
template const KernelTable<double>& scalar_kernels<double>();

}  // namespace ssjdn::simd
