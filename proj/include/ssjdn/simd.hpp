#pragma once

#include <cstddef>
#include <span>
#include <string_view>

// Inner-loop arithmetic used by every layer. Each kernel has a portable
// scalar reference and an AVX2+FMA variant; the active backend is chosen
// once at startup from CPU detection and can be forced with SSJDN_SIMD.

namespace ssjdn::simd {

enum class Backend { scalar, avx2 };

bool avx2_available();

Backend active_backend();
// Throws if avx2 is requested on a CPU without AVX2/FMA.
void set_backend(Backend backend);
std::string_view backend_name(Backend backend);

template <typename T>
struct KernelTable {
  T (*dot)(const T* a, const T* b, std::size_t n);
  // y += a * x
  void (*axpy)(T a, const T* x, T* y, std::size_t n);
  // out = a * b (elementwise)
  void (*mul)(const T* a, const T* b, T* out, std::size_t n);
};

template <typename T>
const KernelTable<T>& scalar_kernels();
template <typename T>
const KernelTable<T>& avx2_kernels();
template <typename T>
const KernelTable<T>& kernels();

template <typename T>
inline T dot(std::span<const T> a, std::span<const T> b) {
  return kernels<T>().dot(a.data(), b.data(), a.size());
}

template <typename T>
inline void axpy(T a, std::span<const T> x, std::span<T> y) {
  kernels<T>().axpy(a, x.data(), y.data(), x.size());
}

template <typename T>
inline void mul(std::span<const T> a, std::span<const T> b, std::span<T> out) {
  kernels<T>().mul(a.data(), b.data(), out.data(), a.size());
}

}  // namespace ssjdn::simd
