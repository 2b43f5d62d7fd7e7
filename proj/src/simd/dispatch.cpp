#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "ssjdn/simd.hpp"

namespace ssjdn::simd {
namespace {

Backend detect() {
  if (const char* env = std::getenv("SSJDN_SIMD")) {
    const std::string value(env);
    if (value == "scalar") return Backend::scalar;
    if (value == "avx2" && avx2_available()) return Backend::avx2;
  }
  return avx2_available() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend>& backend_slot() {
  static std::atomic<Backend> slot{detect()};
  return slot;
}

}  // namespace

Backend active_backend() { return backend_slot().load(std::memory_order_relaxed); }

void set_backend(Backend backend) {
  if (backend == Backend::avx2 && !avx2_available()) {
    throw std::runtime_error("avx2 backend requested but the CPU lacks AVX2/FMA");
  }
  backend_slot().store(backend, std::memory_order_relaxed);
}

std::string_view backend_name(Backend backend) {
  return backend == Backend::avx2 ? "avx2" : "scalar";
}

template <typename T>
const KernelTable<T>& kernels() {
  return active_backend() == Backend::avx2 ? avx2_kernels<T>() : scalar_kernels<T>();
}

template const KernelTable<float>& kernels<float>();
template const KernelTable<double>& kernels<double>();

}  // namespace ssjdn::simd
