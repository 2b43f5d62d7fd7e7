#include <doctest.h>

#include <random>
#include <vector>

#include "ssjdn/simd.hpp"

using namespace ssjdn;

namespace {

template <typename T>
std::vector<T> draw(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

// Lengths straddling the vector widths and their remainders.
const std::size_t kLengths[] = {0, 1, 3, 4, 7, 8, 9, 15, 16, 17, 31, 33, 64, 100, 257};

template <typename T>
void check_equivalence(double dot_tol) {
  const auto& s = simd::scalar_kernels<T>();
  const auto& v = simd::avx2_kernels<T>();
  std::mt19937_64 rng(11);
  for (std::size_t n : kLengths) {
    CAPTURE(n);
    const auto a = draw<T>(n, rng), b = draw<T>(n, rng);
    const T ds = s.dot(a.data(), b.data(), n), dv = v.dot(a.data(), b.data(), n);
    CHECK(static_cast<double>(dv) == doctest::Approx(static_cast<double>(ds)).epsilon(dot_tol));

    auto ys = draw<T>(n, rng);
    auto yv = ys;
    s.axpy(T(0.75), a.data(), ys.data(), n);
    v.axpy(T(0.75), a.data(), yv.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(static_cast<double>(yv[i]) == doctest::Approx(static_cast<double>(ys[i])).epsilon(1e-6));

    std::vector<T> ms(n), mv(n);
    s.mul(a.data(), b.data(), ms.data(), n);
    v.mul(a.data(), b.data(), mv.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(mv[i] == ms[i]);
  }
}

}  // namespace

TEST_CASE("scalar kernels against a plain loop") {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, -1, 0.5, 3, -2};
  CHECK(simd::scalar_kernels<double>().dot(a.data(), b.data(), 5) == doctest::Approx(2 - 2 + 1.5 + 12 - 10));
  std::vector<double> y{1, 1, 1, 1, 1};
  simd::scalar_kernels<double>().axpy(2.0, a.data(), y.data(), 5);
  CHECK(y == std::vector<double>{3, 5, 7, 9, 11});
}

TEST_CASE("avx2 kernels match the scalar reference") {
  if (!simd::avx2_available()) {
    MESSAGE("AVX2 not available; skipping");
    return;
  }
  check_equivalence<float>(1e-5);
  check_equivalence<double>(1e-12);
}

TEST_CASE("backend switching") {
  const auto before = simd::active_backend();
  simd::set_backend(simd::Backend::scalar);
  CHECK(simd::active_backend() == simd::Backend::scalar);
  CHECK(&simd::kernels<float>() == &simd::scalar_kernels<float>());
  if (simd::avx2_available()) {
    simd::set_backend(simd::Backend::avx2);
    CHECK(&simd::kernels<double>() == &simd::avx2_kernels<double>());
  } else {
    CHECK_THROWS(simd::set_backend(simd::Backend::avx2));
  }
  simd::set_backend(before);
  CHECK(simd::backend_name(simd::Backend::scalar) == "scalar");
}
