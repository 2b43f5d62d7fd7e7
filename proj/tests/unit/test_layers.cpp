#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "ssjdn/layers.hpp"
#include "ssjdn/simd.hpp"

using namespace ssjdn;

TEST_CASE("conv output size and padding") {
  Conv2d<float> same(ConvSpec{2, 3, 3, 1, 1});
  CHECK(same.output_size(10) == 10);
  Conv2d<float> strided(ConvSpec{2, 3, 3, 2, 1});
  CHECK(strided.output_size(64) == 32);
  Conv2d<float> dilated(ConvSpec{2, 3, 3, 1, 6});
  CHECK(dilated.padding() == 6);
  CHECK(dilated.output_size(16) == 16);
  Conv2d<float> seven(ConvSpec{2, 1, 7, 1, 1});
  CHECK(seven.padding() == 3);
}

TEST_CASE("conv forward against a direct convolution") {
  std::mt19937_64 rng(4);
  Conv2d<double> conv(ConvSpec{2, 3, 3, 2, 2});
  conv.init(rng);
  for (auto& b : conv.bias.value) b = 0.05;
  Tensor3<double> x(7, 8, 2);
  x.data = testing::random_vector(x.size(), rng);
  const auto y = conv.forward(x);
  REQUIRE(y.h == 4);
  REQUIRE(y.w == 4);
  const int pad = 2;
  for (int oy = 0; oy < y.h; ++oy) {
    for (int ox = 0; ox < y.w; ++ox) {
      for (int co = 0; co < 3; ++co) {
        double ref = 0.05;
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy * 2 - pad + ky * 2, ix = ox * 2 - pad + kx * 2;
            if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
            for (int ci = 0; ci < 2; ++ci) {
              ref += x.at(iy, ix, ci) * conv.weight.value[((ky * 3 + kx) * 2 + ci) * 3 + co];
            }
          }
        }
        CHECK(y.at(oy, ox, co) == doctest::Approx(ref).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("layer gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CAPTURE(seed);
    CHECK(testing::check_conv(seed, 20, 1, 1).worst < 1e-5);
    CHECK(testing::check_conv(seed, 20, 2, 1).worst < 1e-5);
    CHECK(testing::check_conv(seed, 20, 1, 3).worst < 1e-5);
    CHECK(testing::check_linear(seed, 20).worst < 1e-6);
  }
}

TEST_CASE("linear layer forward") {
  Linear<double> lin(2, 2);
  lin.weight.value = {1, 2, 3, 4};
  lin.bias.value = {0.5, -0.5};
  const auto y = lin.forward(std::vector<double>{1, -1});
  CHECK(y[0] == doctest::Approx(-0.5));
  CHECK(y[1] == doctest::Approx(-1.5));
}

TEST_CASE("embedding rejects out-of-range rows") {
  Embedding<float> e(5, 3);
  CHECK_NOTHROW(e.row(4));
  CHECK_THROWS(e.row(5));
  CHECK_THROWS(e.row(-1));
}

TEST_CASE("gru: empty sequence returns the zero state and order matters") {
  std::mt19937_64 rng(8);
  Gru<double> gru(3, 4);
  gru.init(rng);
  const auto h0 = gru.forward({}, nullptr);
  for (double v : h0) CHECK(v == 0.0);
  const std::vector<std::vector<double>> seq{{1, 0, 0}, {0, 1, 0}};
  const std::vector<std::vector<double>> rev{{0, 1, 0}, {1, 0, 0}};
  const auto a = gru.forward(seq, nullptr), b = gru.forward(rev, nullptr);
  bool differs = false;
  for (int i = 0; i < 4; ++i) differs |= a[i] != b[i];
  CHECK(differs);
}

TEST_CASE("scalar and avx2 backends agree through a conv layer") {
  if (!simd::avx2_available()) return;
  std::mt19937_64 rng(21);
  Conv2d<float> conv(ConvSpec{5, 19, 3, 1, 2});
  conv.init(rng);
  Tensor3<float> x(9, 9, 5);
  for (auto& v : x.data) v = std::uniform_real_distribution<float>(-1, 1)(rng);
  const auto before = simd::active_backend();
  simd::set_backend(simd::Backend::scalar);
  const auto ys = conv.forward(x);
  simd::set_backend(simd::Backend::avx2);
  const auto yv = conv.forward(x);
  simd::set_backend(before);
  for (std::size_t i = 0; i < ys.size(); ++i) CHECK(yv.data[i] == doctest::Approx(ys.data[i]).epsilon(1e-5));
}
