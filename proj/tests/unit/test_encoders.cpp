#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "ssjdn/encoders.hpp"

using namespace ssjdn;

namespace {

template <typename T>
Tensor3<T> random_tensor(int h, int w, int c, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  Tensor3<T> t(h, w, c);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace

TEST_CASE("backbone shape arithmetic") {
  std::mt19937_64 rng(1);
  Backbone<float> b(BackboneConfig{32, {2, 2, 2, 1}});
  b.init(rng);
  CHECK(b.stride() == 8);
  const auto out = b.forward(random_tensor<float>(64, 64, 3, rng), nullptr);
  CHECK(out.h == 8);
  CHECK(out.w == 8);
  CHECK(out.c == 32);
}

TEST_CASE("backbone shape property over random configs") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 2 + static_cast<int>(rng() % 6);
    BackboneConfig cfg{d, {2, static_cast<int>(1 + rng() % 2), 1}};
    Backbone<float> b(cfg);
    b.init(rng);
    const int s = b.stride();
    const int h = s * (2 + static_cast<int>(rng() % 4)), w = s * (2 + static_cast<int>(rng() % 4));
    const auto out = b.forward(random_tensor<float>(h, w, 3, rng), nullptr);
    CHECK(out.h == h / s);
    CHECK(out.w == w / s);
    CHECK(out.c == d);
    for (float v : out.data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("backbone zero image with zero bias gives a zero map") {
  std::mt19937_64 rng(3);
  Backbone<double> b(BackboneConfig{8, {2, 2}});
  b.init(rng);
  const auto out = b.forward(Tensor3<double>(16, 16, 3), nullptr);
  for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("backbone input validation") {
  std::mt19937_64 rng(4);
  Backbone<float> b(BackboneConfig{4, {2, 2}});
  b.init(rng);
  CHECK_THROWS(b.forward(Tensor3<float>(10, 12, 3), nullptr));
  CHECK_THROWS(b.forward(Tensor3<float>(8, 8, 2), nullptr));
  auto bad = Tensor3<float>(8, 8, 3);
  bad.at(1, 1, 0) = std::nanf("");
  CHECK_THROWS(b.forward(bad, nullptr));
}

TEST_CASE("aspp shapes and zero input") {
  std::mt19937_64 rng(5);
  Aspp<float> a(32);
  a.init(rng);
  const auto scales = a.forward(random_tensor<float>(16, 16, 32, rng), nullptr);
  for (const auto& m : scales.maps) {
    CHECK(m.h == 16);
    CHECK(m.w == 16);
    CHECK(m.c == 32);
  }
  CHECK(scales.dilation_rates == std::array<int, 3>{6, 12, 18});
  const auto zero = a.forward(Tensor3<float>(16, 16, 32), nullptr);
  for (const auto& m : zero.maps) {
    for (float v : m.data) CHECK(v == 0.0f);
  }
}

TEST_CASE("aspp rejects maps smaller than the minimum size") {
  std::mt19937_64 rng(6);
  Aspp<float> a(4);
  a.init(rng);
  CHECK(a.minimum_spatial_size() == 7);
  CHECK_THROWS_WITH(a.forward(Tensor3<float>(4, 4, 4), nullptr), doctest::Contains("7"));
  CHECK_NOTHROW(a.forward(Tensor3<float>(7, 7, 4), nullptr));
}

TEST_CASE("aspp impulse response support equals the dilation rate") {
  std::mt19937_64 rng(7);
  Aspp<double> a(1);
  a.init(rng);
  for (auto& br : a.branches()) {
    for (auto& w : br.weight.value) w = std::abs(w) + 0.1;  // strictly positive taps survive the ReLU
  }
  const int n = 41, c = 20;
  Tensor3<double> impulse(n, n, 1);
  impulse.at(c, c, 0) = 1.0;
  const auto scales = a.forward(impulse, nullptr);
  for (int m = 0; m < 3; ++m) {
    CAPTURE(m);
    int radius = 0;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        if (scales.maps[m].at(y, x, 0) != 0.0) radius = std::max({radius, std::abs(y - c), std::abs(x - c)});
      }
    }
    CHECK(radius == scales.dilation_rates[m]);
  }
}

TEST_CASE("text encoder determinism and pad invariance") {
  std::mt19937_64 rng(8);
  TextEncoder<float> enc(10, 6, 5);
  enc.init(rng);
  const std::vector<int> a{2, 3, 4, 0, 0}, b{2, 3, 4, 0, 0, 0, 0}, c{2, 3, 4, 7, 9};
  const auto ya = enc.forward(a, 3, nullptr);
  CHECK(ya.size() == 5);
  CHECK(enc.forward(a, 3, nullptr) == ya);
  CHECK(enc.forward(b, 3, nullptr) == ya);
  CHECK(enc.forward(c, 3, nullptr) == ya);
  CHECK(enc.forward(a, 0, nullptr).size() == 5);
  CHECK_THROWS(enc.forward(std::vector<int>{2, 10}, 2, nullptr));
}

TEST_CASE("encoder gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CAPTURE(seed);
    CHECK(testing::check_backbone(seed, 20).worst < 1e-4);
    CHECK(testing::check_aspp(seed, 20).worst < 1e-4);
    CHECK(testing::check_text_encoder(seed, 20).worst < 1e-4);
  }
}
