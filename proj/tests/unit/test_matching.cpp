#include <doctest.h>

#include <cmath>
#include <random>

#include "oracle.hpp"
#include "gradcheck.hpp"
#include "ssjdn/matching.hpp"

using namespace ssjdn;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(rows.size(), rows.begin()->size());
  std::size_t i = 0;
  for (const auto& r : rows) {
    std::size_t j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix random_similarity(std::size_t n, std::mt19937_64& rng) {
  Matrix s(n, n);
  s.data = testing::random_vector(n * n, rng);
  return s;
}

}  // namespace

TEST_CASE("cosine similarity") {
  const std::vector<double> x{0.3, -1.2, 2.0};
  CHECK(similarity<double>(x, x) == doctest::Approx(1.0));
  CHECK(similarity<double>(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
  CHECK(similarity<double>(std::vector<double>{1, 1}, std::vector<double>{1, 0}) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK_THROWS_WITH(similarity<double>(std::vector<double>{0, 0}, std::vector<double>{1, 0}), "degenerate embedding");

  std::mt19937_64 rng(3);
  const auto a = testing::random_vector(7, rng), b = testing::random_vector(7, rng);
  auto a3 = a;
  for (auto& v : a3) v *= 3.5;
  CHECK(similarity<double>(a, b) == doctest::Approx(similarity<double>(b, a)).epsilon(1e-15));
  CHECK(similarity<double>(a3, b) == doctest::Approx(similarity<double>(a, b)).epsilon(1e-14));
}

TEST_CASE("similarity gradient") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) CHECK(testing::check_similarity(seed, 20).worst < 1e-6);
}

TEST_CASE("beta matrix") {
  const std::vector<int> qu{0, 1}, qv{0, 0};
  const auto b = beta_matrix(qu, qv, 1.2);
  CHECK(b.beta(0, 0) == 1.2);
  CHECK(b.beta(0, 1) == 1.2);
  CHECK(b.beta(1, 0) == 1.0);
  CHECK(b.beta(1, 1) == 1.0);

  const auto ones = beta_matrix(qu, qv, 1.0);
  for (double v : ones.beta.data) CHECK(v == 1.0);

  const std::vector<int> distinct_u{0, 1, 2}, distinct_v{3, 4, 5};
  for (double v : beta_matrix(distinct_u, distinct_v, 1.5).beta.data) CHECK(v == 1.0);

  CHECK_THROWS(beta_matrix(qu, qv, 0.8));
  CHECK(beta_matrix(qu, qv, 0.8, true).beta(0, 0) == 0.8);
}

TEST_CASE("triplet loss worked examples") {
  CHECK(triplet_loss(mat({{0.7}}), 0.2) == 0.0);
  CHECK(triplet_loss(mat({{0.9, 0.5}, {0.4, 0.8}}), 0.2) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::abs(triplet_loss(mat({{0.5, 0.6}, {0.1, 0.7}}), 0.2) - 0.4) < 1e-9);
}

TEST_CASE("semantic triplet loss worked example") {
  const auto s = mat({{0.5, 0.6}, {0.1, 0.7}});
  const std::vector<int> q{0, 1};
  CHECK(std::abs(semantic_triplet_loss(s, beta_matrix(q, q, 1.2), 0.2) - 0.2) < 1e-9);
}

TEST_CASE("semantic loss reduces to the plain loss at epsilon 1") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> size(1, 16), cls(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = size(rng);
    const auto s = random_similarity(n, rng);
    std::vector<int> qu(n), qv(n);
    for (auto& q : qu) q = cls(rng);
    for (auto& q : qv) q = cls(rng);
    Matrix g1, g2;
    const double plain = triplet_loss(s, 0.2, &g1);
    const double sem = semantic_triplet_loss(s, beta_matrix(qu, qv, 1.0), 0.2, &g2);
    CHECK(sem == doctest::Approx(plain).epsilon(1e-12));
    for (std::size_t k = 0; k < g1.data.size(); ++k) CHECK(g1.data[k] == g2.data[k]);
  }
}

TEST_CASE("losses are non-negative and vanish on margin-dominant diagonals") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_similarity(8, rng);
    CHECK(triplet_loss(s, 0.2) >= 0.0);
  }
  Matrix s(4, 4, 0.1);
  for (std::size_t i = 0; i < 4; ++i) s(i, i) = 0.9;
  CHECK(triplet_loss(s, 0.2) == 0.0);
  const std::vector<int> q{0, 1, 2, 3};
  CHECK(semantic_triplet_loss(s, beta_matrix(q, q, 1.0), 0.2) == 0.0);
}

TEST_CASE("single-category batch: beta acts as a similarity scale") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = random_similarity(6, rng);
    const std::vector<int> q(6, 2);
    Matrix scaled = s;
    for (auto& v : scaled.data) v *= 1.4;
    CHECK(semantic_triplet_loss(s, beta_matrix(q, q, 1.4), 0.2) == doctest::Approx(triplet_loss(scaled, 0.2)).epsilon(1e-12));
  }
}

TEST_CASE("semantic triplet loss gradient") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK(testing::check_semantic_triplet_loss(seed, 20).worst < 1e-4);
}

TEST_CASE("argument validation") {
  CHECK_THROWS(triplet_loss(Matrix(2, 3), 0.2));
  CHECK_THROWS(triplet_loss(Matrix(2, 2), -0.1));
  const std::vector<int> q{0, 1};
  CHECK_THROWS(semantic_triplet_loss(Matrix(3, 3), beta_matrix(q, q, 1.2), 0.2));
}
