#include "ssjdn/matching.hpp"

#include <algorithm>
#include <cmath>

namespace ssjdn {

namespace {

template <typename T>
double dot_d(std::span<const T> a, std::span<const T> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace

template <typename T>
double similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw Error("similarity: dimension mismatch");
  const double na = std::sqrt(dot_d(a, a));
  const double nb = std::sqrt(dot_d(b, b));
  if (na == 0.0 || nb == 0.0) throw Error("degenerate embedding");
  return std::clamp(dot_d(a, b) / (na * nb), -1.0, 1.0);
}

template <typename T>
void similarity_backward(std::span<const T> a, std::span<const T> b, double scale, std::span<T> grad_a,
                         std::span<T> grad_b) {
  const double na = std::sqrt(dot_d(a, a));
  const double nb = std::sqrt(dot_d(b, b));
  if (na == 0.0 || nb == 0.0) throw Error("degenerate embedding");
  const double cos = dot_d(a, b) / (na * nb);
  // d cos / da = b / (|a||b|) - cos * a / |a|^2
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ai = a[i], bi = b[i];
    grad_a[i] += static_cast<T>(scale * (bi / (na * nb) - cos * ai / (na * na)));
    grad_b[i] += static_cast<T>(scale * (ai / (na * nb) - cos * bi / (nb * nb)));
  }
}

BetaMatrix beta_matrix(std::span<const int> image_classes, std::span<const int> text_classes, double epsilon,
                       bool allow_below_one) {
  if (!allow_below_one && epsilon < 1.0) {
    throw Error("epsilon must be >= 1, got " + std::to_string(epsilon));
  }
  if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
  BetaMatrix out{Matrix(image_classes.size(), text_classes.size(), 1.0), epsilon};
  for (std::size_t i = 0; i < image_classes.size(); ++i) {
    for (std::size_t j = 0; j < text_classes.size(); ++j) {
      if (image_classes[i] == text_classes[j]) out.beta(i, j) = epsilon;
    }
  }
  return out;
}

double triplet_loss(const BatchSimilarity& s, double margin, Matrix* grad) {
  if (s.rows != s.cols) throw Error("triplet_loss needs a square similarity matrix");
  if (margin < 0.0) throw Error("margin must be non-negative");
  const std::size_t n = s.rows;
  if (grad) *grad = Matrix(n, n, 0.0);
  double total = 0.0;
  // Negative sentences for each image.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double hinge = margin - s(i, i) + s(i, j);
      if (hinge > 0.0) {
        total += hinge;
        if (grad) {
          (*grad)(i, i) -= 1.0;
          (*grad)(i, j) += 1.0;
        }
      }
    }
  }
  // Negative images for each sentence.
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      if (i == j) continue;
      const double hinge = margin - s(j, j) + s(i, j);
      if (hinge > 0.0) {
        total += hinge;
        if (grad) {
          (*grad)(j, j) -= 1.0;
          (*grad)(i, j) += 1.0;
        }
      }
    }
  }
  return total;
}

double semantic_triplet_loss(const BatchSimilarity& s, const BetaMatrix& beta, double margin, Matrix* grad) {
  if (s.rows != s.cols) throw Error("semantic_triplet_loss needs a square similarity matrix");
  if (beta.beta.rows != s.rows || beta.beta.cols != s.cols) throw Error("beta matrix shape mismatch");
  if (margin < 0.0) throw Error("margin must be non-negative");
  const std::size_t n = s.rows;
  const Matrix& b = beta.beta;
  if (grad) *grad = Matrix(n, n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double positive = b(i, i) * s(i, i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double i2t = margin - positive + b(i, j) * s(i, j);
      if (i2t > 0.0) {
        total += i2t;
        if (grad) {
          (*grad)(i, i) -= b(i, i);
          (*grad)(i, j) += b(i, j);
        }
      }
      // Column i, row j: image j as a negative for sentence i.
      const double t2i = margin - positive + b(j, i) * s(j, i);
      if (t2i > 0.0) {
        total += t2i;
        if (grad) {
          (*grad)(i, i) -= b(i, i);
          (*grad)(j, i) += b(j, i);
        }
      }
    }
  }
  return total;
}

template double similarity<float>(std::span<const float>, std::span<const float>);
template double similarity<double>(std::span<const double>, std::span<const double>);
template void similarity_backward<float>(std::span<const float>, std::span<const float>, double, std::span<float>,
                                         std::span<float>);
template void similarity_backward<double>(std::span<const double>, std::span<const double>, double,
                                          std::span<double>, std::span<double>);

}  // namespace ssjdn
