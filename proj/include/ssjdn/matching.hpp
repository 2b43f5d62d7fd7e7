#pragma once

#include <span>
#include <vector>

#include "ssjdn/tensor.hpp"

namespace ssjdn {

// Cosine similarity in double precision. Throws Error("degenerate embedding")
// if either vector is zero.
template <typename T>
double similarity(std::span<const T> a, std::span<const T> b);

// Adds scale * dS/da to grad_a and scale * dS/db to grad_b.
template <typename T>
void similarity_backward(std::span<const T> a, std::span<const T> b, double scale, std::span<T> grad_a,
                         std::span<T> grad_b);

// N x N similarity table; S(i, j) = similarity(image i, text j) and the
// diagonal holds the ground-truth pairs.
using BatchSimilarity = Matrix;

struct BetaMatrix {
  Matrix beta;  // entries in {1, epsilon}
  double epsilon = 1.0;
};

// beta(i, j) = epsilon if image_classes[i] == text_classes[j] else 1.
// Requires epsilon >= 1 unless allow_below_one is set (used only by the
// epsilon sensitivity sweep).
BetaMatrix beta_matrix(std::span<const int> image_classes, std::span<const int> text_classes, double epsilon,
                       bool allow_below_one = false);

// Bidirectional hinge triplet loss summed over all in-batch negatives.
double triplet_loss(const BatchSimilarity& s, double margin, Matrix* grad = nullptr);

// Same with every similarity term scaled by its pair's beta.
double semantic_triplet_loss(const BatchSimilarity& s, const BetaMatrix& beta, double margin,
                             Matrix* grad = nullptr);

}  // namespace ssjdn
