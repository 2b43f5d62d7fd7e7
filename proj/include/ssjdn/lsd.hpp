#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "ssjdn/encoders.hpp"
#include "ssjdn/layers.hpp"

namespace ssjdn {

template <typename T>
struct CategoryPrediction {
  std::vector<T> feature;  // U (image) or V (text), dimension d'
  std::vector<T> logits;   // c entries
  int predicted = 0;       // argmax of logits, smallest index on ties
};

// Index of the largest entry, smallest index on ties.
template <typename T>
int argmax_first(std::span<const T> values);

// Image classifier: backbone -> global average and max pool -> linear -> sigmoid (U)
// -> linear (logits). The sigmoid keeps U strictly positive so that the
// multiplicative fusion never produces a zero embedding.
template <typename T>
class ImageClassifier {
 public:
  struct Cache {
    typename Backbone<T>::Cache backbone;
    std::vector<T> pooled;    // mean then max, 2d entries
    std::vector<int> argmax;  // pixel of the max per channel, first on ties
    std::vector<T> feature;
    int h = 0, w = 0;
  };

  ImageClassifier() = default;
  ImageClassifier(const BackboneConfig& backbone, int embed_dim, int num_classes);

  int num_classes() const { return head_.out_features(); }
  int embed_dim() const { return hidden_.out_features(); }

  CategoryPrediction<T> forward(const Tensor3<T>& image, Cache* cache) const;
  void backward(const Cache& cache, std::span<const T> grad_logits);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  Linear<T>& head() { return head_; }

 private:
  Backbone<T> backbone_;
  Linear<T> hidden_;
  Linear<T> head_;
};

// Text classifier: embedding -> GRU -> linear -> sigmoid (V) -> linear.
template <typename T>
class TextClassifier {
 public:
  struct Cache {
    std::vector<int> tokens;
    typename Gru<T>::Cache gru;
    std::vector<T> state;
    std::vector<T> feature;
  };

  TextClassifier() = default;
  TextClassifier(int vocab_size, int word_dim, int embed_dim, int num_classes);

  int num_classes() const { return head_.out_features(); }

  CategoryPrediction<T> forward(std::span<const int> tokens, int length, Cache* cache) const;
  void backward(const Cache& cache, std::span<const T> grad_logits);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  Linear<T>& head() { return head_; }

 private:
  Embedding<T> embedding_;
  Gru<T> gru_;
  Linear<T> hidden_;
  Linear<T> head_;
};

// Elementwise product of an embedding with a category feature.
template <typename T>
std::vector<T> semantic_fuse(std::span<const T> embedding, std::span<const T> category_feature);

enum class FusionMode { multiply, add, concat };
std::string_view to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view text);

// Generalised fusion used by the fusion-method comparison. concat doubles
// the output dimension.
template <typename T>
std::vector<T> fuse_category(std::span<const T> embedding, std::span<const T> category_feature, FusionMode mode);
// Gradient of fuse_category w.r.t. the embedding (the category feature is
// frozen).
template <typename T>
std::vector<T> fuse_category_backward(std::span<const T> grad_fused, std::span<const T> category_feature,
                                      FusionMode mode);

enum class ClassificationLossKind { softmax_cross_entropy, binary_cross_entropy };

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d logits
};

// Softmax cross-entropy of one logit vector against an integer label. The
// binary form sums -y log p - (1-y) log(1-p) over classes on the softmax
// probabilities.
template <typename T>
LossAndGrad classification_loss(std::span<const T> logits, int label,
                                ClassificationLossKind kind = ClassificationLossKind::softmax_cross_entropy);

// Mean over a batch.
template <typename T>
double classification_loss(const std::vector<std::vector<T>>& logits, std::span<const int> labels,
                           ClassificationLossKind kind = ClassificationLossKind::softmax_cross_entropy);

}  // namespace ssjdn
