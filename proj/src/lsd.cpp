#include "ssjdn/lsd.hpp"

#include <algorithm>
#include <cmath>

namespace ssjdn {

template <typename T>
int argmax_first(std::span<const T> values) {
  if (values.empty()) throw Error("argmax of an empty vector");
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = static_cast<int>(i);
  }
  return best;
}

namespace {

template <typename T>
std::vector<T> sigmoid_vec(std::vector<T> x) {
  for (auto& v : x) v = sigmoid(v);
  return x;
}

template <typename T>
CategoryPrediction<T> predict(std::vector<T> feature, const Linear<T>& head) {
  CategoryPrediction<T> out;
  out.logits = head.forward(feature);
  out.predicted = argmax_first<T>(out.logits);
  out.feature = std::move(feature);
  return out;
}

// Backward through head(sigmoid(hidden(x))) down to the hidden input.
template <typename T>
std::vector<T> head_backward(Linear<T>& hidden, Linear<T>& head, std::span<const T> input,
                             std::span<const T> feature, std::span<const T> grad_logits) {
  std::vector<T> grad_feature(feature.size(), T(0));
  head.backward(feature, grad_logits, grad_feature);
  for (std::size_t i = 0; i < feature.size(); ++i) grad_feature[i] *= feature[i] * (T(1) - feature[i]);
  std::vector<T> grad_input(input.size(), T(0));
  hidden.backward(input, grad_feature, grad_input);
  return grad_input;
}

}  // namespace

// ---------------------------------------------------------------------------
// ImageClassifier

template <typename T>
ImageClassifier<T>::ImageClassifier(const BackboneConfig& backbone, int embed_dim, int num_classes)
    : backbone_(backbone), hidden_(2 * backbone.channels, embed_dim), head_(embed_dim, num_classes) {
  if (num_classes < 1) throw Error("classifier needs at least one class");
}

template <typename T>
CategoryPrediction<T> ImageClassifier<T>::forward(const Tensor3<T>& image, Cache* cache) const {
  const auto features = backbone_.forward(image, cache ? &cache->backbone : nullptr);
  const int d = features.c;
  // Mean pooling in [0, d), max pooling in [d, 2d).
  std::vector<T> pooled(2 * static_cast<std::size_t>(d), T(0));
  std::vector<int> argmax(d, 0);
  for (int ch = 0; ch < d; ++ch) pooled[d + ch] = features.data[ch];
  for (std::size_t p = 0; p < features.pixels(); ++p) {
    for (int ch = 0; ch < d; ++ch) {
      const T v = features.data[p * d + ch];
      pooled[ch] += v;
      if (v > pooled[d + ch]) {
        pooled[d + ch] = v;
        argmax[ch] = static_cast<int>(p);
      }
    }
  }
  const T inv = T(1) / static_cast<T>(features.pixels());
  for (int ch = 0; ch < d; ++ch) pooled[ch] *= inv;
  auto feature = sigmoid_vec(hidden_.forward(pooled));
  if (cache) {
    cache->pooled = pooled;
    cache->argmax = std::move(argmax);
    cache->feature = feature;
    cache->h = features.h;
    cache->w = features.w;
  }
  return predict(std::move(feature), head_);
}

template <typename T>
void ImageClassifier<T>::backward(const Cache& cache, std::span<const T> grad_logits) {
  const auto grad_pooled =
      head_backward<T>(hidden_, head_, cache.pooled, cache.feature, grad_logits);
  const int d = static_cast<int>(grad_pooled.size()) / 2;
  Tensor3<T> grad_map(cache.h, cache.w, d);
  const T inv = T(1) / static_cast<T>(cache.h * cache.w);
  for (std::size_t p = 0; p < grad_map.pixels(); ++p) {
    for (int ch = 0; ch < d; ++ch) grad_map.data[p * d + ch] = grad_pooled[ch] * inv;
  }
  for (int ch = 0; ch < d; ++ch) grad_map.data[static_cast<std::size_t>(cache.argmax[ch]) * d + ch] += grad_pooled[d + ch];
  backbone_.backward(cache.backbone, grad_map, nullptr);
}

template <typename T>
void ImageClassifier<T>::init(std::mt19937_64& rng) {
  backbone_.init(rng);
  hidden_.init(rng);
  head_.init(rng);
}

template <typename T>
void ImageClassifier<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  backbone_.visit(prefix + ".backbone", visitor);
  hidden_.visit(prefix + ".feature", visitor);
  head_.visit(prefix + ".head", visitor);
}

// ---------------------------------------------------------------------------
// TextClassifier

template <typename T>
TextClassifier<T>::TextClassifier(int vocab_size, int word_dim, int embed_dim, int num_classes)
    : embedding_(vocab_size, word_dim),
      gru_(word_dim, embed_dim),
      hidden_(embed_dim, embed_dim),
      head_(embed_dim, num_classes) {
  if (num_classes < 1) throw Error("classifier needs at least one class");
}

template <typename T>
CategoryPrediction<T> TextClassifier<T>::forward(std::span<const int> tokens, int length, Cache* cache) const {
  if (length < 0 || length > static_cast<int>(tokens.size())) throw Error("text classifier: invalid length");
  std::vector<std::vector<T>> inputs;
  for (int i = 0; i < length; ++i) {
    auto row = embedding_.row(tokens[i]);
    inputs.emplace_back(row.begin(), row.end());
  }
  auto state = gru_.forward(inputs, cache ? &cache->gru : nullptr);
  auto feature = sigmoid_vec(hidden_.forward(state));
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.begin() + length);
    cache->state = state;
    cache->feature = feature;
  }
  return predict(std::move(feature), head_);
}

template <typename T>
void TextClassifier<T>::backward(const Cache& cache, std::span<const T> grad_logits) {
  const auto grad_state = head_backward<T>(hidden_, head_, cache.state, cache.feature, grad_logits);
  std::vector<std::vector<T>> grad_inputs;
  gru_.backward(cache.gru, grad_state, &grad_inputs);
  for (std::size_t i = 0; i < cache.tokens.size(); ++i) embedding_.accumulate(cache.tokens[i], grad_inputs[i]);
}

template <typename T>
void TextClassifier<T>::init(std::mt19937_64& rng) {
  embedding_.init(rng);
  gru_.init(rng);
  hidden_.init(rng);
  head_.init(rng);
}

template <typename T>
void TextClassifier<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  embedding_.visit(prefix + ".embedding", visitor);
  gru_.visit(prefix + ".gru", visitor);
  hidden_.visit(prefix + ".feature", visitor);
  head_.visit(prefix + ".head", visitor);
}

// ---------------------------------------------------------------------------
// Fusion

template <typename T>
std::vector<T> semantic_fuse(std::span<const T> embedding, std::span<const T> category_feature) {
  if (embedding.size() != category_feature.size()) {
    throw Error("semantic_fuse: dimension mismatch (" + std::to_string(embedding.size()) + " vs " +
                std::to_string(category_feature.size()) + ")");
  }
  std::vector<T> out(embedding.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = embedding[i] * category_feature[i];
  return out;
}

std::string_view to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::multiply: return "multiply";
    case FusionMode::add: return "add";
    case FusionMode::concat: return "concat";
  }
  return "multiply";
}

FusionMode parse_fusion_mode(std::string_view text) {
  if (text == "multiply") return FusionMode::multiply;
  if (text == "add") return FusionMode::add;
  if (text == "concat") return FusionMode::concat;
  throw Error("unknown fusion mode '" + std::string(text) + "' (expected multiply, add or concat)");
}

template <typename T>
std::vector<T> fuse_category(std::span<const T> embedding, std::span<const T> category_feature, FusionMode mode) {
  if (embedding.size() != category_feature.size()) throw Error("fuse_category: dimension mismatch");
  switch (mode) {
    case FusionMode::multiply: return semantic_fuse(embedding, category_feature);
    case FusionMode::add: {
      std::vector<T> out(embedding.begin(), embedding.end());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += category_feature[i];
      return out;
    }
    case FusionMode::concat: {
      std::vector<T> out(embedding.begin(), embedding.end());
      out.insert(out.end(), category_feature.begin(), category_feature.end());
      return out;
    }
  }
  return {};
}

template <typename T>
std::vector<T> fuse_category_backward(std::span<const T> grad_fused, std::span<const T> category_feature,
                                      FusionMode mode) {
  const std::size_t d = category_feature.size();
  switch (mode) {
    case FusionMode::multiply: return semantic_fuse(grad_fused, category_feature);
    case FusionMode::add: return {grad_fused.begin(), grad_fused.end()};
    case FusionMode::concat: return {grad_fused.begin(), grad_fused.begin() + d};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Classification loss

template <typename T>
LossAndGrad classification_loss(std::span<const T> logits, int label, ClassificationLossKind kind) {
  const int c = static_cast<int>(logits.size());
  if (label < 0 || label >= c) {
    throw Error("label " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")");
  }
  double max_logit = logits[0];
  for (T v : logits) max_logit = std::max<double>(max_logit, v);
  double denom = 0.0;
  for (T v : logits) denom += std::exp(static_cast<double>(v) - max_logit);
  const double log_denom = std::log(denom);
  std::vector<double> log_p(c), p(c);
  for (int k = 0; k < c; ++k) {
    log_p[k] = static_cast<double>(logits[k]) - max_logit - log_denom;
    p[k] = std::exp(log_p[k]);
  }
  LossAndGrad out;
  out.grad.assign(c, 0.0);
  if (kind == ClassificationLossKind::softmax_cross_entropy) {
    out.loss = -log_p[label];
    for (int k = 0; k < c; ++k) out.grad[k] = p[k] - (k == label ? 1.0 : 0.0);
    return out;
  }
  // Per-class binary form on the softmax probabilities.
  std::vector<double> dl_dp(c);
  for (int k = 0; k < c; ++k) {
    const double one_minus_p = std::max(1.0 - p[k], 1e-300);
    if (k == label) {
      out.loss -= log_p[k];
      dl_dp[k] = -1.0 / p[k];
    } else {
      out.loss -= std::log(one_minus_p);
      dl_dp[k] = 1.0 / one_minus_p;
    }
  }
  double weighted = 0.0;
  for (int k = 0; k < c; ++k) weighted += p[k] * dl_dp[k];
  for (int k = 0; k < c; ++k) out.grad[k] = p[k] * (dl_dp[k] - weighted);
  return out;
}

template <typename T>
double classification_loss(const std::vector<std::vector<T>>& logits, std::span<const int> labels,
                           ClassificationLossKind kind) {
  if (logits.size() != labels.size()) throw Error("classification_loss: batch size mismatch");
  if (logits.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += classification_loss<T>(logits[i], labels[i], kind).loss;
  return total / static_cast<double>(logits.size());
}

#define SSJDN_INSTANTIATE_LSD(T)                                                                          \
  template int argmax_first<T>(std::span<const T>);                                                       \
  template class ImageClassifier<T>;                                                                      \
  template class TextClassifier<T>;                                                                       \
  template std::vector<T> semantic_fuse<T>(std::span<const T>, std::span<const T>);                       \
  template std::vector<T> fuse_category<T>(std::span<const T>, std::span<const T>, FusionMode);           \
  template std::vector<T> fuse_category_backward<T>(std::span<const T>, std::span<const T>, FusionMode);  \
  template LossAndGrad classification_loss<T>(std::span<const T>, int, ClassificationLossKind);           \
  template double classification_loss<T>(const std::vector<std::vector<T>>&, std::span<const int>,        \
                                         ClassificationLossKind);

SSJDN_INSTANTIATE_LSD(float)
SSJDN_INSTANTIATE_LSD(double)

#undef SSJDN_INSTANTIATE_LSD

}  // namespace ssjdn
