#pragma once

#include <array>
#include <span>
#include <vector>

#include "ssjdn/layers.hpp"
#include "ssjdn/tensor.hpp"

namespace ssjdn {

template <typename T>
using GlobalFeatureMap = Tensor3<T>;

struct BackboneConfig {
  int channels = 16;                  // d
  std::vector<int> strides{2, 2, 1};  // one 3x3 conv + ReLU per entry
};

// Strided convolutional stack standing in for the ResNet feature extractor.
template <typename T>
class Backbone {
 public:
  struct Cache {
    std::vector<Tensor3<T>> activations;  // [0] is the input image
  };

  Backbone() = default;
  explicit Backbone(const BackboneConfig& config, int in_channels = 3);

  int stride() const;
  int channels() const { return config_.channels; }

  // Requires finite input whose height and width are multiples of stride().
  GlobalFeatureMap<T> forward(const Tensor3<T>& image, Cache* cache) const;
  void backward(const Cache& cache, const Tensor3<T>& grad_output, Tensor3<T>* grad_input);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  std::vector<Conv2d<T>>& layers() { return layers_; }

 private:
  BackboneConfig config_;
  std::vector<Conv2d<T>> layers_;
};

inline constexpr std::array<int, 3> kDefaultDilationRates{6, 12, 18};

template <typename T>
struct ScaleFeatureSet {
  std::array<Tensor3<T>, 3> maps;  // ordered by dilation rate ascending
  std::array<int, 3> dilation_rates = kDefaultDilationRates;
};

// Three parallel dilated 3x3 convolutions (+ReLU) over the global feature map.
template <typename T>
class Aspp {
 public:
  struct Cache {
    Tensor3<T> input;
    std::array<Tensor3<T>, 3> outputs;
  };

  Aspp() = default;
  explicit Aspp(int channels, std::array<int, 3> rates = kDefaultDilationRates);

  // Below this size every branch sees only its centre tap, so the pyramid
  // carries no multi-scale context.
  int minimum_spatial_size() const { return rates_[0] + 1; }
  const std::array<int, 3>& rates() const { return rates_; }

  ScaleFeatureSet<T> forward(const GlobalFeatureMap<T>& input, Cache* cache) const;
  void backward(const Cache& cache, const std::array<Tensor3<T>, 3>& grad_outputs, Tensor3<T>* grad_input);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  std::array<Conv2d<T>, 3>& branches() { return branches_; }

 private:
  std::array<int, 3> rates_ = kDefaultDilationRates;
  std::array<Conv2d<T>, 3> branches_;
};

// Embedding lookup, GRU over the first `length` tokens, then a linear
// projection of the final state to d'.
template <typename T>
class TextEncoder {
 public:
  struct Cache {
    std::vector<int> tokens;
    typename Gru<T>::Cache gru;
    std::vector<T> final_state;
  };

  TextEncoder() = default;
  TextEncoder(int vocab_size, int word_dim, int embed_dim);

  int embed_dim() const { return projection_.out_features(); }

  std::vector<T> forward(std::span<const int> tokens, int length, Cache* cache) const;
  void backward(const Cache& cache, std::span<const T> grad_output);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  Embedding<T>& embedding() { return embedding_; }

 private:
  Embedding<T> embedding_;
  Gru<T> gru_;
  Linear<T> projection_;
};

}  // namespace ssjdn
