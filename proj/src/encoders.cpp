#include "ssjdn/encoders.hpp"

#include <cmath>

namespace ssjdn {

namespace {

template <typename T>
void relu_inplace(Tensor3<T>& t) {
  for (auto& v : t.data) v = v > T(0) ? v : T(0);
}

// grad *= (activation > 0)
template <typename T>
void relu_backward_inplace(const Tensor3<T>& activation, Tensor3<T>& grad) {
  for (std::size_t i = 0; i < grad.data.size(); ++i) {
    if (!(activation.data[i] > T(0))) grad.data[i] = T(0);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Backbone

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, int in_channels) : config_(config) {
  if (config.channels < 1 || config.strides.empty()) throw Error("backbone needs channels >= 1 and >= 1 block");
  int cin = in_channels;
  for (int s : config.strides) {
    layers_.emplace_back(ConvSpec{cin, config.channels, 3, s, 1});
    cin = config.channels;
  }
}

template <typename T>
int Backbone<T>::stride() const {
  int s = 1;
  for (int v : config_.strides) s *= v;
  return s;
}

template <typename T>
GlobalFeatureMap<T> Backbone<T>::forward(const Tensor3<T>& image, Cache* cache) const {
  const int s = stride();
  if (image.c != layers_.front().spec().in_channels) throw Error("backbone: wrong number of input channels");
  if (image.h % s != 0 || image.w % s != 0 || image.h == 0 || image.w == 0) {
    throw Error("backbone: image size " + std::to_string(image.h) + "x" + std::to_string(image.w) +
                " is not a positive multiple of the stride " + std::to_string(s));
  }
  for (T v : image.data) {
    if (!std::isfinite(v)) throw Error("backbone: non-finite input value");
  }
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(image);
  }
  Tensor3<T> x = image;
  for (const auto& layer : layers_) {
    x = layer.forward(x);
    relu_inplace(x);
    if (cache) cache->activations.push_back(x);
  }
  return x;
}

template <typename T>
void Backbone<T>::backward(const Cache& cache, const Tensor3<T>& grad_output, Tensor3<T>* grad_input) {
  Tensor3<T> grad = grad_output;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    relu_backward_inplace(cache.activations[i + 1], grad);
    const bool need_input_grad = i > 0 || grad_input != nullptr;
    Tensor3<T> grad_in;
    layers_[i].backward(cache.activations[i], grad, need_input_grad ? &grad_in : nullptr);
    if (i == 0) {
      if (grad_input) *grad_input = std::move(grad_in);
    } else {
      grad = std::move(grad_in);
    }
  }
}

template <typename T>
void Backbone<T>::init(std::mt19937_64& rng) {
  for (auto& layer : layers_) layer.init(rng);
}

template <typename T>
void Backbone<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit(prefix + ".conv" + std::to_string(i), visitor);
}

// ---------------------------------------------------------------------------
// Aspp

template <typename T>
Aspp<T>::Aspp(int channels, std::array<int, 3> rates) : rates_(rates) {
  for (int m = 0; m < 3; ++m) {
    if (m > 0 && rates[m] <= rates[m - 1]) throw Error("aspp dilation rates must be ascending");
    branches_[m] = Conv2d<T>(ConvSpec{channels, channels, 3, 1, rates[m]});
  }
}

template <typename T>
ScaleFeatureSet<T> Aspp<T>::forward(const GlobalFeatureMap<T>& input, Cache* cache) const {
  const int minimum = minimum_spatial_size();
  if (input.h < minimum || input.w < minimum) {
    throw Error("aspp: feature map " + std::to_string(input.h) + "x" + std::to_string(input.w) +
                " is too small for dilation rates (" + std::to_string(rates_[0]) + "," +
                std::to_string(rates_[1]) + "," + std::to_string(rates_[2]) + "); minimum size is " +
                std::to_string(minimum) + "x" + std::to_string(minimum));
  }
  ScaleFeatureSet<T> out;
  out.dilation_rates = rates_;
  for (int m = 0; m < 3; ++m) {
    out.maps[m] = branches_[m].forward(input);
    relu_inplace(out.maps[m]);
  }
  if (cache) {
    cache->input = input;
    cache->outputs = out.maps;
  }
  return out;
}

template <typename T>
void Aspp<T>::backward(const Cache& cache, const std::array<Tensor3<T>, 3>& grad_outputs, Tensor3<T>* grad_input) {
  Tensor3<T> total(cache.input.h, cache.input.w, cache.input.c);
  for (int m = 0; m < 3; ++m) {
    Tensor3<T> grad = grad_outputs[m];
    relu_backward_inplace(cache.outputs[m], grad);
    branches_[m].backward(cache.input, grad, grad_input ? &total : nullptr);
  }
  if (grad_input) *grad_input = std::move(total);
}

template <typename T>
void Aspp<T>::init(std::mt19937_64& rng) {
  for (auto& b : branches_) b.init(rng);
}

template <typename T>
void Aspp<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  for (int m = 0; m < 3; ++m) branches_[m].visit(prefix + ".rate" + std::to_string(rates_[m]), visitor);
}

// ---------------------------------------------------------------------------
// TextEncoder

template <typename T>
TextEncoder<T>::TextEncoder(int vocab_size, int word_dim, int embed_dim)
    : embedding_(vocab_size, word_dim), gru_(word_dim, embed_dim), projection_(embed_dim, embed_dim) {}

template <typename T>
std::vector<T> TextEncoder<T>::forward(std::span<const int> tokens, int length, Cache* cache) const {
  if (length < 0 || length > static_cast<int>(tokens.size())) throw Error("text encoder: invalid length");
  std::vector<std::vector<T>> inputs;
  inputs.reserve(length);
  for (int i = 0; i < length; ++i) {
    auto row = embedding_.row(tokens[i]);
    inputs.emplace_back(row.begin(), row.end());
  }
  auto state = gru_.forward(inputs, cache ? &cache->gru : nullptr);
  auto out = projection_.forward(state);
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.begin() + length);
    cache->final_state = std::move(state);
  }
  return out;
}

template <typename T>
void TextEncoder<T>::backward(const Cache& cache, std::span<const T> grad_output) {
  std::vector<T> grad_state(cache.final_state.size(), T(0));
  projection_.backward(cache.final_state, grad_output, grad_state);
  std::vector<std::vector<T>> grad_inputs;
  gru_.backward(cache.gru, grad_state, &grad_inputs);
  for (std::size_t i = 0; i < cache.tokens.size(); ++i) embedding_.accumulate(cache.tokens[i], grad_inputs[i]);
}

template <typename T>
void TextEncoder<T>::init(std::mt19937_64& rng) {
  embedding_.init(rng);
  gru_.init(rng);
  projection_.init(rng);
}

template <typename T>
void TextEncoder<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  embedding_.visit(prefix + ".embedding", visitor);
  gru_.visit(prefix + ".gru", visitor);
  projection_.visit(prefix + ".projection", visitor);
}

template class Backbone<float>;
template class Backbone<double>;
template class Aspp<float>;
template class Aspp<double>;
template class TextEncoder<float>;
template class TextEncoder<double>;

}  // namespace ssjdn
