#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssjdn/tensor.hpp"

namespace ssjdn {

template <typename T>
struct Param {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Param() = default;
  explicit Param(std::vector<int> dims);

  std::size_t size() const { return value.size(); }
  void zero_grad();
  void init_uniform(T bound, std::mt19937_64& rng);
};

// Visitor signature used by every composite module to expose its parameters
// under stable dotted paths ("backbone.conv0.weight", ...).
template <typename T>
using ParamVisitor = std::function<void(const std::string& path, Param<T>& param)>;

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int dilation = 1;
};

// 2-D convolution with "same"-style zero padding of dilation*(kernel-1)/2.
// Weight layout is [ky][kx][cin][cout] so the inner loop is an axpy over the
// output channels of one pixel.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  explicit Conv2d(const ConvSpec& spec);

  const ConvSpec& spec() const { return spec_; }
  int padding() const { return spec_.dilation * (spec_.kernel - 1) / 2; }
  int output_size(int input_size) const;

  Tensor3<T> forward(const Tensor3<T>& input) const;
  // Accumulates parameter gradients; grad_input (if given) is accumulated too.
  void backward(const Tensor3<T>& input, const Tensor3<T>& grad_output,
                Tensor3<T>* grad_input);

  void init(std::mt19937_64& rng, T gain = T(2));
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  Param<T> weight;
  Param<T> bias;

 private:
  std::size_t weight_index(int ky, int kx, int ci) const {
    return ((static_cast<std::size_t>(ky) * spec_.kernel + kx) * spec_.in_channels + ci) *
           spec_.out_channels;
  }

  ConvSpec spec_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features);

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  std::vector<T> forward(std::span<const T> x) const;
  void backward(std::span<const T> x, std::span<const T> grad_y, std::span<T> grad_x);
  void backward(std::span<const T> x, std::span<const T> grad_y);

  void init(std::mt19937_64& rng, T gain = T(1));
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  Param<T> weight;  // [out][in]
  Param<T> bias;

 private:
  int in_ = 0;
  int out_ = 0;
};

template <typename T>
class Embedding {
 public:
  Embedding() = default;
  Embedding(int vocab_size, int dim);

  int vocab_size() const { return vocab_; }
  int dim() const { return dim_; }

  std::span<const T> row(int index) const;
  void accumulate(int index, std::span<const T> grad);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  Param<T> table;

 private:
  int vocab_ = 0;
  int dim_ = 0;
};

// Single-layer gated recurrent unit, gate order (reset, update, candidate).
template <typename T>
class Gru {
 public:
  struct Cache {
    std::vector<std::vector<T>> inputs;
    std::vector<std::vector<T>> states;  // states[0] is the initial zero state
    std::vector<std::vector<T>> reset;
    std::vector<std::vector<T>> update;
    std::vector<std::vector<T>> candidate;
    std::vector<std::vector<T>> hidden_candidate;  // W_hn h + b_hn
  };

  Gru() = default;
  Gru(int input_dim, int hidden_dim);

  int hidden_dim() const { return hidden_; }

  // Returns the final hidden state; an empty sequence returns the zero state.
  std::vector<T> forward(const std::vector<std::vector<T>>& inputs, Cache* cache) const;
  // grad_inputs is resized to match the cached sequence.
  void backward(const Cache& cache, std::span<const T> grad_final,
                std::vector<std::vector<T>>* grad_inputs);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  Param<T> input_weight;   // [3H][in]
  Param<T> hidden_weight;  // [3H][H]
  Param<T> input_bias;     // [3H]
  Param<T> hidden_bias;    // [3H]

 private:
  int input_ = 0;
  int hidden_ = 0;
};

}  // namespace ssjdn
