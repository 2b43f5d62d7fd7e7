#include "ssjdn/layers.hpp"

#include <algorithm>
#include <numeric>

#include "ssjdn/simd.hpp"

namespace ssjdn {

template <typename T>
Param<T>::Param(std::vector<int> dims) : shape(std::move(dims)) {
  const std::size_t n =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                      [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
  value.assign(n, T(0));
  grad.assign(n, T(0));
}

template <typename T>
void Param<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

template <typename T>
void Param<T>::init_uniform(T bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  for (auto& v : value) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------------------
// Conv2d

template <typename T>
Conv2d<T>::Conv2d(const ConvSpec& spec)
    : weight({spec.kernel, spec.kernel, spec.in_channels, spec.out_channels}),
      bias({spec.out_channels}),
      spec_(spec) {
  if (spec.kernel < 1 || spec.kernel % 2 == 0) throw Error("conv kernel must be odd and positive");
  if (spec.stride < 1 || spec.dilation < 1) throw Error("conv stride and dilation must be >= 1");
}

template <typename T>
int Conv2d<T>::output_size(int input_size) const {
  const int span = spec_.dilation * (spec_.kernel - 1);
  return (input_size + 2 * padding() - span - 1) / spec_.stride + 1;
}

template <typename T>
Tensor3<T> Conv2d<T>::forward(const Tensor3<T>& input) const {
  if (input.c != spec_.in_channels) {
    throw Error("conv input has " + std::to_string(input.c) + " channels, expected " +
                std::to_string(spec_.in_channels));
  }
  const auto& k = simd::kernels<T>();
  const int oh = output_size(input.h);
  const int ow = output_size(input.w);
  const int pad = padding();
  const int cout = spec_.out_channels;
  Tensor3<T> out(oh, ow, cout);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* dst = out.data.data() + out.offset(oy, ox);
      std::copy(bias.value.begin(), bias.value.end(), dst);
      for (int ky = 0; ky < spec_.kernel; ++ky) {
        const int iy = oy * spec_.stride - pad + ky * spec_.dilation;
        if (iy < 0 || iy >= input.h) continue;
        for (int kx = 0; kx < spec_.kernel; ++kx) {
          const int ix = ox * spec_.stride - pad + kx * spec_.dilation;
          if (ix < 0 || ix >= input.w) continue;
          const T* src = input.data.data() + input.offset(iy, ix);
          const T* wrow = weight.value.data() + weight_index(ky, kx, 0);
          for (int ci = 0; ci < spec_.in_channels; ++ci, wrow += cout) {
            if (src[ci] != T(0)) k.axpy(src[ci], wrow, dst, cout);
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
void Conv2d<T>::backward(const Tensor3<T>& input, const Tensor3<T>& grad_output,
                         Tensor3<T>* grad_input) {
  const auto& k = simd::kernels<T>();
  const int pad = padding();
  const int cout = spec_.out_channels;
  if (grad_input && !grad_input->same_shape(input)) {
    *grad_input = Tensor3<T>(input.h, input.w, input.c);
  }
  for (int oy = 0; oy < grad_output.h; ++oy) {
    for (int ox = 0; ox < grad_output.w; ++ox) {
      const T* g = grad_output.data.data() + grad_output.offset(oy, ox);
      k.axpy(T(1), g, bias.grad.data(), cout);
      for (int ky = 0; ky < spec_.kernel; ++ky) {
        const int iy = oy * spec_.stride - pad + ky * spec_.dilation;
        if (iy < 0 || iy >= input.h) continue;
        for (int kx = 0; kx < spec_.kernel; ++kx) {
          const int ix = ox * spec_.stride - pad + kx * spec_.dilation;
          if (ix < 0 || ix >= input.w) continue;
          const std::size_t base = weight_index(ky, kx, 0);
          const T* src = input.data.data() + input.offset(iy, ix);
          T* gsrc = grad_input ? grad_input->data.data() + grad_input->offset(iy, ix) : nullptr;
          for (int ci = 0; ci < spec_.in_channels; ++ci) {
            const std::size_t wi = base + static_cast<std::size_t>(ci) * cout;
            if (src[ci] != T(0)) k.axpy(src[ci], g, weight.grad.data() + wi, cout);
            if (gsrc) gsrc[ci] += k.dot(weight.value.data() + wi, g, cout);
          }
        }
      }
    }
  }
}

template <typename T>
void Conv2d<T>::init(std::mt19937_64& rng, T gain) {
  const T fan_in = static_cast<T>(spec_.kernel * spec_.kernel * spec_.in_channels);
  weight.init_uniform(std::sqrt(T(3) * gain / fan_in), rng);
  std::fill(bias.value.begin(), bias.value.end(), T(0));
}

template <typename T>
void Conv2d<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  visitor(prefix + ".weight", weight);
  visitor(prefix + ".bias", bias);
}

// ---------------------------------------------------------------------------
// Linear

template <typename T>
Linear<T>::Linear(int in_features, int out_features)
    : weight({out_features, in_features}), bias({out_features}), in_(in_features), out_(out_features) {}

template <typename T>
std::vector<T> Linear<T>::forward(std::span<const T> x) const {
  if (static_cast<int>(x.size()) != in_) {
    throw Error("linear input has size " + std::to_string(x.size()) + ", expected " +
                std::to_string(in_));
  }
  const auto& k = simd::kernels<T>();
  std::vector<T> y(out_);
  for (int o = 0; o < out_; ++o) {
    y[o] = bias.value[o] + k.dot(weight.value.data() + static_cast<std::size_t>(o) * in_, x.data(), in_);
  }
  return y;
}

template <typename T>
void Linear<T>::backward(std::span<const T> x, std::span<const T> grad_y, std::span<T> grad_x) {
  const auto& k = simd::kernels<T>();
  for (int o = 0; o < out_; ++o) {
    const T g = grad_y[o];
    if (g == T(0)) continue;
    bias.grad[o] += g;
    const std::size_t row = static_cast<std::size_t>(o) * in_;
    k.axpy(g, x.data(), weight.grad.data() + row, in_);
    if (!grad_x.empty()) k.axpy(g, weight.value.data() + row, grad_x.data(), in_);
  }
}

template <typename T>
void Linear<T>::backward(std::span<const T> x, std::span<const T> grad_y) {
  backward(x, grad_y, std::span<T>{});
}

template <typename T>
void Linear<T>::init(std::mt19937_64& rng, T gain) {
  weight.init_uniform(std::sqrt(T(3) * gain / static_cast<T>(in_)), rng);
  std::fill(bias.value.begin(), bias.value.end(), T(0));
}

template <typename T>
void Linear<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  visitor(prefix + ".weight", weight);
  visitor(prefix + ".bias", bias);
}

// ---------------------------------------------------------------------------
// Embedding

template <typename T>
Embedding<T>::Embedding(int vocab_size, int dim) : table({vocab_size, dim}), vocab_(vocab_size), dim_(dim) {}

template <typename T>
std::span<const T> Embedding<T>::row(int index) const {
  if (index < 0 || index >= vocab_) {
    throw Error("token index " + std::to_string(index) + " outside vocabulary of size " +
                std::to_string(vocab_));
  }
  return {table.value.data() + static_cast<std::size_t>(index) * dim_, static_cast<std::size_t>(dim_)};
}

template <typename T>
void Embedding<T>::accumulate(int index, std::span<const T> grad) {
  T* dst = table.grad.data() + static_cast<std::size_t>(index) * dim_;
  simd::kernels<T>().axpy(T(1), grad.data(), dst, dim_);
}

template <typename T>
void Embedding<T>::init(std::mt19937_64& rng) {
  table.init_uniform(std::sqrt(T(3) / static_cast<T>(dim_)), rng);
}

template <typename T>
void Embedding<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  visitor(prefix + ".table", table);
}

// ---------------------------------------------------------------------------
// Gru

template <typename T>
Gru<T>::Gru(int input_dim, int hidden_dim)
    : input_weight({3 * hidden_dim, input_dim}),
      hidden_weight({3 * hidden_dim, hidden_dim}),
      input_bias({3 * hidden_dim}),
      hidden_bias({3 * hidden_dim}),
      input_(input_dim),
      hidden_(hidden_dim) {}

template <typename T>
std::vector<T> Gru<T>::forward(const std::vector<std::vector<T>>& inputs, Cache* cache) const {
  const auto& k = simd::kernels<T>();
  const int H = hidden_;
  std::vector<T> h(H, T(0));
  if (cache) {
    *cache = Cache{};
    cache->states.push_back(h);
  }
  std::vector<T> gx(3 * H), gh(3 * H), r(H), z(H), n(H);
  for (const auto& x : inputs) {
    if (static_cast<int>(x.size()) != input_) throw Error("gru input dimension mismatch");
    for (int j = 0; j < 3 * H; ++j) {
      gx[j] = input_bias.value[j] +
              k.dot(input_weight.value.data() + static_cast<std::size_t>(j) * input_, x.data(), input_);
      gh[j] = hidden_bias.value[j] +
              k.dot(hidden_weight.value.data() + static_cast<std::size_t>(j) * H, h.data(), H);
    }
    std::vector<T> hn(gh.begin() + 2 * H, gh.end());
    std::vector<T> next(H);
    for (int j = 0; j < H; ++j) {
      r[j] = sigmoid(gx[j] + gh[j]);
      z[j] = sigmoid(gx[H + j] + gh[H + j]);
      n[j] = std::tanh(gx[2 * H + j] + r[j] * hn[j]);
      next[j] = (T(1) - z[j]) * n[j] + z[j] * h[j];
    }
    h = std::move(next);
    if (cache) {
      cache->inputs.push_back(x);
      cache->reset.push_back(r);
      cache->update.push_back(z);
      cache->candidate.push_back(n);
      cache->hidden_candidate.push_back(std::move(hn));
      cache->states.push_back(h);
    }
  }
  return h;
}

template <typename T>
void Gru<T>::backward(const Cache& cache, std::span<const T> grad_final,
                      std::vector<std::vector<T>>* grad_inputs) {
  const auto& k = simd::kernels<T>();
  const int H = hidden_;
  const std::size_t steps = cache.inputs.size();
  if (grad_inputs) grad_inputs->assign(steps, std::vector<T>(input_, T(0)));
  std::vector<T> dh(grad_final.begin(), grad_final.end());
  std::vector<T> dgx(3 * H), dgh(3 * H);
  for (std::size_t s = steps; s-- > 0;) {
    const auto& x = cache.inputs[s];
    const auto& hprev = cache.states[s];
    const auto& r = cache.reset[s];
    const auto& z = cache.update[s];
    const auto& n = cache.candidate[s];
    const auto& hn = cache.hidden_candidate[s];
    std::vector<T> dprev(H);
    for (int j = 0; j < H; ++j) {
      const T dn = dh[j] * (T(1) - z[j]);
      const T dz = dh[j] * (hprev[j] - n[j]);
      dprev[j] = dh[j] * z[j];
      const T dn_pre = dn * (T(1) - n[j] * n[j]);
      const T dr = dn_pre * hn[j];
      const T dr_pre = dr * r[j] * (T(1) - r[j]);
      const T dz_pre = dz * z[j] * (T(1) - z[j]);
      dgx[j] = dr_pre;
      dgx[H + j] = dz_pre;
      dgx[2 * H + j] = dn_pre;
      dgh[j] = dr_pre;
      dgh[H + j] = dz_pre;
      dgh[2 * H + j] = dn_pre * r[j];
    }
    for (int j = 0; j < 3 * H; ++j) {
      input_bias.grad[j] += dgx[j];
      hidden_bias.grad[j] += dgh[j];
      const std::size_t irow = static_cast<std::size_t>(j) * input_;
      const std::size_t hrow = static_cast<std::size_t>(j) * H;
      if (dgx[j] != T(0)) {
        k.axpy(dgx[j], x.data(), input_weight.grad.data() + irow, input_);
        if (grad_inputs) k.axpy(dgx[j], input_weight.value.data() + irow, (*grad_inputs)[s].data(), input_);
      }
      if (dgh[j] != T(0)) {
        k.axpy(dgh[j], hprev.data(), hidden_weight.grad.data() + hrow, H);
        k.axpy(dgh[j], hidden_weight.value.data() + hrow, dprev.data(), H);
      }
    }
    dh = std::move(dprev);
  }
}

template <typename T>
void Gru<T>::init(std::mt19937_64& rng) {
  const T bound = T(1) / std::sqrt(static_cast<T>(hidden_));
  input_weight.init_uniform(bound, rng);
  hidden_weight.init_uniform(bound, rng);
  input_bias.init_uniform(bound, rng);
  hidden_bias.init_uniform(bound, rng);
}

template <typename T>
void Gru<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  visitor(prefix + ".input_weight", input_weight);
  visitor(prefix + ".hidden_weight", hidden_weight);
  visitor(prefix + ".input_bias", input_bias);
  visitor(prefix + ".hidden_bias", hidden_bias);
}

template struct Param<float>;
template struct Param<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class Linear<float>;
template class Linear<double>;
template class Embedding<float>;
template class Embedding<double>;
template class Gru<float>;
template class Gru<double>;

}  // namespace ssjdn
