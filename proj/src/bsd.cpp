#include "ssjdn/bsd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ssjdn {

std::string_view to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::bsd: return "bsd";
    case AttentionMode::ma: return "ma";
    case AttentionMode::none: return "none";
  }
  return "bsd";
}

std::string_view to_string(DirectionMode mode) {
  switch (mode) {
    case DirectionMode::both: return "both";
    case DirectionMode::small_to_large: return "s2l";
    case DirectionMode::large_to_small: return "l2s";
  }
  return "both";
}

AttentionMode parse_attention_mode(std::string_view text) {
  if (text == "bsd") return AttentionMode::bsd;
  if (text == "ma") return AttentionMode::ma;
  if (text == "none") return AttentionMode::none;
  throw Error("unknown attention mode '" + std::string(text) + "' (expected bsd, ma or none)");
}

DirectionMode parse_direction_mode(std::string_view text) {
  if (text == "both") return DirectionMode::both;
  if (text == "s2l") return DirectionMode::small_to_large;
  if (text == "l2s") return DirectionMode::large_to_small;
  throw Error("unknown direction '" + std::string(text) + "' (expected both, s2l or l2s)");
}

template <typename T>
std::size_t SuppressionMask<T>::zero_count() const {
  return static_cast<std::size_t>(std::count(values.data.begin(), values.data.end(), T(0)));
}

// ---------------------------------------------------------------------------
// SalienceAttention

template <typename T>
SalienceAttention<T>::SalienceAttention() : conv_(ConvSpec{2, 1, kKernel, 1, 1}) {}

template <typename T>
AttentionMap<T> SalienceAttention<T>::forward(const Tensor3<T>& feature, Cache* cache) const {
  if (feature.c < 1) throw Error("salience attention needs at least one channel");
  Tensor3<T> descriptor(feature.h, feature.w, 2);
  std::vector<int> argmax(feature.pixels());
  const T inv = T(1) / static_cast<T>(feature.c);
  for (int y = 0; y < feature.h; ++y) {
    for (int x = 0; x < feature.w; ++x) {
      auto px = feature.pixel(y, x);
      T sum = T(0);
      int best = 0;
      for (int ch = 0; ch < feature.c; ++ch) {
        sum += px[ch];
        if (px[ch] > px[best]) best = ch;
      }
      descriptor.at(y, x, 0) = sum * inv;
      descriptor.at(y, x, 1) = px[best];
      argmax[static_cast<std::size_t>(y) * feature.w + x] = best;
    }
  }
  const Tensor3<T> logits = conv_.forward(descriptor);
  AttentionMap<T> attention(feature.h, feature.w);
  for (std::size_t i = 0; i < attention.data.size(); ++i) attention.data[i] = sigmoid(logits.data[i]);
  if (cache) {
    cache->descriptor = std::move(descriptor);
    cache->argmax = std::move(argmax);
    cache->attention = attention;
    cache->channels = feature.c;
  }
  return attention;
}

template <typename T>
void SalienceAttention<T>::backward(const Cache& cache, const AttentionMap<T>& grad_attention,
                                    Tensor3<T>* grad_feature) {
  const int h = cache.attention.h, w = cache.attention.w;
  Tensor3<T> grad_logits(h, w, 1);
  for (std::size_t i = 0; i < grad_logits.data.size(); ++i) {
    const T a = cache.attention.data[i];
    grad_logits.data[i] = grad_attention.data[i] * a * (T(1) - a);
  }
  Tensor3<T> grad_descriptor;
  conv_.backward(cache.descriptor, grad_logits, grad_feature ? &grad_descriptor : nullptr);
  if (!grad_feature) return;
  if (grad_feature->size() == 0) *grad_feature = Tensor3<T>(h, w, cache.channels);
  const T inv = T(1) / static_cast<T>(cache.channels);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto g = grad_feature->pixel(y, x);
      const T mean_grad = grad_descriptor.at(y, x, 0) * inv;
      for (auto& v : g) v += mean_grad;
      g[cache.argmax[static_cast<std::size_t>(y) * w + x]] += grad_descriptor.at(y, x, 1);
    }
  }
}

template <typename T>
void SalienceAttention<T>::init(std::mt19937_64& rng) {
  conv_.init(rng, T(1));
}

template <typename T>
void SalienceAttention<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  conv_.visit(prefix + ".conv", visitor);
}

// ---------------------------------------------------------------------------
// Suppression mask

template <typename T>
SuppressionMask<T> suppression_mask(const AttentionMap<T>& attention, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw Error("suppression ratio must lie in (0,1), got " + std::to_string(ratio));
  }
  const std::size_t n = attention.data.size();
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return attention.data[a] > attention.data[b]; });
  SuppressionMask<T> mask{Map2<T>(attention.h, attention.w, T(1)), ratio};
  for (std::size_t i = 0; i < k; ++i) mask.values.data[order[i]] = T(0);
  return mask;
}

// ---------------------------------------------------------------------------
// DirectionalDecoupler

template <typename T>
typename DirectionalDecoupler<T>::Result DirectionalDecoupler<T>::forward(const ScaleFeatureSet<T>& scales,
                                                                          Direction direction, double ratio,
                                                                          bool suppress, Cache* cache) const {
  const auto& first = scales.maps[0];
  for (const auto& m : scales.maps) {
    if (!m.same_shape(first)) throw Error("scale feature maps must share one shape");
  }
  const std::array<int, 3> order = direction == Direction::small_to_large ? std::array<int, 3>{0, 1, 2}
                                                                          : std::array<int, 3>{2, 1, 0};
  Result result;
  if (cache) {
    cache->direction = direction;
    cache->suppress = suppress;
  }
  const Map2<T>* previous = nullptr;
  for (int step = 0; step < 3; ++step) {
    const int m = order[step];
    const Tensor3<T>& feature = scales.maps[m];
    Tensor3<T> input = feature;
    Map2<T> incoming(feature.h, feature.w, T(1));
    if (suppress && previous) {
      incoming = *previous;
      for (int y = 0; y < feature.h; ++y) {
        for (int x = 0; x < feature.w; ++x) {
          if (incoming.at(y, x) == T(0)) {
            auto px = input.pixel(y, x);
            std::fill(px.begin(), px.end(), T(0));
          }
        }
      }
    }
    typename SalienceAttention<T>::Cache* unit_cache = cache ? &cache->attention[m] : nullptr;
    AttentionMap<T> attention = units_[m].forward(input, unit_cache);
    Tensor3<T> z = feature;
    for (int y = 0; y < feature.h; ++y) {
      for (int x = 0; x < feature.w; ++x) {
        const T a = attention.at(y, x);
        auto dst = z.pixel(y, x);
        auto src = input.pixel(y, x);
        for (int ch = 0; ch < feature.c; ++ch) dst[ch] += a * src[ch];
      }
    }
    result.masks[m] = suppression_mask(attention, ratio).values;
    result.attention[m] = std::move(attention);
    result.decoupled[m] = std::move(z);
    if (cache) {
      cache->inputs[m] = std::move(input);
      cache->incoming_mask[m] = std::move(incoming);
    }
    previous = &result.masks[m];
  }
  return result;
}

template <typename T>
void DirectionalDecoupler<T>::backward(const Cache& cache, const std::array<Tensor3<T>, 3>& grad_decoupled,
                                       std::array<Tensor3<T>, 3>* grad_scales) {
  for (int m = 0; m < 3; ++m) {
    const Tensor3<T>& input = cache.inputs[m];
    const Tensor3<T>& dz = grad_decoupled[m];
    const AttentionMap<T>& attention = cache.attention[m].attention;
    Tensor3<T>& grad_feature = (*grad_scales)[m];
    if (!grad_feature.same_shape(input)) grad_feature = Tensor3<T>(input.h, input.w, input.c);

    AttentionMap<T> grad_attention(input.h, input.w);
    Tensor3<T> grad_input(input.h, input.w, input.c);
    for (int y = 0; y < input.h; ++y) {
      for (int x = 0; x < input.w; ++x) {
        const T a = attention.at(y, x);
        auto g = dz.pixel(y, x);
        auto src = input.pixel(y, x);
        auto gi = grad_input.pixel(y, x);
        T acc = T(0);
        for (int ch = 0; ch < input.c; ++ch) {
          acc += g[ch] * src[ch];
          gi[ch] = a * g[ch];
        }
        grad_attention.at(y, x) = acc;
      }
    }
    units_[m].backward(cache.attention[m], grad_attention, &grad_input);
    const Map2<T>& incoming = cache.incoming_mask[m];
    for (int y = 0; y < input.h; ++y) {
      for (int x = 0; x < input.w; ++x) {
        auto gf = grad_feature.pixel(y, x);
        auto g = dz.pixel(y, x);
        auto gi = grad_input.pixel(y, x);
        const T keep = incoming.at(y, x);
        for (int ch = 0; ch < input.c; ++ch) gf[ch] += g[ch] + keep * gi[ch];
      }
    }
  }
}

template <typename T>
void DirectionalDecoupler<T>::init(std::mt19937_64& rng) {
  for (auto& u : units_) u.init(rng);
}

template <typename T>
void DirectionalDecoupler<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  for (int m = 0; m < 3; ++m) units_[m].visit(prefix + ".sfe" + std::to_string(m + 1), visitor);
}

template <typename T>
typename DirectionalDecoupler<T>::Result directional_decouple(const ScaleFeatureSet<T>& scales, Direction direction,
                                                              const DirectionalDecoupler<T>& params, double ratio) {
  return params.forward(scales, direction, ratio, true, nullptr);
}

// ---------------------------------------------------------------------------
// ScaleFusion

template <typename T>
ScaleFusion<T>::ScaleFusion(int map_count, int channels, int embed_dim)
    : map_count_(map_count), channels_(channels), projection_(map_count * channels, embed_dim) {}

template <typename T>
std::vector<T> ScaleFusion<T>::forward(const std::vector<Tensor3<T>>& maps, Cache* cache) const {
  if (static_cast<int>(maps.size()) != map_count_) {
    throw Error("scale fusion expects " + std::to_string(map_count_) + " maps, got " + std::to_string(maps.size()));
  }
  for (const auto& m : maps) {
    if (!m.same_shape(maps.front()) || m.c != channels_) throw Error("scale fusion: map shape mismatch");
  }
  const int d = channels_;
  std::vector<T> pooled(static_cast<std::size_t>(map_count_) * d, T(0));
  const T inv = T(1) / static_cast<T>(maps.front().pixels());
  for (int i = 0; i < map_count_; ++i) {
    T* dst = pooled.data() + static_cast<std::size_t>(i) * d;
    const auto& map = maps[i];
    for (std::size_t p = 0; p < map.pixels(); ++p) {
      const T* src = map.data.data() + p * d;
      for (int ch = 0; ch < d; ++ch) dst[ch] += src[ch];
    }
    for (int ch = 0; ch < d; ++ch) dst[ch] *= inv;
  }
  auto out = projection_.forward(pooled);
  if (cache) {
    cache->pooled = std::move(pooled);
    cache->h = maps.front().h;
    cache->w = maps.front().w;
    cache->channels = d;
    cache->maps = maps.size();
  }
  return out;
}

template <typename T>
std::vector<Tensor3<T>> ScaleFusion<T>::backward(const Cache& cache, std::span<const T> grad_embedding) {
  std::vector<T> grad_pooled(cache.pooled.size(), T(0));
  projection_.backward(cache.pooled, grad_embedding, grad_pooled);
  const T inv = T(1) / static_cast<T>(cache.h * cache.w);
  std::vector<Tensor3<T>> grads;
  grads.reserve(cache.maps);
  for (std::size_t i = 0; i < cache.maps; ++i) {
    Tensor3<T> g(cache.h, cache.w, cache.channels);
    const T* src = grad_pooled.data() + i * cache.channels;
    for (std::size_t p = 0; p < g.pixels(); ++p) {
      for (int ch = 0; ch < cache.channels; ++ch) g.data[p * cache.channels + ch] = src[ch] * inv;
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

template <typename T>
void ScaleFusion<T>::init(std::mt19937_64& rng) {
  projection_.init(rng);
}

template <typename T>
void ScaleFusion<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  projection_.visit(prefix + ".projection", visitor);
}

template <typename T>
std::vector<T> fuse_scales(const DecoupledFeatureSet<T>& decoupled, const ScaleFusion<T>& params) {
  std::vector<Tensor3<T>> maps(decoupled.small_to_large.begin(), decoupled.small_to_large.end());
  maps.insert(maps.end(), decoupled.large_to_small.begin(), decoupled.large_to_small.end());
  return params.forward(maps, nullptr);
}

// ---------------------------------------------------------------------------
// ScaleDecoupling

template <typename T>
ScaleDecoupling<T>::ScaleDecoupling(const ScaleDecouplingConfig& config, int channels, int embed_dim)
    : config_(config) {
  if (!(config.suppress_ratio > 0.0 && config.suppress_ratio < 1.0)) {
    throw Error("suppress_ratio must lie in (0,1)");
  }
  fusion_ = ScaleFusion<T>(map_count(), channels, embed_dim);
}

template <typename T>
std::vector<Direction> ScaleDecoupling<T>::active_directions() const {
  switch (config_.attention) {
    case AttentionMode::none: return {};
    case AttentionMode::ma: return {Direction::small_to_large};
    case AttentionMode::bsd:
      switch (config_.direction) {
        case DirectionMode::both: return {Direction::small_to_large, Direction::large_to_small};
        case DirectionMode::small_to_large: return {Direction::small_to_large};
        case DirectionMode::large_to_small: return {Direction::large_to_small};
      }
  }
  return {};
}

template <typename T>
int ScaleDecoupling<T>::map_count() const {
  const auto dirs = active_directions();
  return dirs.empty() ? 3 : 3 * static_cast<int>(dirs.size());
}

template <typename T>
typename ScaleDecoupling<T>::Output ScaleDecoupling<T>::forward(const ScaleFeatureSet<T>& scales,
                                                                Cache* cache) const {
  Output out;
  std::vector<Tensor3<T>> maps;
  const bool suppress = config_.attention == AttentionMode::bsd;
  const auto dirs = active_directions();
  if (dirs.empty()) maps.assign(scales.maps.begin(), scales.maps.end());
  if (cache) cache->passes.clear();
  for (Direction d : dirs) {
    const auto& unit = d == Direction::small_to_large ? small_to_large_ : large_to_small_;
    typename DirectionalDecoupler<T>::Cache pass_cache;
    auto result = unit.forward(scales, d, config_.suppress_ratio, suppress, cache ? &pass_cache : nullptr);
    maps.insert(maps.end(), result.decoupled.begin(), result.decoupled.end());
    if (cache) cache->passes.emplace_back(d, std::move(pass_cache));
    out.passes.emplace_back(d, std::move(result));
  }
  out.embedding = fusion_.forward(maps, cache ? &cache->fusion : nullptr);
  return out;
}

template <typename T>
void ScaleDecoupling<T>::backward(const Cache& cache, std::span<const T> grad_embedding,
                                  std::array<Tensor3<T>, 3>* grad_scales) {
  auto grad_maps = fusion_.backward(cache.fusion, grad_embedding);
  for (auto& g : *grad_scales) {
    if (g.h != cache.fusion.h || g.w != cache.fusion.w || g.c != cache.fusion.channels) {
      g = Tensor3<T>(cache.fusion.h, cache.fusion.w, cache.fusion.channels);
    }
  }
  if (cache.passes.empty()) {
    for (int m = 0; m < 3; ++m) {
      auto& dst = (*grad_scales)[m].data;
      const auto& src = grad_maps[m].data;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    return;
  }
  for (std::size_t p = 0; p < cache.passes.size(); ++p) {
    const auto& [direction, pass_cache] = cache.passes[p];
    std::array<Tensor3<T>, 3> grad_pass{std::move(grad_maps[3 * p]), std::move(grad_maps[3 * p + 1]),
                                        std::move(grad_maps[3 * p + 2])};
    decoupler(direction).backward(pass_cache, grad_pass, grad_scales);
  }
}

template <typename T>
void ScaleDecoupling<T>::init(std::mt19937_64& rng) {
  small_to_large_.init(rng);
  large_to_small_.init(rng);
  fusion_.init(rng);
}

template <typename T>
void ScaleDecoupling<T>::visit(const std::string& prefix, const ParamVisitor<T>& visitor) {
  const auto dirs = active_directions();
  const bool uses_s2l = std::find(dirs.begin(), dirs.end(), Direction::small_to_large) != dirs.end();
  const bool uses_l2s = std::find(dirs.begin(), dirs.end(), Direction::large_to_small) != dirs.end();
  if (uses_s2l) small_to_large_.visit(prefix + ".s2l", visitor);
  if (uses_l2s) large_to_small_.visit(prefix + ".l2s", visitor);
  fusion_.visit(prefix + ".fusion", visitor);
}

#define SSJDN_INSTANTIATE_BSD(T)                                                                       \
  template struct SuppressionMask<T>;                                                                  \
  template class SalienceAttention<T>;                                                                 \
  template SuppressionMask<T> suppression_mask<T>(const AttentionMap<T>&, double);                     \
  template class DirectionalDecoupler<T>;                                                              \
  template typename DirectionalDecoupler<T>::Result directional_decouple<T>(                           \
      const ScaleFeatureSet<T>&, Direction, const DirectionalDecoupler<T>&, double);                   \
  template class ScaleFusion<T>;                                                                       \
  template std::vector<T> fuse_scales<T>(const DecoupledFeatureSet<T>&, const ScaleFusion<T>&);        \
  template class ScaleDecoupling<T>;

SSJDN_INSTANTIATE_BSD(float)
SSJDN_INSTANTIATE_BSD(double)

#undef SSJDN_INSTANTIATE_BSD

}  // namespace ssjdn
