#pragma once

#include <array>
#include <string_view>
#include <vector>

#include "ssjdn/encoders.hpp"
#include "ssjdn/layers.hpp"

namespace ssjdn {

template <typename T>
using AttentionMap = Map2<T>;

// Binary map: 0 at the suppressed (most salient) positions, 1 elsewhere.
template <typename T>
struct SuppressionMask {
  Map2<T> values;
  double suppress_ratio = 0.25;

  std::size_t zero_count() const;
};

enum class Direction { small_to_large, large_to_small };

// Which scale-decoupling variant feeds the image embedding.
enum class AttentionMode {
  bsd,   // attention + stepwise suppression
  ma,    // attention per scale, no suppression
  none,  // raw pyramid
};

enum class DirectionMode { both, small_to_large, large_to_small };

std::string_view to_string(AttentionMode mode);
std::string_view to_string(DirectionMode mode);
AttentionMode parse_attention_mode(std::string_view text);
DirectionMode parse_direction_mode(std::string_view text);

// Spatial attention: channel-wise mean and max descriptors, a 7x7 conv to one
// channel, then a sigmoid.
template <typename T>
class SalienceAttention {
 public:
  static constexpr int kKernel = 7;

  struct Cache {
    Tensor3<T> descriptor;        // h x w x 2 (mean, max)
    std::vector<int> argmax;      // channel of the max per pixel, first on ties
    AttentionMap<T> attention;
    int channels = 0;
  };

  SalienceAttention();

  AttentionMap<T> forward(const Tensor3<T>& feature, Cache* cache) const;
  // Accumulates into grad_feature (allocated if empty).
  void backward(const Cache& cache, const AttentionMap<T>& grad_attention, Tensor3<T>* grad_feature);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  Conv2d<T>& conv() { return conv_; }

 private:
  Conv2d<T> conv_;
};

// Zeroes the k = round(ratio*h*w) largest attention values; ties are broken
// in row-major order. Throws for ratio outside (0,1).
template <typename T>
SuppressionMask<T> suppression_mask(const AttentionMap<T>& attention, double ratio);

// One directional pass over the three scales.
template <typename T>
class DirectionalDecoupler {
 public:
  struct Result {
    std::array<Tensor3<T>, 3> decoupled;   // indexed by scale m (not by step)
    std::array<AttentionMap<T>, 3> attention;
    std::array<Map2<T>, 3> masks;          // mask produced at scale m
  };

  struct Cache {
    Direction direction = Direction::small_to_large;
    bool suppress = true;
    std::array<Tensor3<T>, 3> inputs;      // B_prev * F_m (or F_m at the first step)
    std::array<Map2<T>, 3> incoming_mask;  // all ones at the first step
    std::array<typename SalienceAttention<T>::Cache, 3> attention;
  };

  DirectionalDecoupler() = default;

  // With suppress=false every step sees the unmasked F_m (plain multi-scale
  // attention).
  Result forward(const ScaleFeatureSet<T>& scales, Direction direction, double ratio, bool suppress,
                 Cache* cache) const;
  // Mask is a constant in the backward pass. Accumulates into grad_scales.
  void backward(const Cache& cache, const std::array<Tensor3<T>, 3>& grad_decoupled,
                std::array<Tensor3<T>, 3>* grad_scales);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  SalienceAttention<T>& unit(int scale) { return units_[scale]; }

 private:
  std::array<SalienceAttention<T>, 3> units_;
};

template <typename T>
struct DecoupledFeatureSet {
  std::array<Tensor3<T>, 3> small_to_large;  // Z_m
  std::array<Tensor3<T>, 3> large_to_small;  // Z-hat_m
};

template <typename T>
typename DirectionalDecoupler<T>::Result directional_decouple(const ScaleFeatureSet<T>& scales, Direction direction,
                                                              const DirectionalDecoupler<T>& params, double ratio);

// Channel concat of k maps, global average pooling, linear projection to d'.
template <typename T>
class ScaleFusion {
 public:
  struct Cache {
    std::vector<T> pooled;
    int h = 0, w = 0, channels = 0;
    std::size_t maps = 0;
  };

  ScaleFusion() = default;
  ScaleFusion(int map_count, int channels, int embed_dim);

  std::vector<T> forward(const std::vector<Tensor3<T>>& maps, Cache* cache) const;
  std::vector<Tensor3<T>> backward(const Cache& cache, std::span<const T> grad_embedding);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  Linear<T>& projection() { return projection_; }

 private:
  int map_count_ = 0;
  int channels_ = 0;
  Linear<T> projection_;
};

template <typename T>
std::vector<T> fuse_scales(const DecoupledFeatureSet<T>& decoupled, const ScaleFusion<T>& params);

struct ScaleDecouplingConfig {
  AttentionMode attention = AttentionMode::bsd;
  DirectionMode direction = DirectionMode::both;
  double suppress_ratio = 0.25;
};

// Complete image-side decoupling: the configured directional passes followed
// by scale fusion into one d' vector.
template <typename T>
class ScaleDecoupling {
 public:
  struct Cache {
    std::vector<std::pair<Direction, typename DirectionalDecoupler<T>::Cache>> passes;
    typename ScaleFusion<T>::Cache fusion;
  };

  struct Output {
    std::vector<T> embedding;
    std::vector<std::pair<Direction, typename DirectionalDecoupler<T>::Result>> passes;
  };

  ScaleDecoupling() = default;
  ScaleDecoupling(const ScaleDecouplingConfig& config, int channels, int embed_dim);

  int map_count() const;
  const ScaleDecouplingConfig& config() const { return config_; }

  Output forward(const ScaleFeatureSet<T>& scales, Cache* cache) const;
  void backward(const Cache& cache, std::span<const T> grad_embedding, std::array<Tensor3<T>, 3>* grad_scales);

  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& visitor);

  DirectionalDecoupler<T>& decoupler(Direction d) {
    return d == Direction::small_to_large ? small_to_large_ : large_to_small_;
  }
  ScaleFusion<T>& fusion() { return fusion_; }

 private:
  std::vector<Direction> active_directions() const;

  ScaleDecouplingConfig config_;
  DirectionalDecoupler<T> small_to_large_;
  DirectionalDecoupler<T> large_to_small_;
  ScaleFusion<T> fusion_;
};

}  // namespace ssjdn
