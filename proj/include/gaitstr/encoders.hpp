#pragma once

#include "gaitstr/autograd.hpp"
#include "gaitstr/params.hpp"
#include "gaitstr/skeleton.hpp"

#include <memory>
#include <string>
#include <vector>

namespace gaitstr {

enum class GraphMode { joint, bone };

// D^-1/2 (A + I) D^-1/2 over the joint tree or its line graph (bones are
// adjacent when they share a joint).
Tensor build_adjacency(const SkeletonTopology& topology, GraphMode mode);

// Finest pyramid level only: 2^(P-1) strips, each max+mean pooled and
// projected by its own [C_mid, C] map.
class HorizontalPyramidPool {
 public:
  HorizontalPyramidPool(ParameterStore& store, const std::string& prefix, int scales, int in_channels,
                        int out_channels, Rng& rng);
  int strips() const { return strips_; }
  // [M, N, C_mid] -> [strips, C]
  ad::Var operator()(const ad::Var& map) const;

 private:
  int strips_;
  ad::Var weight_;  // [strips, C_mid, C]
};

struct SilhouetteEncoderConfig {
  std::vector<int> channels{32, 64, 128};
  int out_channels = 64;
  int scales = 5;  // P
};

// Per-frame 3x3 conv stages with 2x2 pooling between them, temporal max,
// then horizontal pyramid pooling.
class SilhouetteEncoder {
 public:
  SilhouetteEncoder(ParameterStore& store, const std::string& prefix, const SilhouetteEncoderConfig& config,
                    Rng& rng);
  // [t, 64, 44, 1] -> [t, M, N, C_mid]
  ad::Var feature_maps(const ad::Var& frames) const;
  // [t, 64, 44, 1] -> [2^(P-1), C]
  ad::Var operator()(const ad::Var& frames) const;
  const SilhouetteEncoderConfig& config() const { return config_; }

 private:
  SilhouetteEncoderConfig config_;
  std::vector<ad::Var> conv_w_, conv_b_;
  std::unique_ptr<HorizontalPyramidPool> hpp_;
};

struct SkeletonFeature {
  ad::Var per_node;  // [t, K, C]
  ad::Var pooled;    // [1, C]
};

// Spatial graph conv (node mixing + pointwise linear) -> ReLU -> temporal
// conv -> residual when widths match -> ReLU.
class StgcnBlock {
 public:
  StgcnBlock(ParameterStore& store, const std::string& prefix, int in_channels, int out_channels,
             int temporal_kernel, Rng& rng);
  ad::Var operator()(const ad::Var& x, const std::shared_ptr<const Tensor>& adjacency) const;
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

 private:
  int in_, out_;
  ad::Var ws_, bs_, wt_, bt_;
};

struct StgcnConfig {
  std::vector<int> channels{64, 64, 128, 128, 64};  // last entry is n_out
  int temporal_kernel = 9;
  int in_channels = 2;
};

class StgcnEncoder {
 public:
  StgcnEncoder(ParameterStore& store, const std::string& prefix, const StgcnConfig& config,
               std::shared_ptr<const Tensor> adjacency, Rng& rng);
  // [t, K, 2] -> per-node [t, K, n_out] and pooled [1, n_out]
  SkeletonFeature operator()(const ad::Var& x) const;
  int nodes() const { return adjacency_->dim(0); }
  const std::shared_ptr<const Tensor>& adjacency() const { return adjacency_; }

 private:
  std::shared_ptr<const Tensor> adjacency_;
  std::vector<StgcnBlock> blocks_;
};

}  // namespace gaitstr
