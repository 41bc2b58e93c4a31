#include "gaitstr/encoders.hpp"

#include "gaitstr/errors.hpp"
#include "gaitstr/synthetic.hpp"

#include <cmath>

namespace gaitstr {

Tensor build_adjacency(const SkeletonTopology& topology, GraphMode mode) {
  const auto& edges = topology.edges();
  const int k = mode == GraphMode::joint ? topology.num_joints() : topology.num_edges();
  Tensor a({k, k});
  auto m = a.matrix();
  for (int i = 0; i < k; ++i) m(i, i) = 1.0;
  if (mode == GraphMode::joint) {
    for (const auto& [p, c] : edges) m(p, c) = m(c, p) = 1.0;
  } else {
    for (int i = 0; i < k; ++i)
      for (int j = i + 1; j < k; ++j) {
        const auto& [p1, c1] = edges[static_cast<std::size_t>(i)];
        const auto& [p2, c2] = edges[static_cast<std::size_t>(j)];
        if (p1 == p2 || p1 == c2 || c1 == p2 || c1 == c2) m(i, j) = m(j, i) = 1.0;
      }
  }
  std::vector<double> inv_sqrt(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) inv_sqrt[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(m.row(i).sum());
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) m(i, j) *= inv_sqrt[static_cast<std::size_t>(i)] * inv_sqrt[static_cast<std::size_t>(j)];
  return a;
}

HorizontalPyramidPool::HorizontalPyramidPool(ParameterStore& store, const std::string& prefix, int scales,
                                             int in_channels, int out_channels, Rng& rng)
    : strips_(1 << (scales - 1)) {
  if (scales < 1 || scales > 8) throw InvalidInput("pyramid scale P must lie in [1, 8]");
  weight_ = store.add_he(prefix + ".weight", {strips_, in_channels, out_channels}, in_channels, rng);
}

ad::Var HorizontalPyramidPool::operator()(const ad::Var& map) const {
  return ad::rowwise_linear(ad::strip_pool(map, strips_), weight_);
}

SilhouetteEncoder::SilhouetteEncoder(ParameterStore& store, const std::string& prefix,
                                     const SilhouetteEncoderConfig& config, Rng& rng)
    : config_(config) {
  const int stages = static_cast<int>(config.channels.size());
  if (stages < 1) throw InvalidInput("silhouette encoder needs at least one conv stage");
  int h = kSilhouetteHeight, w = kSilhouetteWidth, cin = 1;
  for (int s = 0; s < stages; ++s) {
    const int cout = config.channels[static_cast<std::size_t>(s)];
    conv_w_.push_back(store.add_he(prefix + ".conv" + std::to_string(s) + ".weight", {9 * cin, cout}, 9 * cin, rng));
    conv_b_.push_back(store.add_zeros(prefix + ".conv" + std::to_string(s) + ".bias", {cout}));
    if (s + 1 < stages) {
      if (h % 2 || w % 2)
        throw GeometryError("silhouette encoder: cannot pool a " + std::to_string(h) + "x" + std::to_string(w) + " map");
      h /= 2;
      w /= 2;
    }
    cin = cout;
  }
  const int strips = 1 << (config.scales - 1);
  if (h % strips)
    throw GeometryError("silhouette encoder: feature height " + std::to_string(h) + " not divisible by " +
                        std::to_string(strips) + " strips");
  hpp_ = std::make_unique<HorizontalPyramidPool>(store, prefix + ".hpp", config.scales, cin, config.out_channels, rng);
}

ad::Var SilhouetteEncoder::feature_maps(const ad::Var& frames) const {
  const auto& s = frames->shape();
  if (s.size() != 4 || s[1] != kSilhouetteHeight || s[2] != kSilhouetteWidth || s[3] != 1 || s[0] < 1)
    throw InvalidInput("silhouette encoder expects [t, 64, 44, 1], got " + shape_string(s));
  ad::Var x = frames;
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    x = ad::conv2d_3x3(x, conv_w_[i], conv_b_[i], true);
    if (i + 1 < conv_w_.size()) x = ad::max_pool2(x);
  }
  return x;
}

ad::Var SilhouetteEncoder::operator()(const ad::Var& frames) const {
  return (*hpp_)(ad::max_over_first(feature_maps(frames)));
}

StgcnBlock::StgcnBlock(ParameterStore& store, const std::string& prefix, int in_channels, int out_channels,
                       int temporal_kernel, Rng& rng)
    : in_(in_channels), out_(out_channels) {
  if (temporal_kernel < 1 || temporal_kernel % 2 == 0) throw InvalidInput("temporal kernel must be odd");
  ws_ = store.add_he(prefix + ".spatial.weight", {in_channels, out_channels}, in_channels, rng);
  bs_ = store.add_zeros(prefix + ".spatial.bias", {out_channels});
  wt_ = store.add_he(prefix + ".temporal.weight", {temporal_kernel, out_channels, out_channels},
                     temporal_kernel * out_channels, rng);
  bt_ = store.add_zeros(prefix + ".temporal.bias", {out_channels});
}

ad::Var StgcnBlock::operator()(const ad::Var& x, const std::shared_ptr<const Tensor>& adjacency) const {
  // A (X W) == (A X) W; mix on the narrower side.
  ad::Var h = in_ > out_ ? ad::graph_mix(ad::linear(x, ws_, nullptr), adjacency)
                         : ad::linear(ad::graph_mix(x, adjacency), ws_, nullptr);
  h = ad::relu(ad::add(h, ad::tile(bs_, {h->shape()[0], h->shape()[1]})));
  h = ad::temporal_conv(h, wt_, bt_);
  if (in_ == out_) h = ad::add(h, x);
  return ad::relu(h);
}

StgcnEncoder::StgcnEncoder(ParameterStore& store, const std::string& prefix, const StgcnConfig& config,
                           std::shared_ptr<const Tensor> adjacency, Rng& rng)
    : adjacency_(std::move(adjacency)) {
  if (config.channels.empty()) throw InvalidInput("ST-GCN needs at least one block");
  int cin = config.in_channels;
  for (std::size_t i = 0; i < config.channels.size(); ++i) {
    blocks_.emplace_back(store, prefix + ".block" + std::to_string(i), cin, config.channels[i],
                         config.temporal_kernel, rng);
    cin = config.channels[i];
  }
}

SkeletonFeature StgcnEncoder::operator()(const ad::Var& x) const {
  const auto& s = x->shape();
  if (s.size() != 3 || s[1] != nodes() || s[2] != blocks_.front().in_channels() || s[0] < 1)
    throw InvalidInput("ST-GCN expects [t, " + std::to_string(nodes()) + ", " +
                       std::to_string(blocks_.front().in_channels()) + "], got " + shape_string(s));
  ad::Var h = x;
  for (const auto& b : blocks_) h = b(h, adjacency_);
  return {h, ad::mean_rows(h)};
}

}  // namespace gaitstr
