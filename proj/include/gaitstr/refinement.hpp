#pragma once

#include "gaitstr/encoders.hpp"
#include "gaitstr/skeleton.hpp"
#include "gaitstr/synthetic.hpp"

#include <optional>
#include <string>
#include <vector>

namespace gaitstr {

enum class ModelVariant {
  silhouette,      // [F_S]
  concat_joints,   // [F_S; F_J]
  concat_streams,  // [F_S; F_J; F_B]
  gaitstr,         // [F_S; F_J; F_B; F_J'; F_B'] (pre-refinement rows optional)
};
ModelVariant parse_variant(std::string_view s);
std::string_view variant_name(ModelVariant v);

enum class CmaMode { none, both, b_to_j, j_to_b };
CmaMode parse_cma_mode(std::string_view s);
std::string_view cma_mode_name(CmaMode m);

struct ModelConfig {
  ModelVariant variant = ModelVariant::gaitstr;
  std::string topology = "synth13";
  std::vector<int> silhouette_channels{32, 64, 128};
  std::vector<int> gcn_channels{64, 64, 128, 128};  // hidden blocks; C is appended
  std::vector<int> decoder_channels{128, 64, 64};
  int embed = 64;  // C
  int scales = 5;  // P
  int temporal_kernel = 9;
  int cma_hidden = 64;  // h
  int cma_layers = 3;   // k
  CmaMode cma = CmaMode::both;
  bool include_pre_refinement = true;
  int num_classes = 8;
  std::uint64_t init_seed = 0;

  void validate() const;
  int strips() const { return 1 << (scales - 1); }
  int feature_rows() const;
};

// Reversed ST-GCN stack mapping [t, K, 16C + C + 2] to a [t, K, 2]
// displacement. The output head is a zero-initialized pointwise linear map.
class CorrectionDecoder {
 public:
  CorrectionDecoder(ParameterStore& store, const std::string& prefix, int input_channels,
                    const std::vector<int>& channels, int temporal_kernel, std::shared_ptr<const Tensor> adjacency,
                    Rng& rng);
  int layers() const { return static_cast<int>(blocks_.size()); }
  int layer_channels(int i) const { return blocks_[static_cast<std::size_t>(i)].out_channels(); }
  // Assembles the per-node decoder input from the stream, F_S and the
  // stream's per-node encoder features.
  static ad::Var assemble_input(const ad::Var& stream, const ad::Var& silhouette_feature, const ad::Var& per_node);
  ad::Var layer(int i, const ad::Var& x) const;
  ad::Var head(const ad::Var& x) const;

 private:
  std::shared_ptr<const Tensor> adjacency_;
  std::vector<StgcnBlock> blocks_;
  ad::Var head_w_, head_b_;
};

// Residual 2-layer perceptron from one stream's layer features to the
// other's. The peer is mean-pooled over nodes and broadcast back, so the
// joint and bone graphs may differ in node count.
class CrossModalAdapter {
 public:
  CrossModalAdapter(ParameterStore& store, const std::string& prefix, int channels, int hidden, Rng& rng);
  // Delta added to a stream with `nodes` nodes, computed from `peer`.
  ad::Var delta(const ad::Var& peer, int nodes) const;

 private:
  ad::Var w1_, b1_, w2_, b2_;
};

// Simultaneous exchange: both directions read the pre-update features.
// Null adapters leave their target unchanged.
std::pair<ad::Var, ad::Var> cross_modal_adapt(const ad::Var& joints_layer, const ad::Var& bones_layer,
                                              const CrossModalAdapter* j_to_b, const CrossModalAdapter* b_to_j);

struct RefinedStreams {
  ad::Var delta_joints, joints;  // [t, K_J, 2]
  ad::Var delta_bones, bones;    // [t, K_B, 2]
};

struct EmbeddingBundle {
  ad::Var silhouette;  // F_S [16, C]
  ad::Var joints, bones, refined_joints, refined_bones;  // [1, C], null when the variant omits them
  ad::Var feature;  // [rows, C]
  ad::Var logits;   // [1, num_classes]
  std::optional<RefinedStreams> refined;
};

struct ModelInput {
  Tensor silhouettes;  // [t, 64, 44, 1]
  Tensor joints;       // [t, K_J, 2]
};
ModelInput make_input(const SilhouetteSequence& silhouettes, const JointSequence& joints);

class GaitStrModel {
 public:
  explicit GaitStrModel(const ModelConfig& config);
  GaitStrModel(const GaitStrModel&) = delete;
  GaitStrModel& operator=(const GaitStrModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const TopologyPtr& topology() const { return topology_; }

  EmbeddingBundle forward(const ModelInput& input) const;
  // Correction pass on its own (variant must be gaitstr).
  RefinedStreams refine(const ModelInput& input) const;

  // Component access for property tests.
  const SilhouetteEncoder* silhouette_encoder() const { return silhouette_.get(); }
  const StgcnEncoder* joint_encoder() const { return joint_encoder_.get(); }
  const StgcnEncoder* bone_encoder() const { return bone_encoder_.get(); }
  const CorrectionDecoder* joint_decoder() const { return joint_decoder_.get(); }
  const CorrectionDecoder* bone_decoder() const { return bone_decoder_.get(); }
  // Names of the decoder and adapter parameters (zeroed by zero_refinement).
  std::vector<std::string> refinement_parameter_names() const;

 private:
  RefinedStreams correct(const ad::Var& joints, const ad::Var& bones, const ad::Var& f_s, const SkeletonFeature& fj,
                         const SkeletonFeature& fb) const;

  ModelConfig config_;
  TopologyPtr topology_;
  ParameterStore params_;
  std::unique_ptr<SilhouetteEncoder> silhouette_;
  std::unique_ptr<StgcnEncoder> joint_encoder_, bone_encoder_;
  std::unique_ptr<CorrectionDecoder> joint_decoder_, bone_decoder_;
  std::vector<std::unique_ptr<CrossModalAdapter>> j_to_b_, b_to_j_;
  ad::Var cls_w_, cls_b_;
};

// Sets every decoder and adapter parameter to zero.
void zero_refinement(GaitStrModel& model);

// Differentiable joints -> bones for [t, K_J, 2] tensors.
ad::Var joints_to_bones_var(const SkeletonTopology& topology, const ad::Var& joints);

}  // namespace gaitstr
