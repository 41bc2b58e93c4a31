#include "gaitstr/refinement.hpp"

#include "gaitstr/errors.hpp"
#include "gaitstr/synthetic.hpp"

namespace gaitstr {

ModelVariant parse_variant(std::string_view s) {
  if (s == "silhouette") return ModelVariant::silhouette;
  if (s == "concat_joints") return ModelVariant::concat_joints;
  if (s == "concat_streams") return ModelVariant::concat_streams;
  if (s == "gaitstr") return ModelVariant::gaitstr;
  throw ConfigError("unknown model variant '" + std::string(s) +
                    "' (silhouette|concat_joints|concat_streams|gaitstr)");
}

std::string_view variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::silhouette: return "silhouette";
    case ModelVariant::concat_joints: return "concat_joints";
    case ModelVariant::concat_streams: return "concat_streams";
    case ModelVariant::gaitstr: return "gaitstr";
  }
  return "gaitstr";
}

CmaMode parse_cma_mode(std::string_view s) {
  if (s == "none") return CmaMode::none;
  if (s == "both") return CmaMode::both;
  if (s == "b_to_j") return CmaMode::b_to_j;
  if (s == "j_to_b") return CmaMode::j_to_b;
  throw ConfigError("unknown cma mode '" + std::string(s) + "' (none|both|b_to_j|j_to_b)");
}

std::string_view cma_mode_name(CmaMode m) {
  switch (m) {
    case CmaMode::none: return "none";
    case CmaMode::both: return "both";
    case CmaMode::b_to_j: return "b_to_j";
    case CmaMode::j_to_b: return "j_to_b";
  }
  return "both";
}

void ModelConfig::validate() const {
  auto positive = [](const std::vector<int>& v, const char* what) {
    if (v.empty()) throw ConfigError(std::string(what) + " must not be empty");
    for (int c : v)
      if (c < 1) throw ConfigError(std::string(what) + " entries must be >= 1");
  };
  positive(silhouette_channels, "silhouette_channels");
  positive(gcn_channels, "gcn_channels");
  positive(decoder_channels, "decoder_channels");
  if (embed < 1) throw ConfigError("embed (C) must be >= 1");
  if (scales < 1 || scales > 6) throw ConfigError("scales (P) must lie in [1, 6]");
  if (temporal_kernel < 1 || temporal_kernel % 2 == 0) throw ConfigError("temporal_kernel must be odd");
  if (cma_hidden < 1) throw ConfigError("cma_hidden must be >= 1");
  if (cma_layers < 0 || cma_layers > static_cast<int>(decoder_channels.size()))
    throw ConfigError("cma_layers must lie in [0, number of decoder layers]");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  topology_by_name(topology);
}

int ModelConfig::feature_rows() const {
  switch (variant) {
    case ModelVariant::silhouette: return strips();
    case ModelVariant::concat_joints: return strips() + 1;
    case ModelVariant::concat_streams: return strips() + 2;
    case ModelVariant::gaitstr: return strips() + (include_pre_refinement ? 4 : 2);
  }
  return strips();
}

// --- decoder and adapters -------------------------------------------------------------

CorrectionDecoder::CorrectionDecoder(ParameterStore& store, const std::string& prefix, int input_channels,
                                     const std::vector<int>& channels, int temporal_kernel,
                                     std::shared_ptr<const Tensor> adjacency, Rng& rng)
    : adjacency_(std::move(adjacency)) {
  int cin = input_channels;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    blocks_.emplace_back(store, prefix + ".block" + std::to_string(i), cin, channels[i], temporal_kernel, rng);
    cin = channels[i];
  }
  head_w_ = store.add_zeros(prefix + ".head.weight", {cin, 2});
  head_b_ = store.add_zeros(prefix + ".head.bias", {2});
}

ad::Var CorrectionDecoder::assemble_input(const ad::Var& stream, const ad::Var& silhouette_feature,
                                          const ad::Var& per_node) {
  const auto& s = stream->shape();
  const auto& p = per_node->shape();
  if (s.size() != 3 || s[2] != 2 || p.size() != 3 || p[0] != s[0] || p[1] != s[1])
    throw InvalidInput("correction input mismatch: stream " + shape_string(s) + ", per-node " + shape_string(p));
  return ad::concat_last({ad::tile(silhouette_feature, {s[0], s[1]}), per_node, stream});
}

ad::Var CorrectionDecoder::layer(int i, const ad::Var& x) const {
  return blocks_[static_cast<std::size_t>(i)](x, adjacency_);
}

ad::Var CorrectionDecoder::head(const ad::Var& x) const { return ad::linear(x, head_w_, head_b_); }

CrossModalAdapter::CrossModalAdapter(ParameterStore& store, const std::string& prefix, int channels, int hidden,
                                     Rng& rng) {
  w1_ = store.add_he(prefix + ".fc1.weight", {channels, hidden}, channels, rng);
  b1_ = store.add_zeros(prefix + ".fc1.bias", {hidden});
  w2_ = store.add_zeros(prefix + ".fc2.weight", {hidden, channels});
  b2_ = store.add_zeros(prefix + ".fc2.bias", {channels});
}

ad::Var CrossModalAdapter::delta(const ad::Var& peer, int nodes) const {
  if (peer->value.rank() != 3 || peer->value.dim(2) != w1_->value.dim(0))
    throw InvalidInput("cross-modal adapter: peer feature " + shape_string(peer->shape()) + " does not have " +
                       std::to_string(w1_->value.dim(0)) + " channels");
  const ad::Var hidden = ad::relu(ad::linear(ad::mean_nodes(peer), w1_, b1_));
  return ad::broadcast_nodes(ad::linear(hidden, w2_, b2_), nodes);
}

std::pair<ad::Var, ad::Var> cross_modal_adapt(const ad::Var& joints_layer, const ad::Var& bones_layer,
                                              const CrossModalAdapter* j_to_b, const CrossModalAdapter* b_to_j) {
  if (joints_layer->value.dim(2) != bones_layer->value.dim(2) || joints_layer->value.dim(0) != bones_layer->value.dim(0))
    throw InvalidInput("cross-modal adapter: joint features " + shape_string(joints_layer->shape()) +
                       " and bone features " + shape_string(bones_layer->shape()) + " are incompatible");
  ad::Var new_j = joints_layer, new_b = bones_layer;
  if (b_to_j) new_j = ad::add(joints_layer, b_to_j->delta(bones_layer, joints_layer->value.dim(1)));
  if (j_to_b) new_b = ad::add(bones_layer, j_to_b->delta(joints_layer, bones_layer->value.dim(1)));
  return {new_j, new_b};
}

// --- full model -------------------------------------------------------------------------

ad::Var joints_to_bones_var(const SkeletonTopology& topology, const ad::Var& joints) {
  return ad::edge_difference(joints, topology.edges());
}

ModelInput make_input(const SilhouetteSequence& silhouettes, const JointSequence& joints) {
  if (silhouettes.frames() != joints.frames())
    throw InvalidInput("silhouette and joint frame counts differ (" + std::to_string(silhouettes.frames()) + " vs " +
                       std::to_string(joints.frames()) + ")");
  return {silhouettes.to_tensor(), joints.to_tensor()};
}

GaitStrModel::GaitStrModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  topology_ = topology_by_name(config_.topology);
  auto rng_for = [&](std::uint64_t tag) { return Rng(derive_seed(config_.init_seed, {tag})); };

  {
    Rng rng = rng_for(1);
    silhouette_ = std::make_unique<SilhouetteEncoder>(
        params_, "silhouette", SilhouetteEncoderConfig{config_.silhouette_channels, config_.embed, config_.scales}, rng);
  }
  const bool joints = config_.variant != ModelVariant::silhouette;
  const bool bones = config_.variant == ModelVariant::concat_streams || config_.variant == ModelVariant::gaitstr;
  StgcnConfig gcn;
  gcn.channels = config_.gcn_channels;
  gcn.channels.push_back(config_.embed);
  gcn.temporal_kernel = config_.temporal_kernel;
  auto joint_adj = std::make_shared<const Tensor>(build_adjacency(*topology_, GraphMode::joint));
  auto bone_adj = std::make_shared<const Tensor>(build_adjacency(*topology_, GraphMode::bone));
  if (joints) {
    Rng rng = rng_for(2);
    joint_encoder_ = std::make_unique<StgcnEncoder>(params_, "joint_encoder", gcn, joint_adj, rng);
  }
  if (bones) {
    Rng rng = rng_for(3);
    bone_encoder_ = std::make_unique<StgcnEncoder>(params_, "bone_encoder", gcn, bone_adj, rng);
  }
  if (config_.variant == ModelVariant::gaitstr) {
    const int width = config_.strips() * config_.embed + config_.embed + 2;
    Rng rj = rng_for(4), rb = rng_for(5), ra = rng_for(6);
    joint_decoder_ = std::make_unique<CorrectionDecoder>(params_, "joint_decoder", width, config_.decoder_channels,
                                                         config_.temporal_kernel, joint_adj, rj);
    bone_decoder_ = std::make_unique<CorrectionDecoder>(params_, "bone_decoder", width, config_.decoder_channels,
                                                        config_.temporal_kernel, bone_adj, rb);
    for (int l = 0; l < config_.cma_layers; ++l) {
      const int c = config_.decoder_channels[static_cast<std::size_t>(l)];
      const std::string tag = std::to_string(l);
      j_to_b_.push_back(config_.cma == CmaMode::both || config_.cma == CmaMode::j_to_b
                            ? std::make_unique<CrossModalAdapter>(params_, "cma" + tag + ".j_to_b", c,
                                                                  config_.cma_hidden, ra)
                            : nullptr);
      b_to_j_.push_back(config_.cma == CmaMode::both || config_.cma == CmaMode::b_to_j
                            ? std::make_unique<CrossModalAdapter>(params_, "cma" + tag + ".b_to_j", c,
                                                                  config_.cma_hidden, ra)
                            : nullptr);
    }
  }
  const int flat = config_.feature_rows() * config_.embed;
  Rng rng = rng_for(7);
  cls_w_ = params_.add_he("classifier.weight", {flat, config_.num_classes}, flat, rng);
  cls_b_ = params_.add_zeros("classifier.bias", {config_.num_classes});
}

std::vector<std::string> GaitStrModel::refinement_parameter_names() const {
  std::vector<std::string> out;
  for (const auto& n : params_.names())
    if (n.rfind("joint_decoder.", 0) == 0 || n.rfind("bone_decoder.", 0) == 0 || n.rfind("cma", 0) == 0)
      out.push_back(n);
  return out;
}

RefinedStreams GaitStrModel::correct(const ad::Var& joints, const ad::Var& bones, const ad::Var& f_s,
                                     const SkeletonFeature& fj, const SkeletonFeature& fb) const {
  ad::Var hj = CorrectionDecoder::assemble_input(joints, f_s, fj.per_node);
  ad::Var hb = CorrectionDecoder::assemble_input(bones, f_s, fb.per_node);
  for (int l = 0; l < joint_decoder_->layers(); ++l) {
    hj = joint_decoder_->layer(l, hj);
    hb = bone_decoder_->layer(l, hb);
    if (l < static_cast<int>(j_to_b_.size()))
      std::tie(hj, hb) = cross_modal_adapt(hj, hb, j_to_b_[static_cast<std::size_t>(l)].get(),
                                           b_to_j_[static_cast<std::size_t>(l)].get());
  }
  RefinedStreams r;
  r.delta_joints = joint_decoder_->head(hj);
  r.delta_bones = bone_decoder_->head(hb);
  r.joints = ad::add(joints, r.delta_joints);
  r.bones = ad::add(bones, r.delta_bones);
  return r;
}

namespace {

void check_input(const ModelInput& in, const SkeletonTopology& topo) {
  const auto& j = in.joints.shape();
  if (j.size() != 3 || j[1] != topo.num_joints() || j[2] != 2)
    throw InvalidInput("model input joints must be [t, " + std::to_string(topo.num_joints()) + ", 2], got " +
                       shape_string(j));
  if (in.silhouettes.rank() != 4 || in.silhouettes.dim(0) != j[0])
    throw InvalidInput("model input silhouettes " + shape_string(in.silhouettes.shape()) + " do not match " +
                       std::to_string(j[0]) + " joint frames");
}

}  // namespace

EmbeddingBundle GaitStrModel::forward(const ModelInput& input) const {
  check_input(input, *topology_);
  EmbeddingBundle out;
  out.silhouette = (*silhouette_)(ad::constant(input.silhouettes));
  std::vector<ad::Var> rows{out.silhouette};

  if (joint_encoder_) {
    const ad::Var joints = ad::constant(input.joints);
    const SkeletonFeature fj = (*joint_encoder_)(joints);
    out.joints = fj.pooled;
    if (bone_encoder_) {
      const ad::Var bones = joints_to_bones_var(*topology_, joints);
      const SkeletonFeature fb = (*bone_encoder_)(bones);
      out.bones = fb.pooled;
      if (joint_decoder_) {
        out.refined = correct(joints, bones, out.silhouette, fj, fb);
        out.refined_joints = (*joint_encoder_)(out.refined->joints).pooled;
        out.refined_bones = (*bone_encoder_)(out.refined->bones).pooled;
      }
    }
    const bool pre = config_.variant != ModelVariant::gaitstr || config_.include_pre_refinement;
    if (pre) rows.push_back(out.joints);
    if (pre && out.bones) rows.push_back(out.bones);
    if (out.refined) {
      rows.push_back(out.refined_joints);
      rows.push_back(out.refined_bones);
    }
  }
  out.feature = rows.size() == 1 ? rows[0] : ad::concat_first(rows);
  const int flat = config_.feature_rows() * config_.embed;
  out.logits = ad::linear(ad::reshape(out.feature, {1, flat}), cls_w_, cls_b_);
  return out;
}

RefinedStreams GaitStrModel::refine(const ModelInput& input) const {
  if (config_.variant != ModelVariant::gaitstr) throw InvalidInput("refine requires the gaitstr variant");
  check_input(input, *topology_);
  const ad::Var f_s = (*silhouette_)(ad::constant(input.silhouettes));
  const ad::Var joints = ad::constant(input.joints);
  const ad::Var bones = joints_to_bones_var(*topology_, joints);
  return correct(joints, bones, f_s, (*joint_encoder_)(joints), (*bone_encoder_)(bones));
}

void zero_refinement(GaitStrModel& model) {
  for (const auto& n : model.refinement_parameter_names()) model.params().get(n)->value.set_zero();
}

}  // namespace gaitstr
