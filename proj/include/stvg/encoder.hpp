#pragma once

// Cross-modality spatio-temporal encoder. Each layer runs
//   vision: temporal self-attention across frames at each position, then
//           multi-scale deformable attention within each frame;
//   text:   self-attention over tokens;
// then fuses the two streams with a shared joint score matrix
// (image-to-text and text-to-image cross-attention) and per-stream FFNs.
// Every sub-block is pre-norm with a residual connection.

#include <utility>
#include <vector>

#include "stvg/backbones.hpp"
#include "stvg/core_types.hpp"
#include "stvg/deformable.hpp"
#include "stvg/nn.hpp"

namespace stvg {

// Joint visual-textual scores for one head: [T * S, L] row-major, padded
// tokens set to -infinity.
struct JointScores {
  int rows = 0;
  int cols = 0;
  std::vector<std::vector<double>> per_head;
};

class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(nn::ParamStore& store, const std::string& name, const ModelConfig& cfg, nn::Rng& rng);

  // Temporal MHSA (when enabled) followed by spatial deformable attention.
  ag::Var temporal_then_spatial(const VisualFeatureMap& visual, bool temporal_enabled) const;
  ag::Var text_self_attention(const TextFeatures& text) const;

  // <proj_q_v(v_i), proj_q_p(p_j)> / sqrt(d_k) per head, applied directly to
  // the given rows (fusion_messages feeds it the layer-normed intermediates).
  // Inspection only; not differentiable.
  JointScores joint_attention(const ag::Var& visual_mid, const TextFeatures& text_mid) const;

  // Cross-attention messages (before residual/FFN): visual <- text, text <- visual.
  std::pair<ag::Var, ag::Var> fusion_messages(const ag::Var& visual_mid, const VisualFeatureMap& layout,
                                              const ag::Var& text_mid, const TextFeatures& text,
                                              ag::AttentionProbs* v2t = nullptr,
                                              ag::AttentionProbs* t2v = nullptr) const;

  std::pair<ag::Var, ag::Var> bidirectional_fusion(const ag::Var& visual_mid, const VisualFeatureMap& layout,
                                                   const ag::Var& text_mid, const TextFeatures& text) const;

  // One full layer.
  std::pair<VisualFeatureMap, TextFeatures> forward(const VisualFeatureMap& visual, const TextFeatures& text,
                                                    bool temporal_enabled) const;

  nn::LayerNorm temporal_norm;
  nn::MultiHeadAttention temporal_attn;
  nn::LayerNorm spatial_norm;
  DeformableAttention spatial_attn;
  nn::LayerNorm text_norm;
  nn::MultiHeadAttention text_attn;
  nn::LayerNorm fuse_norm_v, fuse_norm_p;
  nn::Linear proj_q_v, proj_q_p, proj_v, proj_p;
  nn::LayerNorm ffn_norm_v, ffn_norm_p;
  nn::FeedForward ffn_v, ffn_p;
  int heads = 1;
};

class CrossModalEncoder {
 public:
  CrossModalEncoder() = default;
  CrossModalEncoder(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng);

  // Applies the layers in order; zero layers returns the inputs unchanged.
  std::pair<VisualFeatureMap, TextFeatures> encode(const VisualFeatureMap& visual, const TextFeatures& text) const;

  int num_layers() const { return static_cast<int>(layers_.size()); }
  const EncoderLayer& layer(int i) const { return layers_.at(i); }
  bool temporal_enabled() const { return temporal_; }
  void set_temporal_enabled(bool on) { temporal_ = on; }

 private:
  std::vector<EncoderLayer> layers_;
  bool temporal_ = true;
};

}  // namespace stvg
