#pragma once

// Cross-modality spatio-temporal decoder. Each layer refines the per-frame
// queries with temporal self-attention (same query slot across frames),
// spatial self-attention (queries of one frame), visual cross-attention
// restricted to the query's own frame, textual cross-attention over unpadded
// tokens and an FFN, each pre-norm with a residual. Anchors are refined after
// every layer through the shared box head.

#include <vector>

#include "stvg/backbones.hpp"
#include "stvg/heads.hpp"
#include "stvg/nn.hpp"
#include "stvg/query_selection.hpp"

namespace stvg {

struct DecoderLayerOutput {
  ag::Var content;       // [T * Q, d] after the layer
  ag::Var anchors_in;    // anchors the layer was conditioned on
  ag::Var boxes;         // refined boxes (differentiable)
  ag::Var anchors_out;   // detached refined boxes fed to the next layer
};

class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(nn::ParamStore& store, const std::string& name, const ModelConfig& cfg, nn::Rng& rng);

  // Throws ConfigError when T or d_model disagree between queries and features.
  ag::Var forward(const ag::Var& content, const ag::Var& positional, int num_frames, int num_query,
                  const VisualFeatureMap& visual, const TextFeatures& text, bool temporal_enabled) const;

  nn::LayerNorm temporal_norm;
  nn::MultiHeadAttention temporal_attn;
  nn::LayerNorm spatial_norm;
  nn::MultiHeadAttention spatial_attn;
  nn::LayerNorm visual_norm;
  nn::MultiHeadAttention visual_attn;
  nn::LayerNorm text_norm;
  nn::MultiHeadAttention text_attn;
  nn::LayerNorm ffn_norm;
  nn::FeedForward ffn;
};

class CrossModalDecoder {
 public:
  CrossModalDecoder() = default;
  CrossModalDecoder(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng);

  // One layer including anchor refinement and positional recomputation.
  DecoderLayerOutput decode_layer(int index, const ag::Var& content, const ag::Var& anchors, int num_frames,
                                  int num_query, const VisualFeatureMap& visual, const TextFeatures& text,
                                  const QuerySelection& selection, const PredictionHeads& heads) const;

  // All layers; the result holds one entry per layer (last = final queries).
  std::vector<DecoderLayerOutput> decode(const QuerySet& queries, const VisualFeatureMap& visual,
                                         const TextFeatures& text, const QuerySelection& selection,
                                         const PredictionHeads& heads) const;

  int num_layers() const { return static_cast<int>(layers_.size()); }
  const DecoderLayer& layer(int i) const { return layers_.at(i); }
  bool temporal_enabled() const { return temporal_; }
  void set_temporal_enabled(bool on) { temporal_ = on; }

 private:
  std::vector<DecoderLayer> layers_;
  bool temporal_ = true;
};

}  // namespace stvg
