#include "stvg/decoder.hpp"

namespace stvg {

DecoderLayer::DecoderLayer(nn::ParamStore& store, const std::string& name, const ModelConfig& cfg, nn::Rng& rng) {
  const auto temporal = nn::ParamGroup::DecoderTemporal;
  const auto spatial = nn::ParamGroup::DecoderSpatial;
  const int d = cfg.d_model, h = cfg.n_heads;
  temporal_norm = nn::LayerNorm(store, name + ".temporal_norm", temporal, d);
  temporal_attn = nn::MultiHeadAttention(store, name + ".temporal_attn", temporal, d, h, rng);
  spatial_norm = nn::LayerNorm(store, name + ".spatial_norm", spatial, d);
  spatial_attn = nn::MultiHeadAttention(store, name + ".spatial_attn", spatial, d, h, rng);
  visual_norm = nn::LayerNorm(store, name + ".visual_norm", spatial, d);
  visual_attn = nn::MultiHeadAttention(store, name + ".visual_attn", spatial, d, h, rng);
  text_norm = nn::LayerNorm(store, name + ".text_norm", spatial, d);
  text_attn = nn::MultiHeadAttention(store, name + ".text_attn", spatial, d, h, rng);
  ffn_norm = nn::LayerNorm(store, name + ".ffn_norm", spatial, d);
  ffn = nn::FeedForward(store, name + ".ffn", spatial, d, cfg.ffn_dim, rng);
}

ag::Var DecoderLayer::forward(const ag::Var& content, const ag::Var& positional, int num_frames, int num_query,
                              const VisualFeatureMap& visual, const TextFeatures& text, bool temporal_enabled) const {
  const int T = num_frames, Q = num_query;
  if (visual.num_frames != T || content->rows != T * Q)
    throw ConfigError("decoder: query frame count does not match visual features");
  if (content->cols != visual.features->cols || content->cols != text.features->cols)
    throw ConfigError("decoder: d_model mismatch between queries and features");
  const int S = visual.positions_per_frame();

  ag::Var x = content;
  if (temporal_enabled) {
    ag::Var h = temporal_norm(x);
    ag::Var qk = ag::add(h, positional);
    x = ag::add(x, temporal_attn(qk, qk, h, ag::strided_groups(T, Q)));
  }
  {
    ag::Var h = spatial_norm(x);
    ag::Var qk = ag::add(h, positional);
    x = ag::add(x, spatial_attn(qk, qk, h, ag::block_groups(T, Q)));
  }
  {
    ag::Var h = ag::add(visual_norm(x), positional);
    ag::AttentionLayout layout = ag::paired_blocks(T, Q, S);
    layout.key_ignore = visual.ignore_mask;
    x = ag::add(x, visual_attn(h, visual.features, visual.features, layout));
  }
  {
    ag::Var h = ag::add(text_norm(x), positional);
    ag::AttentionLayout layout = ag::single_group(T * Q, text.length());
    layout.key_ignore = text.pad_mask;
    x = ag::add(x, text_attn(h, text.features, text.features, layout));
  }
  return ag::add(x, ffn(ffn_norm(x)));
}

CrossModalDecoder::CrossModalDecoder(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng)
    : temporal_(cfg.decoder_temporal) {
  for (int n = 0; n < cfg.decoder_layers; ++n) layers_.emplace_back(store, "decoder." + std::to_string(n), cfg, rng);
}

DecoderLayerOutput CrossModalDecoder::decode_layer(int index, const ag::Var& content, const ag::Var& anchors,
                                                   int num_frames, int num_query, const VisualFeatureMap& visual,
                                                   const TextFeatures& text, const QuerySelection& selection,
                                                   const PredictionHeads& heads) const {
  DecoderLayerOutput out;
  out.anchors_in = anchors;
  const ag::Var pos = selection.anchor_to_positional(anchors, num_frames, num_query);
  out.content = layers_.at(index).forward(content, pos, num_frames, num_query, visual, text, temporal_);
  out.boxes = heads.refine_boxes(out.content, anchors);
  out.anchors_out = ag::clamp(ag::detach(out.boxes), 0.0, 1.0);
  return out;
}

std::vector<DecoderLayerOutput> CrossModalDecoder::decode(const QuerySet& queries, const VisualFeatureMap& visual,
                                                          const TextFeatures& text, const QuerySelection& selection,
                                                          const PredictionHeads& heads) const {
  std::vector<DecoderLayerOutput> outs;
  ag::Var content = queries.content;
  ag::Var anchors = queries.anchors;
  for (int n = 0; n < num_layers(); ++n) {
    outs.push_back(decode_layer(n, content, anchors, queries.num_frames, queries.num_query, visual, text, selection, heads));
    content = outs.back().content;
    anchors = outs.back().anchors_out;
  }
  return outs;
}

}  // namespace stvg
