#include "stvg/encoder.hpp"

#include <cmath>
#include <limits>

#include "stvg/kernels.hpp"

namespace stvg {

EncoderLayer::EncoderLayer(nn::ParamStore& store, const std::string& name, const ModelConfig& cfg, nn::Rng& rng)
    : heads(cfg.n_heads) {
  const auto temporal = nn::ParamGroup::EncoderTemporal;
  const auto spatial = nn::ParamGroup::EncoderSpatial;
  const int d = cfg.d_model;
  temporal_norm = nn::LayerNorm(store, name + ".temporal_norm", temporal, d);
  temporal_attn = nn::MultiHeadAttention(store, name + ".temporal_attn", temporal, d, cfg.n_heads, rng);
  spatial_norm = nn::LayerNorm(store, name + ".spatial_norm", spatial, d);
  spatial_attn = DeformableAttention(store, name + ".spatial_attn", spatial, d, cfg.n_heads, cfg.n_levels, cfg.n_points, rng);
  text_norm = nn::LayerNorm(store, name + ".text_norm", spatial, d);
  text_attn = nn::MultiHeadAttention(store, name + ".text_attn", spatial, d, cfg.n_heads, rng);
  fuse_norm_v = nn::LayerNorm(store, name + ".fuse_norm_v", spatial, d);
  fuse_norm_p = nn::LayerNorm(store, name + ".fuse_norm_p", spatial, d);
  proj_q_v = nn::Linear(store, name + ".proj_q_v", spatial, d, d, rng);
  proj_q_p = nn::Linear(store, name + ".proj_q_p", spatial, d, d, rng);
  proj_v = nn::Linear(store, name + ".proj_v", spatial, d, d, rng);
  proj_p = nn::Linear(store, name + ".proj_p", spatial, d, d, rng);
  ffn_norm_v = nn::LayerNorm(store, name + ".ffn_norm_v", spatial, d);
  ffn_norm_p = nn::LayerNorm(store, name + ".ffn_norm_p", spatial, d);
  ffn_v = nn::FeedForward(store, name + ".ffn_v", spatial, d, cfg.ffn_dim, rng);
  ffn_p = nn::FeedForward(store, name + ".ffn_p", spatial, d, cfg.ffn_dim, rng);
}

ag::Var EncoderLayer::temporal_then_spatial(const VisualFeatureMap& visual, bool temporal_enabled) const {
  visual.validate();
  ag::Var x = visual.features;
  const int S = visual.positions_per_frame();
  if (temporal_enabled) {
    ag::AttentionLayout layout = ag::strided_groups(visual.num_frames, S);
    layout.key_ignore = visual.ignore_mask;
    ag::Var h = temporal_norm(x);
    x = ag::add(x, temporal_attn(h, h, h, layout));
  }
  ag::Var h = spatial_norm(x);
  return ag::add(x, spatial_attn(h, h, visual));
}

ag::Var EncoderLayer::text_self_attention(const TextFeatures& text) const {
  ag::AttentionLayout layout = ag::single_group(text.length(), text.length());
  layout.key_ignore = text.pad_mask;
  ag::Var h = text_norm(text.features);
  return ag::add(text.features, text_attn(h, h, h, layout));
}

JointScores EncoderLayer::joint_attention(const ag::Var& visual_mid, const TextFeatures& text_mid) const {
  ag::NoGradGuard guard;
  const ag::Var qv = proj_q_v(visual_mid);
  const ag::Var qp = proj_q_p(text_mid.features);
  const int d = qv->cols, dk = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  JointScores js;
  js.rows = qv->rows;
  js.cols = qp->rows;
  js.per_head.assign(heads, std::vector<double>(static_cast<std::size_t>(js.rows) * js.cols));
  const auto& K = kernels::active();
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < js.rows; ++i)
      for (int j = 0; j < js.cols; ++j)
        js.per_head[h][static_cast<std::size_t>(i) * js.cols + j] =
            text_mid.pad_mask[j] ? -std::numeric_limits<double>::infinity()
                                 : K.dot(qv->row(i) + h * dk, qp->row(j) + h * dk, dk) * inv;
  return js;
}

std::pair<ag::Var, ag::Var> EncoderLayer::fusion_messages(const ag::Var& visual_mid, const VisualFeatureMap& layout,
                                                          const ag::Var& text_mid, const TextFeatures& text,
                                                          ag::AttentionProbs* v2t, ag::AttentionProbs* t2v) const {
  const ag::Var hv = fuse_norm_v(visual_mid);
  const ag::Var hp = fuse_norm_p(text_mid);
  const ag::Var qv = proj_q_v(hv);
  const ag::Var qp = proj_q_p(hp);
  const int nv = visual_mid->rows, L = text_mid->rows;

  ag::AttentionLayout to_visual = ag::single_group(nv, L);
  to_visual.key_ignore = text.pad_mask;
  ag::AttentionLayout to_text = ag::single_group(L, nv);
  to_text.key_ignore = layout.ignore_mask;

  ag::Var msg_v = ag::attention(qv, qp, proj_p(hp), heads, to_visual, v2t);
  ag::Var msg_p = ag::attention(qp, qv, proj_v(hv), heads, to_text, t2v);
  return {msg_v, msg_p};
}

std::pair<ag::Var, ag::Var> EncoderLayer::bidirectional_fusion(const ag::Var& visual_mid, const VisualFeatureMap& layout,
                                                               const ag::Var& text_mid, const TextFeatures& text) const {
  auto [msg_v, msg_p] = fusion_messages(visual_mid, layout, text_mid, text);
  ag::Var xv = ag::add(visual_mid, msg_v);
  ag::Var xp = ag::add(text_mid, msg_p);
  xv = ag::add(xv, ffn_v(ffn_norm_v(xv)));
  xp = ag::add(xp, ffn_p(ffn_norm_p(xp)));
  return {xv, xp};
}

std::pair<VisualFeatureMap, TextFeatures> EncoderLayer::forward(const VisualFeatureMap& visual, const TextFeatures& text,
                                                                bool temporal_enabled) const {
  ag::Var v_mid = temporal_then_spatial(visual, temporal_enabled);
  ag::Var p_mid = text_self_attention(text);
  auto [v_out, p_out] = bidirectional_fusion(v_mid, visual, p_mid, text);
  VisualFeatureMap vm = visual;
  vm.features = v_out;
  TextFeatures tf = text;
  tf.features = p_out;
  return {vm, tf};
}

CrossModalEncoder::CrossModalEncoder(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng)
    : temporal_(cfg.encoder_temporal) {
  for (int m = 0; m < cfg.encoder_layers; ++m) layers_.emplace_back(store, "encoder." + std::to_string(m), cfg, rng);
}

std::pair<VisualFeatureMap, TextFeatures> CrossModalEncoder::encode(const VisualFeatureMap& visual,
                                                                    const TextFeatures& text) const {
  std::pair<VisualFeatureMap, TextFeatures> state{visual, text};
  for (const auto& layer : layers_) state = layer.forward(state.first, state.second, temporal_);
  return state;
}

}  // namespace stvg
