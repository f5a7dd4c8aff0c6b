#include "stvg/model.hpp"

namespace stvg {

GroundingModel::GroundingModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  nn::Rng rng(seed);
  vision = VisionBackbone(store_, config_, rng);
  text = TextEncoder(store_, config_, rng);
  encoder = CrossModalEncoder(store_, config_, rng);
  selection = QuerySelection(store_, config_, rng);
  decoder = CrossModalDecoder(store_, config_, rng);
  heads = PredictionHeads(store_, config_, rng);
  apply_toggles(config_);
}

void GroundingModel::apply_toggles(const ModelConfig& cfg) {
  config_.encoder_temporal = cfg.encoder_temporal;
  config_.decoder_temporal = cfg.decoder_temporal;
  config_.temporal_pe = cfg.temporal_pe;
  config_.strict_interval = cfg.strict_interval;
  encoder.set_temporal_enabled(cfg.encoder_temporal);
  decoder.set_temporal_enabled(cfg.decoder_temporal);
  selection.set_temporal_pe(cfg.temporal_pe);
}

EncodedInputs GroundingModel::encode_inputs(const VideoClip& video, const TextPrompt& prompt,
                                            bool record_backbone_grad) const {
  if (!record_backbone_grad) {
    ag::NoGradGuard guard;
    return {vision.encode(video), text.encode(prompt)};
  }
  return {vision.encode(video), text.encode(prompt)};
}

ModelOutput GroundingModel::forward(const EncodedInputs& inputs) const {
  auto [visual, txt] = encoder.encode(inputs.visual, inputs.text);
  ModelOutput out;
  out.queries = selection.select(visual, txt);
  out.num_frames = out.queries.num_frames;
  out.num_query = out.queries.num_query;
  const auto layers = decoder.decode(out.queries, visual, txt, selection, heads);
  for (const auto& l : layers) {
    LayerPrediction p;
    p.frames.num_frames = out.num_frames;
    p.frames.num_query = out.num_query;
    p.frames.boxes = l.boxes;
    p.frames.scores = heads.scores(l.content, txt);
    p.temporal = heads.temporal_head(l.content, out.num_frames, out.num_query);
    out.layers.push_back(std::move(p));
  }
  return out;
}

ModelOutput GroundingModel::forward(const VideoClip& video, const TextPrompt& prompt) const {
  return forward(encode_inputs(video, prompt));
}

SpatioTemporalTube GroundingModel::predict_tube(const ModelOutput& out) const {
  const LayerPrediction& last = out.final_layer();
  const auto [interval, score] = extract_interval(to_distributions(last.temporal), config_.strict_interval);
  return extract_tube(last.frames, interval, score);
}

}  // namespace stvg
