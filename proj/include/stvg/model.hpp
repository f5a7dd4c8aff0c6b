#pragma once

// Full grounding model: frozen backbones, cross-modality encoder, query
// selection, decoder and prediction heads over one parameter store.

#include <cstdint>
#include <vector>

#include "stvg/backbones.hpp"
#include "stvg/decoder.hpp"
#include "stvg/encoder.hpp"
#include "stvg/heads.hpp"
#include "stvg/losses.hpp"
#include "stvg/nn.hpp"
#include "stvg/query_selection.hpp"

namespace stvg {

struct EncodedInputs {
  VisualFeatureMap visual;
  TextFeatures text;
};

struct ModelOutput {
  int num_frames = 0;
  int num_query = 0;
  QuerySet queries;
  std::vector<LayerPrediction> layers;  // one per decoder layer, last = final
  const LayerPrediction& final_layer() const { return layers.back(); }
  ProposalPrediction proposals() const { return {queries.relevance, queries.reference_points}; }
};

class GroundingModel {
 public:
  // Parameters are initialized from `seed` in a fixed registration order.
  GroundingModel(const ModelConfig& config, std::uint64_t seed);
  GroundingModel(const GroundingModel&) = delete;
  GroundingModel& operator=(const GroundingModel&) = delete;

  const ModelConfig& config() const { return config_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }

  // Backbone features. Run without gradient recording when both backbones
  // are frozen so callers may cache the result.
  EncodedInputs encode_inputs(const VideoClip& video, const TextPrompt& prompt, bool record_backbone_grad = false) const;
  ModelOutput forward(const EncodedInputs& inputs) const;
  ModelOutput forward(const VideoClip& video, const TextPrompt& prompt) const;

  // Best interval from the final layer's distributions and the per-frame
  // highest-confidence boxes inside it.
  SpatioTemporalTube predict_tube(const ModelOutput& out) const;

  // Re-applies the temporal toggles of `cfg` to the built modules.
  void apply_toggles(const ModelConfig& cfg);

  VisionBackbone vision;
  TextEncoder text;
  CrossModalEncoder encoder;
  QuerySelection selection;
  CrossModalDecoder decoder;
  PredictionHeads heads;

 private:
  ModelConfig config_;
  nn::ParamStore store_;
};

}  // namespace stvg
