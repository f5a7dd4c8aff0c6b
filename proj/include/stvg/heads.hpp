#pragma once

// Prediction heads: per-query box regression and confidence, per-frame
// start/end distributions, and the inference-time reductions to one tube.

#include <utility>
#include <vector>

#include "stvg/autograd.hpp"
#include "stvg/backbones.hpp"
#include "stvg/core_types.hpp"
#include "stvg/nn.hpp"

namespace stvg {

struct TemporalDistributions {
  std::vector<double> tau_s;
  std::vector<double> tau_e;
  int num_frames() const { return static_cast<int>(tau_s.size()); }
};

struct FramePredictions {
  int num_frames = 0;
  int num_query = 0;
  ag::Var boxes;   // [T * Q, 4] center format, in [0, 1]
  ag::Var scores;  // [T * Q, 1] in [0, 1]

  BoundingBox box(int t, int q) const;
  double score(int t, int q) const { return scores->value[static_cast<std::size_t>(t) * num_query + q]; }
};

class PredictionHeads {
 public:
  PredictionHeads() = default;
  PredictionHeads(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng);

  // sigmoid(inverse_sigmoid(anchor) + mlp(query)).
  ag::Var refine_boxes(const ag::Var& queries, const ag::Var& anchors) const;
  // Confidence of each query: sigmoid(max over unmasked tokens j of
  // <proj(query), text_j> / sqrt(d) + bias). [n, 1].
  ag::Var scores(const ag::Var& queries, const TextFeatures& text) const;
  FramePredictions box_head(const ag::Var& queries, const ag::Var& anchors, const TextFeatures& text, int num_frames,
                            int num_query) const;

  // [T, 2] logits from the per-frame mean of query features.
  ag::Var temporal_logits(const ag::Var& queries, int num_frames, int num_query) const;
  // [2, T]: row 0 = tau_s, row 1 = tau_e (softmax over frames).
  ag::Var temporal_head(const ag::Var& queries, int num_frames, int num_query) const;

  nn::Mlp box_mlp;
  nn::Linear score_proj;
  ag::Var score_bias;  // [1, 1]
  nn::Mlp temporal_mlp;
};

TemporalDistributions to_distributions(const ag::Var& temporal_probs);

// argmax over admissible (s, e) of tau_s[s] * tau_e[e]; admissible means s < e
// (strict) or s <= e. Ties go to the smallest s, then the smallest e.
// Throws NoValidIntervalError when no pair is admissible.
std::pair<TemporalInterval, double> extract_interval(const TemporalDistributions& dist, bool strict);

// Per frame inside the interval, the box of the highest-scoring query (ties
// go to the lower query index).
SpatioTemporalTube extract_tube(const FramePredictions& frames, const TemporalInterval& interval, double score);

// Highest-scoring query of frame t.
int best_query(const FramePredictions& frames, int t);

}  // namespace stvg
