#pragma once

// Language-guided query selection: per frame, keep the num_query visual
// positions most similar to the prompt, derive dynamic anchor boxes from
// them, and pair those anchors with a learnable content table shared across
// frames.

#include <vector>

#include "stvg/backbones.hpp"
#include "stvg/core_types.hpp"
#include "stvg/nn.hpp"
#include "stvg/positional.hpp"

namespace stvg {

struct QuerySet {
  int num_frames = 0;
  int num_query = 0;
  ag::Var content;                    // [T * Q, d]
  ag::Var anchors;                    // [T * Q, 4], normalized (cx, cy, w, h)
  ag::Var positional;                 // [T * Q, d]
  std::vector<int> selected_indices;  // [T * Q], within-frame positions
  ag::Var relevance;                  // [T * S, 1], differentiable relevance_scores
  std::vector<std::pair<double, double>> reference_points;  // [S]
};

// relevance[t * S + i] = max over unmasked tokens j of <F_v[t, i], F_p[j]>.
std::vector<double> relevance_scores(const VisualFeatureMap& visual, const TextFeatures& text);

// Indices of the k largest scores in [first, first + n); ties favour the lower
// index. Result is sorted by descending score.
std::vector<int> top_k(const double* scores, int n, int k);

// Anchor prior for a position: its grid center with a level-dependent size.
BoundingBox proposal_box(const VisualFeatureMap& visual, int position);

class QuerySelection {
 public:
  QuerySelection() = default;
  QuerySelection(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng);

  // Throws ConfigError when num_query exceeds the positions per frame.
  QuerySet select(const VisualFeatureMap& visual, const TextFeatures& text) const;

  // Sine code of each anchor, projected to d_model, plus the temporal code of
  // its frame (when enabled). anchors is [T * Q, 4].
  ag::Var anchor_to_positional(const ag::Var& anchors, int num_frames, int num_query) const;

  bool temporal_pe_enabled() const { return temporal_pe_; }
  void set_temporal_pe(bool on) { temporal_pe_ = on; }

  nn::Linear enc_output;
  nn::LayerNorm enc_norm;
  nn::Mlp anchor_head;
  ag::Var content;  // [Q, d]
  nn::Mlp ref_point_head;

 private:
  int d_model_ = 0;
  int num_query_ = 0;
  bool temporal_pe_ = true;
};

}  // namespace stvg
