#pragma once

// Training objective. Spatial terms (L1 + GIoU) are taken on the matched
// query of every frame inside the ground-truth interval; temporal terms are
// KL(target || predicted) against Gaussian start/end heatmaps. A confidence
// BCE term teaches the per-query scores to rank the matched query first, and
// a proposal BCE term teaches query selection where the target is.

#include <utility>
#include <vector>

#include "stvg/autograd.hpp"
#include "stvg/core_types.hpp"
#include "stvg/heads.hpp"

namespace stvg {

inline constexpr double kLogFloor = 1e-12;

struct GaussianHeatmaps {
  std::vector<double> pi_s;
  std::vector<double> pi_e;
};

// pi[t] proportional to exp(-(t - t0)^2 / (2 sigma^2)), normalized over [0, T).
// Throws ConfigError for sigma <= 0 and IntervalError when the interval
// does not fit in T frames.
GaussianHeatmaps make_heatmaps(const TemporalInterval& interval, int num_frames, double sigma);

// Mean absolute coordinate difference. Throws IntervalError on empty input.
double l1_loss(const std::vector<BoundingBox>& pred, const std::vector<BoundingBox>& gt);

double giou(const BoundingBox& a, const BoundingBox& b);
// Mean of 1 - GIoU. Throws InvalidBoxError for a zero-area ground-truth box
// and IntervalError on empty input.
double giou_loss(const std::vector<BoundingBox>& pred, const std::vector<BoundingBox>& gt);

// sum_t target[t] * log(target[t] / pred[t]) with pred floored at kLogFloor.
double kl_divergence(const std::vector<double>& target, const std::vector<double>& pred);
std::pair<double, double> temporal_kl_loss(const TemporalDistributions& pred, const GaussianHeatmaps& target);

// Differentiable counterparts. pred is [n, 4] center format.
ag::Var l1_loss(const ag::Var& pred, const std::vector<BoundingBox>& gt);
ag::Var giou_loss(const ag::Var& pred, const std::vector<BoundingBox>& gt);
// probs is [1, T].
ag::Var kl_divergence(const std::vector<double>& target, const ag::Var& probs);

// Outputs of one decoder layer after the heads.
struct LayerPrediction {
  FramePredictions frames;
  ag::Var temporal;  // [2, T]: tau_s, tau_e
};

// lambda_l1 * L1 + lambda_giou * (1 - GIoU) of one prediction.
double matching_cost(const BoundingBox& pred, const BoundingBox& gt, const ModelConfig& config);
// Query of frame t with the lowest matching cost (ties go to the lower index).
int matched_query(const FramePredictions& frames, int t, const BoundingBox& gt, const ModelConfig& config);

// Relevance of every visual position from query selection. Positions whose
// reference point lies inside the ground-truth box are positives.
struct ProposalPrediction {
  ag::Var relevance;                                        // [T * S, 1]
  std::vector<std::pair<double, double>> reference_points;  // [S]
};

// Mean BCE of sigmoid(relevance / sqrt(d_model)) against the inside-box targets.
ag::Var proposal_loss(const ProposalPrediction& proposals, const GroundingAnnotation& annotation, int d_model);

struct LayerLoss {
  double l1 = 0, giou = 0, kl_start = 0, kl_end = 0, conf = 0, total = 0;
};

struct LossReport {
  // Components of the final layer.
  double l1 = 0, giou = 0, kl_start = 0, kl_end = 0, conf = 0;
  double proposal = 0;
  // Sum of every layer's weighted total (final layer plus auxiliaries) and
  // the weighted proposal term.
  double total = 0;
  std::vector<LayerLoss> layers;
  ag::Var total_var;  // differentiable total
};

// annotation frames must already be in the prediction's frame index space.
LossReport total_loss(const std::vector<LayerPrediction>& layers, const GroundingAnnotation& annotation,
                      const ModelConfig& config, const ProposalPrediction* proposals = nullptr);

}  // namespace stvg
