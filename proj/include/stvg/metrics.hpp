#pragma once

// Evaluation metrics: temporal IoU, tube vIoU, vIoU@R and pointing game.

#include <map>
#include <optional>
#include <vector>

#include "json.hpp"

#include "stvg/core_types.hpp"

namespace stvg {

inline constexpr int kReportSchemaVersion = 1;

// Inclusive frame counts.
double tIoU(const TemporalInterval& pred, const TemporalInterval& gt);

// (1 / |union|) * sum over the frame intersection of per-frame box IoU.
double vIoU(const SpatioTemporalTube& pred, const GroundingAnnotation& gt);

// Hit iff the predicted center lies inside gt, boundaries included.
bool pointing_game(const BoundingBox& pred, const BoundingBox& gt);

struct SampleResult {
  double tiou = 0.0;
  double viou = 0.0;
  std::optional<bool> pointing_hit;
  SentenceKind kind = SentenceKind::Unknown;
};

struct EvalReport {
  double m_tIoU = 0.0;
  double m_vIoU = 0.0;
  std::map<double, double> vIoU_at;  // threshold -> fraction with vIoU > threshold
  std::optional<double> pointing_accuracy;
  int sample_count = 0;

  nlohmann::json to_json() const;
};

// Throws std::invalid_argument on an empty sample set.
EvalReport aggregate(const std::vector<SampleResult>& samples, const std::vector<double>& thresholds = {0.3, 0.5});

}  // namespace stvg
