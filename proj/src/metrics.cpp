#include "stvg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace stvg {

double tIoU(const TemporalInterval& pred, const TemporalInterval& gt) {
  const int inter = std::min(pred.end(), gt.end()) - std::max(pred.start(), gt.start()) + 1;
  if (inter <= 0) return 0.0;
  const int uni = std::max(pred.end(), gt.end()) - std::min(pred.start(), gt.start()) + 1;
  return static_cast<double>(inter) / uni;
}

double vIoU(const SpatioTemporalTube& pred, const GroundingAnnotation& gt) {
  const TemporalInterval& a = pred.interval;
  const TemporalInterval& b = gt.interval;
  const int lo = std::max(a.start(), b.start()), hi = std::min(a.end(), b.end());
  if (hi < lo) return 0.0;
  const int uni = std::max(a.end(), b.end()) - std::min(a.start(), b.start()) + 1;
  double s = 0.0;
  for (int t = lo; t <= hi; ++t) s += box_iou(pred.box_at(t), gt.boxes.at(t));
  return s / uni;
}

bool pointing_game(const BoundingBox& pred, const BoundingBox& gt) {
  return pred.cx >= gt.x0() && pred.cx <= gt.x1() && pred.cy >= gt.y0() && pred.cy <= gt.y1();
}

EvalReport aggregate(const std::vector<SampleResult>& samples, const std::vector<double>& thresholds) {
  if (samples.empty()) throw std::invalid_argument("aggregate: empty sample set");
  EvalReport r;
  r.sample_count = static_cast<int>(samples.size());
  double st = 0.0, sv = 0.0;
  int hits = 0, pointed = 0;
  std::vector<int> above(thresholds.size(), 0);
  for (const auto& s : samples) {
    st += s.tiou;
    sv += s.viou;
    for (std::size_t k = 0; k < thresholds.size(); ++k)
      if (s.viou > thresholds[k]) ++above[k];
    if (s.pointing_hit) {
      ++pointed;
      if (*s.pointing_hit) ++hits;
    }
  }
  r.m_tIoU = st / r.sample_count;
  r.m_vIoU = sv / r.sample_count;
  for (std::size_t k = 0; k < thresholds.size(); ++k)
    r.vIoU_at[thresholds[k]] = static_cast<double>(above[k]) / r.sample_count;
  if (pointed > 0) r.pointing_accuracy = static_cast<double>(hits) / pointed;
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["samples"] = sample_count;
  j["m_tIoU"] = m_tIoU;
  j["m_vIoU"] = m_vIoU;
  for (const auto& [thr, frac] : vIoU_at) {
    char key[32];
    std::snprintf(key, sizeof key, "vIoU@%g", thr);
    j[key] = frac;
  }
  if (pointing_accuracy) j["pointing_accuracy"] = *pointing_accuracy;
  return j;
}

}  // namespace stvg
