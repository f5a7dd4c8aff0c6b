#include "stvg/core_types.hpp"

#include <algorithm>
#include <cmath>

namespace stvg {

VideoClip::VideoClip(int num_frames, int height, int width, std::vector<double> frames, double frame_rate)
    : num_frames_(num_frames), height_(height), width_(width), frames_(std::move(frames)), frame_rate_(frame_rate) {
  if (num_frames < 1) throw ConfigError("VideoClip: need at least one frame");
  if (height < 8 || width < 8) throw ConfigError("VideoClip: frames must be at least 8x8");
  if (frames_.size() != static_cast<std::size_t>(num_frames) * height * width * 3)
    throw ConfigError("VideoClip: pixel buffer size does not match T x H x W x 3");
}

BoundingBox BoundingBox::make(double cx, double cy, double w, double h) {
  if (!(w > 0.0) || !(h > 0.0) || w > 1.0 + 1e-12 || h > 1.0 + 1e-12)
    throw InvalidBoxError("box width/height must lie in (0, 1]");
  if (cx < -1e-12 || cx > 1.0 + 1e-12 || cy < -1e-12 || cy > 1.0 + 1e-12)
    throw InvalidBoxError("box center must lie in [0, 1]");
  return BoundingBox{std::clamp(cx, 0.0, 1.0), std::clamp(cy, 0.0, 1.0), std::min(w, 1.0), std::min(h, 1.0)};
}

BoundingBox BoundingBox::clipped() const {
  // Rounding slack keeps clip exactly idempotent: a clipped box re-derives its
  // edges within a few ulps of the unit square and is returned unchanged.
  constexpr double kSlack = 1e-12;
  if (x0() >= -kSlack && x1() <= 1.0 + kSlack && y0() >= -kSlack && y1() <= 1.0 + kSlack) return *this;
  const double a0 = std::clamp(x0(), 0.0, 1.0), a1 = std::clamp(x1(), 0.0, 1.0);
  const double b0 = std::clamp(y0(), 0.0, 1.0), b1 = std::clamp(y1(), 0.0, 1.0);
  if (!(a1 > a0) || !(b1 > b0)) throw InvalidBoxError("box does not intersect the image");
  return BoundingBox{0.5 * (a0 + a1), 0.5 * (b0 + b1), a1 - a0, b1 - b0};
}

BoundingBox box_corner_to_center(const CornerBox& box, double image_width, double image_height) {
  if (!(box.w > 0.0) || !(box.h > 0.0)) throw InvalidBoxError("box width and height must be positive");
  if (!(image_width > 0.0) || !(image_height > 0.0)) throw InvalidBoxError("image size must be positive");
  const double x0 = std::max(box.x, 0.0), x1 = std::min(box.x + box.w, image_width);
  const double y0 = std::max(box.y, 0.0), y1 = std::min(box.y + box.h, image_height);
  if (!(x1 > x0) || !(y1 > y0)) throw InvalidBoxError("box does not intersect the image");
  return BoundingBox{(x0 + x1) / (2.0 * image_width), (y0 + y1) / (2.0 * image_height), (x1 - x0) / image_width,
                     (y1 - y0) / image_height};
}

CornerBox box_center_to_corner(const BoundingBox& box, double image_width, double image_height) {
  return CornerBox{(box.cx - 0.5 * box.w) * image_width, (box.cy - 0.5 * box.h) * image_height,
                   box.w * image_width, box.h * image_height};
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  const double area_a = (a.x1() - a.x0()) * (a.y1() - a.y0()), area_b = (b.x1() - b.x0()) * (b.y1() - b.y0());
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

TemporalInterval::TemporalInterval(int start, int end, bool strict) : start_(start), end_(end) {
  if (start < 0) throw IntervalError("interval start must be >= 0");
  if (end < start) throw IntervalError("interval end precedes start");
  if (strict && end == start) throw IntervalError("strict interval requires start < end");
}

TemporalInterval TemporalInterval::from_paper_indexing(int start_1based, int end_1based, bool strict) {
  return TemporalInterval(start_1based - 1, end_1based - 1, strict);
}

void TemporalInterval::check_within(int num_frames) const {
  if (end_ >= num_frames)
    throw IntervalError("interval end " + std::to_string(end_) + " beyond video length " + std::to_string(num_frames));
}

std::pair<int, int> interval_to_paper_indexing(const TemporalInterval& interval) {
  return {interval.start() + 1, interval.end() + 1};
}

std::string_view to_string(SentenceKind k) {
  switch (k) {
    case SentenceKind::Declarative: return "declarative";
    case SentenceKind::Interrogative: return "interrogative";
    case SentenceKind::Unknown: return "unknown";
  }
  return "unknown";
}

SentenceKind sentence_kind_from_string(std::string_view s) {
  if (s == "declarative") return SentenceKind::Declarative;
  if (s == "interrogative") return SentenceKind::Interrogative;
  if (s == "unknown" || s.empty()) return SentenceKind::Unknown;
  throw DataError("unknown sentence kind: " + std::string(s));
}

void GroundingAnnotation::validate() const {
  if (num_frames > 0) interval.check_within(num_frames);
  if (boxes.size() != static_cast<std::size_t>(interval.num_frames()))
    throw DataError("annotation " + video_id + ": box count does not match interval length");
  for (const auto& [t, b] : boxes) {
    if (!interval.contains(t)) throw DataError("annotation " + video_id + ": box outside interval at frame " + std::to_string(t));
    BoundingBox::make(b.cx, b.cy, b.w, b.h);
  }
}

void SpatioTemporalTube::validate() const {
  if (boxes.size() != static_cast<std::size_t>(interval.num_frames()))
    throw DataError("tube box count does not match interval length");
  if (score < 0.0 || score > 1.0) throw DataError("tube score outside [0, 1]");
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("model config: ") + what);
  };
  need(d_model >= 1 && n_heads >= 1 && encoder_layers >= 0 && decoder_layers >= 1, "counts must be >= 1");
  need(num_query >= 1 && n_levels >= 1 && n_points >= 1 && ffn_dim >= 1, "counts must be >= 1");
  need(text_layers >= 0 && vision_channels >= 1 && max_text_len >= 1 && vocab_size >= 2, "counts must be >= 1");
  need(max_frames >= 1 && resolution >= 8, "max_frames/resolution out of range");
  need(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  need(d_model % 4 == 0, "d_model must be divisible by 4 (box sine embedding)");
  need(sigma > 0.0, "sigma must be positive");
  need(lambda_l1 >= 0.0 && lambda_giou >= 0.0 && lambda_conf >= 0.0, "loss weights must be >= 0");
}

}  // namespace stvg
