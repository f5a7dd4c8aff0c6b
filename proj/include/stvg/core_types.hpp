#pragma once

// Data model shared by every module. Boxes are normalized center format
// (cx, cy, w, h) internally; top-left pixel boxes exist only at I/O
// boundaries. Frame indices are 0-based internally and 1-based on disk.

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stvg/errors.hpp"

namespace stvg {

class VideoClip {
 public:
  // frames holds T*H*W*3 values in [0,1], layout [t][y][x][c].
  VideoClip(int num_frames, int height, int width, std::vector<double> frames, double frame_rate = 0.0);

  int num_frames() const { return num_frames_; }
  int height() const { return height_; }
  int width() const { return width_; }
  static constexpr int channels() { return 3; }
  double frame_rate() const { return frame_rate_; }
  const std::vector<double>& data() const { return frames_; }

  double pixel(int t, int y, int x, int c) const {
    return frames_[((static_cast<std::size_t>(t) * height_ + y) * width_ + x) * 3 + c];
  }
  std::size_t frame_size() const { return static_cast<std::size_t>(height_) * width_ * 3; }
  const double* frame(int t) const { return frames_.data() + static_cast<std::size_t>(t) * frame_size(); }

 private:
  int num_frames_;
  int height_;
  int width_;
  std::vector<double> frames_;
  double frame_rate_;
};

struct TextPrompt {
  std::string raw_text;
  std::vector<int> tokens;

  int length() const { return static_cast<int>(tokens.size()); }
};

// Top-left pixel box, used only for file formats.
struct CornerBox {
  double x = 0, y = 0, w = 0, h = 0;
};

struct BoundingBox {
  double cx = 0.5, cy = 0.5, w = 1.0, h = 1.0;

  // Validates the invariants 0 <= cx,cy <= 1 and 0 < w,h <= 1.
  static BoundingBox make(double cx, double cy, double w, double h);

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  // Intersection with the unit square, back in center format. Idempotent.
  BoundingBox clipped() const;

  bool operator==(const BoundingBox&) const = default;
};

BoundingBox box_corner_to_center(const CornerBox& box, double image_width, double image_height);
CornerBox box_center_to_corner(const BoundingBox& box, double image_width, double image_height);

// Plain IoU of two center-format boxes.
double box_iou(const BoundingBox& a, const BoundingBox& b);

class TemporalInterval {
 public:
  TemporalInterval() = default;
  // Throws IntervalError when start < 0, end < start, or strict and start == end.
  TemporalInterval(int start, int end, bool strict = true);

  static TemporalInterval from_paper_indexing(int start_1based, int end_1based, bool strict = true);

  int start() const { return start_; }
  int end() const { return end_; }
  int num_frames() const { return end_ - start_ + 1; }
  bool contains(int t) const { return t >= start_ && t <= end_; }
  // Throws when end >= T.
  void check_within(int num_frames) const;

  bool operator==(const TemporalInterval&) const = default;

 private:
  int start_ = 0;
  int end_ = 1;
};

std::pair<int, int> interval_to_paper_indexing(const TemporalInterval& interval);

enum class SentenceKind { Declarative, Interrogative, Unknown };
std::string_view to_string(SentenceKind k);
SentenceKind sentence_kind_from_string(std::string_view s);

struct GroundingAnnotation {
  std::string video_id;
  std::string caption;
  TemporalInterval interval;
  std::map<int, BoundingBox> boxes;
  SentenceKind sentence_kind = SentenceKind::Unknown;
  // Pixel size of the source frames, used when writing top-left pixel boxes.
  int image_width = 0;
  int image_height = 0;
  // Total frames in the source video (0 when unknown).
  int num_frames = 0;

  // Box coverage: an entry for every frame in the interval and none outside.
  void validate() const;
};

struct SpatioTemporalTube {
  TemporalInterval interval;
  std::vector<BoundingBox> boxes;  // boxes[t - interval.start()]
  double score = 0.0;

  const BoundingBox& box_at(int t) const { return boxes.at(static_cast<std::size_t>(t - interval.start())); }
  void validate() const;
};

struct ModelConfig {
  int d_model = 32;
  int n_heads = 4;
  int encoder_layers = 2;  // M
  int decoder_layers = 2;  // N
  int num_query = 10;
  int n_levels = 3;
  int n_points = 2;
  int ffn_dim = 64;
  int text_layers = 2;
  int vision_channels = 24;
  int max_text_len = 16;
  int vocab_size = 64;
  double sigma = 1.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double lambda_conf = 3.0;
  int max_frames = 16;
  int resolution = 64;
  bool strict_interval = true;

  bool encoder_temporal = true;
  bool decoder_temporal = true;
  bool finetune_encoder_spatial = true;
  bool finetune_decoder_spatial = true;
  bool temporal_pe = true;

  int head_dim() const { return d_model / n_heads; }
  // Throws ConfigError on any violated invariant.
  void validate() const;
};

}  // namespace stvg
