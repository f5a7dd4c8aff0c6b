#pragma once

// Multi-scale deformable attention over per-frame feature pyramids.
//
// Sampling locations are normalized (x, y) in [0, 1]; bilinear sampling uses
// the half-pixel convention (pixel centers at (i + 0.5) / size) and reads zero
// outside the map.

#include <utility>
#include <vector>

#include "stvg/autograd.hpp"
#include "stvg/backbones.hpp"
#include "stvg/nn.hpp"

namespace stvg {

struct DeformableLayout {
  std::vector<std::pair<int, int>> level_shapes;  // (h, w)
  std::vector<int> level_start_index;
  int num_frames = 1;
  int heads = 1;
  int points = 1;

  int levels() const { return static_cast<int>(level_shapes.size()); }
  int positions_per_frame() const;
};

// value: [T * S, d]. sampling_locations: [T * Sq, heads * levels * points * 2]
// laid out (head, level, point, xy). attention_weights: [T * Sq, heads *
// levels * points]. Query rows of frame t sample only frame t's values.
// Returns [T * Sq, d].
ag::Var ms_deform_attn(const ag::Var& value, const ag::Var& sampling_locations, const ag::Var& attention_weights,
                       const DeformableLayout& layout);

// Bilinear read of channel range [c0, c0 + n) of a single level map
// ([h * w, d] rows starting at `base`), zero outside. Exposed for tests.
void bilinear_sample(const double* value, int d, int h, int w, double x, double y, int c0, int n, double* out);

class DeformableAttention {
 public:
  DeformableAttention() = default;
  DeformableAttention(nn::ParamStore& store, const std::string& name, nn::ParamGroup group, int d_model, int heads,
                      int levels, int points, nn::Rng& rng);

  // query and value are [T * S, d] over the same pyramid. ignore_mask (true =
  // ignore) zeroes masked value rows before sampling.
  ag::Var operator()(const ag::Var& query, const ag::Var& value, const VisualFeatureMap& map) const;

  // Sampling locations the module would use (before the core op), for tests.
  ag::Var sampling_locations(const ag::Var& query, const VisualFeatureMap& map) const;
  ag::Var attention_weights(const ag::Var& query) const;

  nn::Linear value_proj, offset_proj, weight_proj, out_proj;
  int heads = 1, levels = 1, points = 1;
};

}  // namespace stvg
