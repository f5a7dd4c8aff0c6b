#pragma once

#include <vector>

namespace stvg {

// PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(t / 10000^(2i/d)).
// Row-major [num_positions, dim]. Throws ConfigError for odd dim.
std::vector<double> temporal_positional_encoding(int num_positions, int dim);

// 2-D sine code of a normalized point (x, y in [0, 1], scaled by 2*pi):
// dims [0, dim/2) encode y, [dim/2, dim) encode x. dim must be divisible by 4.
std::vector<double> sine_position_2d(double x, double y, int dim);

// Sine code of one normalized scalar over `dim` channels (dim even), using the
// same interleaved sin/cos layout and 2*pi scale as sine_position_2d.
void sine_scalar(double v, int dim, double* out);

// Concatenated sine codes of (cx, cy, w, h), dim_per_coord channels each.
// Coordinate k fills channels [k * dim_per_coord, (k + 1) * dim_per_coord).
std::vector<double> box_sine_embedding(const double* box, int dim_per_coord);

}  // namespace stvg
