#include "stvg/positional.hpp"

#include <cmath>
#include <numbers>

#include "stvg/errors.hpp"

namespace stvg {

std::vector<double> temporal_positional_encoding(int num_positions, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("temporal positional encoding needs an even dimension");
  std::vector<double> pe(static_cast<std::size_t>(num_positions) * dim);
  for (int t = 0; t < num_positions; ++t) {
    for (int i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, 2.0 * i / dim);
      pe[static_cast<std::size_t>(t) * dim + 2 * i] = std::sin(t / freq);
      pe[static_cast<std::size_t>(t) * dim + 2 * i + 1] = std::cos(t / freq);
    }
  }
  return pe;
}

void sine_scalar(double v, int dim, double* out) {
  const double x = v * 2.0 * std::numbers::pi;
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, 2.0 * i / dim);
    out[2 * i] = std::sin(x / freq);
    out[2 * i + 1] = std::cos(x / freq);
  }
}

std::vector<double> sine_position_2d(double x, double y, int dim) {
  if (dim % 4 != 0) throw ConfigError("2-D sine position code needs dim divisible by 4");
  std::vector<double> out(dim);
  sine_scalar(y, dim / 2, out.data());
  sine_scalar(x, dim / 2, out.data() + dim / 2);
  return out;
}

std::vector<double> box_sine_embedding(const double* box, int dim_per_coord) {
  if (dim_per_coord % 2 != 0) throw ConfigError("box sine embedding needs an even width per coordinate");
  std::vector<double> out(4 * static_cast<std::size_t>(dim_per_coord));
  for (int k = 0; k < 4; ++k) sine_scalar(box[k], dim_per_coord, out.data() + k * dim_per_coord);
  return out;
}

}  // namespace stvg
