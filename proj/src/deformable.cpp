#include "stvg/deformable.hpp"

#include <cmath>
#include <numbers>

#include "stvg/errors.hpp"
#include "stvg/kernels.hpp"

namespace stvg {

int DeformableLayout::positions_per_frame() const {
  int s = 0;
  for (const auto& [h, w] : level_shapes) s += h * w;
  return s;
}

namespace {

struct Corner {
  int row;  // -1 when outside the map
  double weight;
};

// The four bilinear taps of a normalized location plus the partial
// derivatives of the interpolation weights w.r.t. the pixel-space coordinates.
struct Taps {
  Corner c[4];
  double dw_dx[4];
  double dw_dy[4];
  bool inside = false;
};

Taps bilinear_taps(int h, int w, double x, double y) {
  Taps t{};
  const double him = y * h - 0.5;
  const double wim = x * w - 0.5;
  if (!(him > -1.0 && wim > -1.0 && him < h && wim < w)) return t;
  t.inside = true;
  const int hl = static_cast<int>(std::floor(him));
  const int wl = static_cast<int>(std::floor(wim));
  const double lh = him - hl, lw = wim - wl, hh = 1.0 - lh, hw = 1.0 - lw;
  const int ys[4] = {hl, hl, hl + 1, hl + 1};
  const int xs[4] = {wl, wl + 1, wl, wl + 1};
  const double ws[4] = {hh * hw, hh * lw, lh * hw, lh * lw};
  const double dx[4] = {-hh, hh, -lh, lh};
  const double dy[4] = {-hw, -lw, hw, lw};
  for (int k = 0; k < 4; ++k) {
    const bool ok = ys[k] >= 0 && ys[k] < h && xs[k] >= 0 && xs[k] < w;
    t.c[k] = Corner{ok ? ys[k] * w + xs[k] : -1, ws[k]};
    t.dw_dx[k] = dx[k];
    t.dw_dy[k] = dy[k];
  }
  return t;
}

}  // namespace

void bilinear_sample(const double* value, int d, int h, int w, double x, double y, int c0, int n, double* out) {
  for (int j = 0; j < n; ++j) out[j] = 0.0;
  const Taps t = bilinear_taps(h, w, x, y);
  if (!t.inside) return;
  for (const auto& c : t.c) {
    if (c.row < 0) continue;
    const double* src = value + static_cast<std::size_t>(c.row) * d + c0;
    for (int j = 0; j < n; ++j) out[j] += c.weight * src[j];
  }
}

ag::Var ms_deform_attn(const ag::Var& value, const ag::Var& sampling_locations, const ag::Var& attention_weights,
                       const DeformableLayout& layout) {
  const int L = layout.levels(), H = layout.heads, P = layout.points, T = layout.num_frames;
  const int S = layout.positions_per_frame();
  const int d = value->cols;
  if (d % H != 0) throw ConfigError("deformable attention: d_model not divisible by heads");
  if (value->rows != T * S) throw ConfigError("deformable attention: value rows != T * S");
  if (sampling_locations->cols != H * L * P * 2 || attention_weights->cols != H * L * P)
    throw ConfigError("deformable attention: n_heads/n_levels/n_points inconsistent with projections");
  if (sampling_locations->rows != attention_weights->rows || sampling_locations->rows % T != 0)
    throw ConfigError("deformable attention: query rows inconsistent");
  const int nq = sampling_locations->rows;
  const int sq = nq / T;
  const int dh = d / H;

  auto out = ag::constant(nq, d, std::vector<double>(static_cast<std::size_t>(nq) * d, 0.0));
  const bool track = ag::grad_enabled() &&
                     (value->requires_grad || sampling_locations->requires_grad || attention_weights->requires_grad);

  const auto& K = kernels::active();
  for (int q = 0; q < nq; ++q) {
    const int t = q / sq;
    const double* loc = sampling_locations->row(q);
    const double* aw = attention_weights->row(q);
    double* o = out->row(q);
    for (int h = 0; h < H; ++h) {
      for (int l = 0; l < L; ++l) {
        const auto [lh, lw] = layout.level_shapes[l];
        const std::size_t base = static_cast<std::size_t>(t) * S + layout.level_start_index[l];
        for (int p = 0; p < P; ++p) {
          const int idx = (h * L + l) * P + p;
          const Taps tp = bilinear_taps(lh, lw, loc[2 * idx], loc[2 * idx + 1]);
          if (!tp.inside) continue;
          for (const auto& c : tp.c) {
            if (c.row < 0) continue;
            K.axpy(aw[idx] * c.weight, value->row(static_cast<int>(base + c.row)) + h * dh, o + h * dh, dh);
          }
        }
      }
    }
  }

  if (track) {
    out->requires_grad = true;
    out->parents = {value, sampling_locations, attention_weights};
    out->backward_fn = [layout, T, S, sq, d, dh](ag::Node& self) {
      const auto& Kt = kernels::active();
      const int L = layout.levels(), H = layout.heads, P = layout.points;
      ag::Node& V = *self.parents[0];
      ag::Node& Loc = *self.parents[1];
      ag::Node& Aw = *self.parents[2];
      double* gv = nullptr;
      double* gl = nullptr;
      double* ga = nullptr;
      if (V.requires_grad) { V.ensure_grad(); gv = V.grad.data(); }
      if (Loc.requires_grad) { Loc.ensure_grad(); gl = Loc.grad.data(); }
      if (Aw.requires_grad) { Aw.ensure_grad(); ga = Aw.grad.data(); }
      const int nq = self.rows;
      for (int q = 0; q < nq; ++q) {
        const int t = q / sq;
        const double* loc = Loc.row(q);
        const double* aw = Aw.row(q);
        const double* go = self.grad.data() + static_cast<std::size_t>(q) * d;
        for (int h = 0; h < H; ++h) {
          for (int l = 0; l < L; ++l) {
            const auto [lh, lw] = layout.level_shapes[l];
            const std::size_t base = static_cast<std::size_t>(t) * S + layout.level_start_index[l];
            for (int p = 0; p < P; ++p) {
              const int idx = (h * L + l) * P + p;
              const Taps tp = bilinear_taps(lh, lw, loc[2 * idx], loc[2 * idx + 1]);
              if (!tp.inside) continue;
              double sampled_dot = 0.0, dx = 0.0, dy = 0.0;
              for (int k = 0; k < 4; ++k) {
                const auto& c = tp.c[k];
                if (c.row < 0) continue;
                const std::size_t vrow = (base + c.row) * d + h * dh;
                const double g = Kt.dot(go + h * dh, V.value.data() + vrow, dh);
                sampled_dot += c.weight * g;
                dx += tp.dw_dx[k] * g;
                dy += tp.dw_dy[k] * g;
                if (gv) Kt.axpy(aw[idx] * c.weight, go + h * dh, gv + vrow, dh);
              }
              if (ga) ga[static_cast<std::size_t>(q) * H * L * P + idx] += sampled_dot;
              if (gl) {
                gl[static_cast<std::size_t>(q) * H * L * P * 2 + 2 * idx] += aw[idx] * dx * lw;
                gl[static_cast<std::size_t>(q) * H * L * P * 2 + 2 * idx + 1] += aw[idx] * dy * lh;
              }
            }
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------

DeformableAttention::DeformableAttention(nn::ParamStore& store, const std::string& name, nn::ParamGroup group,
                                         int d_model, int n_heads, int n_levels, int n_points, nn::Rng& rng)
    : value_proj(store, name + ".value", group, d_model, d_model, rng),
      offset_proj(store, name + ".offset", group, d_model, n_heads * n_levels * n_points * 2, rng),
      weight_proj(store, name + ".weight", group, d_model, n_heads * n_levels * n_points, rng),
      out_proj(store, name + ".out", group, d_model, d_model, rng),
      heads(n_heads),
      levels(n_levels),
      points(n_points) {
  // Offsets start as a small fan of directions per head (radius grows with
  // point index); attention weights start uniform.
  offset_proj.zero_init();
  weight_proj.zero_init();
  auto& bias = offset_proj.bias->value;
  for (int h = 0; h < heads; ++h) {
    const double theta = 2.0 * std::numbers::pi * h / heads;
    double gx = std::cos(theta), gy = std::sin(theta);
    const double m = std::max(std::abs(gx), std::abs(gy));
    gx /= m;
    gy /= m;
    for (int l = 0; l < levels; ++l)
      for (int p = 0; p < points; ++p) {
        const int idx = (h * levels + l) * points + p;
        bias[2 * idx] = gx * (p + 1) * 0.5;
        bias[2 * idx + 1] = gy * (p + 1) * 0.5;
      }
  }
}

ag::Var DeformableAttention::sampling_locations(const ag::Var& query, const VisualFeatureMap& map) const {
  const int nq = query->rows;
  const int S = map.positions_per_frame();
  const int width = heads * levels * points * 2;
  if (static_cast<int>(map.level_shapes.size()) != levels)
    throw ConfigError("deformable attention: n_levels inconsistent with feature map");
  std::vector<double> scale_v(static_cast<std::size_t>(nq) * width);
  std::vector<double> ref_v(static_cast<std::size_t>(nq) * width);
  for (int q = 0; q < nq; ++q) {
    const auto [rx, ry] = map.reference_point(q % S);
    for (int h = 0; h < heads; ++h)
      for (int l = 0; l < levels; ++l)
        for (int p = 0; p < points; ++p) {
          const int idx = (h * levels + l) * points + p;
          const auto [lh, lw] = map.level_shapes[l];
          const std::size_t o = static_cast<std::size_t>(q) * width + 2 * idx;
          scale_v[o] = 1.0 / lw;
          scale_v[o + 1] = 1.0 / lh;
          ref_v[o] = rx;
          ref_v[o + 1] = ry;
        }
  }
  ag::Var offsets = offset_proj(query);
  return ag::add(ag::mul(offsets, ag::constant(nq, width, std::move(scale_v))), ag::constant(nq, width, std::move(ref_v)));
}

ag::Var DeformableAttention::attention_weights(const ag::Var& query) const {
  const int nq = query->rows;
  ag::Var logits = weight_proj(query);
  return ag::reshape(ag::softmax_rows(ag::reshape(logits, nq * heads, levels * points)), nq, heads * levels * points);
}

ag::Var DeformableAttention::operator()(const ag::Var& query, const ag::Var& value, const VisualFeatureMap& map) const {
  DeformableLayout layout{map.level_shapes, map.level_start_index, map.num_frames, heads, points};
  ag::Var v = value_proj(value);
  bool any_masked = false;
  for (auto m : map.ignore_mask) any_masked = any_masked || m;
  if (any_masked) {
    std::vector<double> keep(v->size());
    for (int r = 0; r < v->rows; ++r)
      for (int c = 0; c < v->cols; ++c) keep[static_cast<std::size_t>(r) * v->cols + c] = map.ignore_mask[r] ? 0.0 : 1.0;
    v = ag::mul(v, ag::constant(v->rows, v->cols, std::move(keep)));
  }
  return out_proj(ms_deform_attn(v, sampling_locations(query, map), attention_weights(query), layout));
}

}  // namespace stvg
