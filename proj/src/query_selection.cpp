#include "stvg/query_selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "stvg/kernels.hpp"

namespace stvg {

std::vector<double> relevance_scores(const VisualFeatureMap& visual, const TextFeatures& text) {
  const auto& V = *visual.features;
  const auto& P = *text.features;
  const auto& K = kernels::active();
  std::vector<double> out(V.rows, -std::numeric_limits<double>::infinity());
  for (int r = 0; r < V.rows; ++r)
    for (int j = 0; j < P.rows; ++j) {
      if (text.pad_mask[j]) continue;
      out[r] = std::max(out[r], K.dot(V.row(r), P.row(j), V.cols));
    }
  return out;
}

std::vector<int> top_k(const double* scores, int n, int k) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [scores](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  idx.resize(k);
  return idx;
}

BoundingBox proposal_box(const VisualFeatureMap& visual, int position) {
  const auto [x, y] = visual.reference_point(position);
  const double size = std::min(0.1 * std::pow(2.0, visual.level_of(position)), 1.0);
  return BoundingBox{x, y, size, size};
}

QuerySelection::QuerySelection(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng)
    : d_model_(cfg.d_model), num_query_(cfg.num_query), temporal_pe_(cfg.temporal_pe) {
  const auto g = nn::ParamGroup::QuerySelection;
  const int d = cfg.d_model;
  enc_output = nn::Linear(store, "query.enc_output", g, d, d, rng);
  enc_norm = nn::LayerNorm(store, "query.enc_norm", g, d);
  anchor_head = nn::Mlp(store, "query.anchor_head", g, d, d, 4, 3, rng);
  anchor_head.zero_last();
  content = store.add("query.content", g, num_query_, d, nn::uniform_values(static_cast<std::size_t>(num_query_) * d, 1.0, rng));
  ref_point_head = nn::Mlp(store, "query.ref_point_head", g, 2 * d, d, d, 2, rng);
}

QuerySet QuerySelection::select(const VisualFeatureMap& visual, const TextFeatures& text) const {
  const int T = visual.num_frames;
  const int S = visual.positions_per_frame();
  const int Q = num_query_;
  if (Q > S) throw ConfigError("num_query (" + std::to_string(Q) + ") exceeds positions per frame (" + std::to_string(S) + ")");

  const std::vector<double> rel = relevance_scores(visual, text);
  QuerySet qs;
  qs.num_frames = T;
  qs.num_query = Q;
  qs.selected_indices.reserve(static_cast<std::size_t>(T) * Q);
  std::vector<int> rows;
  std::vector<double> prior;
  for (int t = 0; t < T; ++t) {
    std::vector<double> frame_scores(rel.begin() + static_cast<std::ptrdiff_t>(t) * S,
                                     rel.begin() + static_cast<std::ptrdiff_t>(t + 1) * S);
    if (!visual.ignore_mask.empty())
      for (int i = 0; i < S; ++i)
        if (visual.ignore_mask[static_cast<std::size_t>(t) * S + i]) frame_scores[i] = -std::numeric_limits<double>::infinity();
    for (int i : top_k(frame_scores.data(), S, Q)) {
      qs.selected_indices.push_back(i);
      rows.push_back(t * S + i);
      const BoundingBox b = proposal_box(visual, i);
      prior.insert(prior.end(), {b.cx, b.cy, b.w, b.h});
    }
  }

  ag::Var selected = ag::gather_rows(visual.features, rows);
  ag::Var delta = anchor_head(enc_norm(enc_output(selected)));
  ag::Var prior_logit = ag::inverse_sigmoid(ag::constant(T * Q, 4, std::move(prior)));
  qs.anchors = ag::sigmoid(ag::add(prior_logit, delta));
  qs.relevance = ag::masked_row_max(ag::matmul(visual.features, ag::transpose(text.features)), text.pad_mask);
  for (int i = 0; i < S; ++i) qs.reference_points.push_back(visual.reference_point(i));
  qs.content = ag::tile_rows(content, T);
  qs.positional = anchor_to_positional(qs.anchors, T, Q);
  return qs;
}

ag::Var QuerySelection::anchor_to_positional(const ag::Var& anchors, int num_frames, int num_query) const {
  const int n = anchors->rows;
  const int half = d_model_ / 2;
  std::vector<double> code(static_cast<std::size_t>(n) * 4 * half);
  for (int r = 0; r < n; ++r) {
    const auto e = box_sine_embedding(anchors->row(r), half);
    std::copy(e.begin(), e.end(), code.begin() + static_cast<std::size_t>(r) * 4 * half);
  }
  ag::Var pos = ref_point_head(ag::constant(n, 4 * half, std::move(code)));
  if (temporal_pe_) {
    const auto pe = temporal_positional_encoding(num_frames, d_model_);
    std::vector<double> tiled(static_cast<std::size_t>(n) * d_model_);
    for (int r = 0; r < n; ++r) {
      const int t = r / num_query;
      std::copy_n(pe.begin() + static_cast<std::ptrdiff_t>(t) * d_model_, d_model_, tiled.begin() + static_cast<std::ptrdiff_t>(r) * d_model_);
    }
    pos = ag::add(pos, ag::constant(n, d_model_, std::move(tiled)));
  }
  return pos;
}

}  // namespace stvg
