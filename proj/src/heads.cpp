#include "stvg/heads.hpp"

#include <algorithm>
#include <cmath>

namespace stvg {

BoundingBox FramePredictions::box(int t, int q) const {
  const double* b = boxes->row(t * num_query + q);
  return BoundingBox{b[0], b[1], b[2], b[3]};
}

PredictionHeads::PredictionHeads(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng) {
  const auto g = nn::ParamGroup::Heads;
  const int d = cfg.d_model;
  box_mlp = nn::Mlp(store, "heads.box", g, d, d, 4, 3, rng);
  box_mlp.zero_last();
  score_proj = nn::Linear(store, "heads.score_proj", g, d, d, rng);
  score_bias = store.add("heads.score_bias", g, 1, 1, {0.0});
  temporal_mlp = nn::Mlp(store, "heads.temporal", g, d, d, 2, 3, rng);
}

ag::Var PredictionHeads::refine_boxes(const ag::Var& queries, const ag::Var& anchors) const {
  return ag::sigmoid(ag::add(ag::inverse_sigmoid(anchors), box_mlp(queries)));
}

ag::Var PredictionHeads::scores(const ag::Var& queries, const TextFeatures& text) const {
  ag::Var sim = ag::matmul(score_proj(queries), ag::transpose(text.features));
  ag::Var best = ag::masked_row_max(sim, text.pad_mask);
  const double inv = 1.0 / std::sqrt(static_cast<double>(queries->cols));
  return ag::sigmoid(ag::add_row(ag::scale(best, inv), score_bias));
}

FramePredictions PredictionHeads::box_head(const ag::Var& queries, const ag::Var& anchors, const TextFeatures& text,
                                           int num_frames, int num_query) const {
  FramePredictions fp;
  fp.num_frames = num_frames;
  fp.num_query = num_query;
  fp.boxes = refine_boxes(queries, anchors);
  fp.scores = scores(queries, text);
  return fp;
}

ag::Var PredictionHeads::temporal_logits(const ag::Var& queries, int /*num_frames*/, int num_query) const {
  return temporal_mlp(ag::group_mean_rows(queries, num_query));
}

ag::Var PredictionHeads::temporal_head(const ag::Var& queries, int num_frames, int num_query) const {
  return ag::softmax_rows(ag::transpose(temporal_logits(queries, num_frames, num_query)));
}

TemporalDistributions to_distributions(const ag::Var& temporal_probs) {
  const int T = temporal_probs->cols;
  TemporalDistributions d;
  d.tau_s.assign(temporal_probs->value.begin(), temporal_probs->value.begin() + T);
  d.tau_e.assign(temporal_probs->value.begin() + T, temporal_probs->value.begin() + 2 * T);
  return d;
}

std::pair<TemporalInterval, double> extract_interval(const TemporalDistributions& dist, bool strict) {
  const int T = dist.num_frames();
  if (T < 1 || static_cast<int>(dist.tau_e.size()) != T) throw NoValidIntervalError("empty or mismatched distributions");
  if (strict && T < 2) throw NoValidIntervalError("strict interval needs at least two frames");

  // best_s: first index of the maximum of tau_s over the admissible prefix.
  int best_s = -1, out_s = -1, out_e = -1;
  double best = -1.0;
  for (int e = 0; e < T; ++e) {
    const int last_s = strict ? e - 1 : e;
    if (last_s >= 0 && (best_s < 0 || dist.tau_s[last_s] > dist.tau_s[best_s])) best_s = last_s;
    if (best_s < 0) continue;
    const double p = dist.tau_s[best_s] * dist.tau_e[e];
    if (out_e < 0 || p > best || (p == best && (best_s < out_s || (best_s == out_s && e < out_e)))) {
      best = p;
      out_s = best_s;
      out_e = e;
    }
  }
  return {TemporalInterval(out_s, out_e, strict), best};
}

int best_query(const FramePredictions& frames, int t) {
  int best = 0;
  for (int q = 1; q < frames.num_query; ++q)
    if (frames.score(t, q) > frames.score(t, best)) best = q;
  return best;
}

SpatioTemporalTube extract_tube(const FramePredictions& frames, const TemporalInterval& interval, double score) {
  interval.check_within(frames.num_frames);
  SpatioTemporalTube tube;
  tube.interval = interval;
  tube.score = score;
  for (int t = interval.start(); t <= interval.end(); ++t) tube.boxes.push_back(frames.box(t, best_query(frames, t)));
  return tube;
}

}  // namespace stvg
