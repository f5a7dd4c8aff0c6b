#include "stvg/losses.hpp"

#include <algorithm>
#include <cmath>

namespace stvg {
namespace {

struct Dual {
  double v = 0, d = 0;
};
Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
Dual operator*(double s, Dual a) { return {s * a.v, s * a.d}; }
Dual operator+(Dual a, double b) { return {a.v + b, a.d}; }

double value_of(double x) { return x; }
double value_of(Dual x) { return x.v; }
Dual lift(double x, Dual) { return {x, 0}; }
double lift(double x, double) { return x; }

template <class S>
S smin(S a, S b) { return value_of(a) <= value_of(b) ? a : b; }
template <class S>
S smax(S a, S b) { return value_of(a) >= value_of(b) ? a : b; }

template <class S>
S giou_t(S cx, S cy, S w, S h, const BoundingBox& g) {
  const S ax0 = cx - 0.5 * w, ax1 = cx + 0.5 * w;
  const S ay0 = cy - 0.5 * h, ay1 = cy + 0.5 * h;
  const S bx0 = lift(g.x0(), cx), bx1 = lift(g.x1(), cx);
  const S by0 = lift(g.y0(), cx), by1 = lift(g.y1(), cx);
  const S zero = lift(0.0, cx);
  const S iw = smax(zero, smin(ax1, bx1) - smax(ax0, bx0));
  const S ih = smax(zero, smin(ay1, by1) - smax(ay0, by0));
  const S inter = iw * ih;
  const S uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
  const S cw = smax(ax1, bx1) - smin(ax0, bx0);
  const S ch = smax(ay1, by1) - smin(ay0, by0);
  const S c = cw * ch;
  return inter / uni - (c - uni) / c;
}

void check_pairs(std::size_t n, std::size_t m) {
  if (n == 0) throw IntervalError("spatial loss over an empty interval");
  if (n != m) throw std::invalid_argument("spatial loss: prediction and ground truth counts differ");
}

void check_gt(const BoundingBox& g) {
  if (!(g.w > 0.0 && g.h > 0.0)) throw InvalidBoxError("zero-area ground-truth box");
}

}  // namespace

GaussianHeatmaps make_heatmaps(const TemporalInterval& interval, int num_frames, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("heatmap sigma must be positive");
  interval.check_within(num_frames);
  auto bump = [&](int center) {
    std::vector<double> p(num_frames);
    double z = 0.0;
    for (int t = 0; t < num_frames; ++t) {
      const double u = t - center;
      p[t] = std::exp(-u * u / (2.0 * sigma * sigma));
      z += p[t];
    }
    for (double& v : p) v /= z;
    return p;
  };
  return {bump(interval.start()), bump(interval.end())};
}

double l1_loss(const std::vector<BoundingBox>& pred, const std::vector<BoundingBox>& gt) {
  check_pairs(pred.size(), gt.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    s += std::abs(pred[i].cx - gt[i].cx) + std::abs(pred[i].cy - gt[i].cy) + std::abs(pred[i].w - gt[i].w) +
         std::abs(pred[i].h - gt[i].h);
  return s / (4.0 * static_cast<double>(pred.size()));
}

double giou(const BoundingBox& a, const BoundingBox& b) { return giou_t(a.cx, a.cy, a.w, a.h, b); }

double giou_loss(const std::vector<BoundingBox>& pred, const std::vector<BoundingBox>& gt) {
  check_pairs(pred.size(), gt.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    check_gt(gt[i]);
    s += 1.0 - giou(pred[i], gt[i]);
  }
  return s / static_cast<double>(pred.size());
}

double kl_divergence(const std::vector<double>& target, const std::vector<double>& pred) {
  if (target.size() != pred.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  double s = 0.0;
  for (std::size_t t = 0; t < target.size(); ++t)
    if (target[t] > 0.0) s += target[t] * (std::log(target[t]) - std::log(std::max(pred[t], kLogFloor)));
  return s;
}

std::pair<double, double> temporal_kl_loss(const TemporalDistributions& pred, const GaussianHeatmaps& target) {
  return {kl_divergence(target.pi_s, pred.tau_s), kl_divergence(target.pi_e, pred.tau_e)};
}

ag::Var l1_loss(const ag::Var& pred, const std::vector<BoundingBox>& gt) {
  check_pairs(static_cast<std::size_t>(pred->rows), gt.size());
  std::vector<double> g;
  g.reserve(gt.size() * 4);
  for (const auto& b : gt) g.insert(g.end(), {b.cx, b.cy, b.w, b.h});
  return ag::mean(ag::abs(ag::sub(pred, ag::constant(pred->rows, 4, std::move(g)))));
}

ag::Var giou_loss(const ag::Var& pred, const std::vector<BoundingBox>& gt) {
  check_pairs(static_cast<std::size_t>(pred->rows), gt.size());
  for (const auto& g : gt) check_gt(g);
  const int n = pred->rows;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* b = pred->row(i);
    s += 1.0 - giou_t(b[0], b[1], b[2], b[3], gt[i]);
  }
  return ag::custom_op(pred, 1, 1, {s / n}, [gt, n](const ag::Node& in, const ag::Node& out, double* g) {
    const double scale = -out.grad[0] / n;
    for (int i = 0; i < n; ++i) {
      const double* b = in.row(i);
      for (int k = 0; k < 4; ++k) {
        Dual x[4];
        for (int j = 0; j < 4; ++j) x[j] = {b[j], j == k ? 1.0 : 0.0};
        g[static_cast<std::size_t>(i) * 4 + k] += scale * giou_t(x[0], x[1], x[2], x[3], gt[i]).d;
      }
    }
  });
}

ag::Var kl_divergence(const std::vector<double>& target, const ag::Var& probs) {
  if (static_cast<int>(target.size()) != probs->cols || probs->rows != 1)
    throw std::invalid_argument("kl_divergence: shape mismatch");
  double entropy_term = 0.0;
  for (double p : target)
    if (p > 0.0) entropy_term += p * std::log(p);
  ag::Var cross = ag::sum(ag::mul(ag::constant(1, probs->cols, target), ag::log_floor(probs, kLogFloor)));
  return ag::add(ag::scale(cross, -1.0), ag::constant(1, 1, {entropy_term}));
}

namespace {

ag::Var binary_cross_entropy(const ag::Var& probs, const std::vector<double>& target) {
  const int n = probs->rows * probs->cols;
  std::vector<double> neg(target.size());
  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = 1.0 - target[i];
  ag::Var y = ag::constant(probs->rows, probs->cols, target);
  ag::Var ny = ag::constant(probs->rows, probs->cols, std::move(neg));
  ag::Var one_minus = ag::sub(ag::constant(probs->rows, probs->cols, std::vector<double>(n, 1.0)), probs);
  ag::Var ll = ag::add(ag::mul(y, ag::log_floor(probs, kLogFloor)), ag::mul(ny, ag::log_floor(one_minus, kLogFloor)));
  return ag::scale(ag::mean(ll), -1.0);
}

}  // namespace

double matching_cost(const BoundingBox& pred, const BoundingBox& gt, const ModelConfig& config) {
  const double l1 = (std::abs(pred.cx - gt.cx) + std::abs(pred.cy - gt.cy) + std::abs(pred.w - gt.w) + std::abs(pred.h - gt.h)) / 4.0;
  return config.lambda_l1 * l1 + config.lambda_giou * (1.0 - giou(pred, gt));
}

int matched_query(const FramePredictions& frames, int t, const BoundingBox& gt, const ModelConfig& config) {
  int best = 0;
  double best_cost = matching_cost(frames.box(t, 0), gt, config);
  for (int q = 1; q < frames.num_query; ++q) {
    const double c = matching_cost(frames.box(t, q), gt, config);
    if (c < best_cost) {
      best_cost = c;
      best = q;
    }
  }
  return best;
}

ag::Var proposal_loss(const ProposalPrediction& proposals, const GroundingAnnotation& annotation, int d_model) {
  const int S = static_cast<int>(proposals.reference_points.size());
  if (S == 0 || proposals.relevance->rows % S != 0) throw std::invalid_argument("proposal_loss: shape mismatch");
  const int T = proposals.relevance->rows / S;
  annotation.interval.check_within(T);
  std::vector<double> target(static_cast<std::size_t>(T) * S, 0.0);
  for (int t = annotation.interval.start(); t <= annotation.interval.end(); ++t) {
    const BoundingBox& g = annotation.boxes.at(t);
    for (int i = 0; i < S; ++i) {
      const auto [x, y] = proposals.reference_points[i];
      if (x >= g.x0() && x <= g.x1() && y >= g.y0() && y <= g.y1()) target[static_cast<std::size_t>(t) * S + i] = 1.0;
    }
  }
  ag::Var probs = ag::sigmoid(ag::scale(proposals.relevance, 1.0 / std::sqrt(static_cast<double>(d_model))));
  return binary_cross_entropy(probs, target);
}

LossReport total_loss(const std::vector<LayerPrediction>& layers, const GroundingAnnotation& annotation,
                      const ModelConfig& config, const ProposalPrediction* proposals) {
  if (layers.empty()) throw std::invalid_argument("total_loss: no predictions");
  LossReport report;
  std::vector<ag::Var> totals;
  for (const auto& layer : layers) {
    const FramePredictions& fp = layer.frames;
    const int T = fp.num_frames, Q = fp.num_query;
    const TemporalInterval& iv = annotation.interval;
    iv.check_within(T);
    const GaussianHeatmaps target = make_heatmaps(iv, T, config.sigma);

    std::vector<int> rows;
    std::vector<BoundingBox> gt;
    std::vector<double> conf_target(static_cast<std::size_t>(T) * Q, 0.0);
    for (int t = iv.start(); t <= iv.end(); ++t) {
      const int q = matched_query(fp, t, annotation.boxes.at(t), config);
      rows.push_back(t * Q + q);
      gt.push_back(annotation.boxes.at(t));
      conf_target[static_cast<std::size_t>(t) * Q + q] = 1.0;
    }
    ag::Var sup = ag::gather_rows(fp.boxes, rows);
    ag::Var l1 = l1_loss(sup, gt);
    ag::Var gi = giou_loss(sup, gt);
    ag::Var kls = kl_divergence(target.pi_s, ag::slice_rows(layer.temporal, 0, 1));
    ag::Var kle = kl_divergence(target.pi_e, ag::slice_rows(layer.temporal, 1, 2));

    ag::Var conf = binary_cross_entropy(fp.scores, conf_target);

    std::vector<ag::Var> terms = {ag::scale(l1, config.lambda_l1), ag::scale(gi, config.lambda_giou), kls, kle,
                                  ag::scale(conf, config.lambda_conf)};
    ag::Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = ag::add(total, terms[i]);

    LayerLoss ll_report{l1->scalar(), gi->scalar(), kls->scalar(), kle->scalar(), conf->scalar(), total->scalar()};
    report.layers.push_back(ll_report);
    totals.push_back(total);
  }
  const LayerLoss& last = report.layers.back();
  report.l1 = last.l1;
  report.giou = last.giou;
  report.kl_start = last.kl_start;
  report.kl_end = last.kl_end;
  report.conf = last.conf;
  report.total_var = totals[0];
  for (std::size_t i = 1; i < totals.size(); ++i) report.total_var = ag::add(report.total_var, totals[i]);
  if (proposals) {
    ag::Var p = proposal_loss(*proposals, annotation, config.d_model);
    report.proposal = p->scalar();
    report.total_var = ag::add(report.total_var, ag::scale(p, config.lambda_conf));
  }
  report.total = report.total_var->scalar();
  return report;
}

}  // namespace stvg
