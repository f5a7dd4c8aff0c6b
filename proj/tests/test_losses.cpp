#include <random>

#include "doctest.h"

#include "oracles.hpp"
#include "stvg/losses.hpp"
#include "test_support.hpp"

using namespace stvg;
using namespace stvg::testing;

namespace {

BoundingBox corners(double x0, double y0, double x1, double y1) {
  return BoundingBox{(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
}

GroundingAnnotation annotation(int s, int e, std::mt19937_64& g) {
  GroundingAnnotation a;
  a.video_id = "v";
  a.caption = "c";
  a.interval = TemporalInterval(s, e);
  for (int t = s; t <= e; ++t) a.boxes[t] = random_box(g, 0.1);
  return a;
}

}  // namespace

TEST_CASE("L1 loss") {
  const BoundingBox a{0.5, 0.5, 0.5, 0.5}, b{0.5, 0.5, 0.3, 0.3};
  CHECK(l1_loss({a}, {a}) == 0.0);
  CHECK(l1_loss({a}, {b}) == doctest::Approx(0.1));
  CHECK_THROWS_AS(l1_loss(std::vector<BoundingBox>{}, std::vector<BoundingBox>{}), IntervalError);
  std::mt19937_64 g(1);
  std::vector<BoundingBox> p, q;
  double s = 0;
  for (int i = 0; i < 50; ++i) {
    p.push_back(random_box(g));
    q.push_back(random_box(g));
    s += std::abs(p[i].cx - q[i].cx) + std::abs(p[i].cy - q[i].cy) + std::abs(p[i].w - q[i].w) + std::abs(p[i].h - q[i].h);
  }
  CHECK(std::abs(l1_loss(p, q) - s / 200) < 1e-9);
  std::vector<double> flat;
  for (const auto& b2 : p) flat.insert(flat.end(), {b2.cx, b2.cy, b2.w, b2.h});
  CHECK(std::abs(l1_loss(ag::constant(50, 4, flat), q)->scalar() - s / 200) < 1e-9);
}

TEST_CASE("GIoU loss") {
  const BoundingBox a = corners(0, 0, 0.5, 0.5), b = corners(0.5, 0.5, 1, 1);
  CHECK(giou(a, b) == doctest::Approx(-0.5));
  CHECK(giou_loss({a}, {b}) == doctest::Approx(1.5));
  CHECK(giou_loss({a}, {a}) == 0.0);
  CHECK_THROWS_AS(giou_loss({a}, {BoundingBox{0.5, 0.5, 0.0, 0.2}}), InvalidBoxError);

  std::mt19937_64 g(2);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const BoundingBox p = random_box(g, 0.01), q = random_box(g, 0.01);
    const double l = giou_loss({p}, {q});
    worst = std::max(worst, std::abs(l - (1 - oracle::giou(p, q))));
    CHECK(l >= 0.0);
    CHECK(l <= 2.0);
    CHECK(l > 1e-9);
    CHECK(giou_loss({p}, {p}) == 0.0);
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("GIoU gradient matches finite differences") {
  std::mt19937_64 g(3);
  std::vector<BoundingBox> gt;
  std::vector<double> flat;
  for (int i = 0; i < 6; ++i) {
    gt.push_back(random_box(g, 0.1));
    const BoundingBox p = random_box(g, 0.1);
    flat.insert(flat.end(), {p.cx, p.cy, p.w, p.h});
  }
  const ag::Var pred = ag::parameter(6, 4, flat);
  const auto gc = check_gradients([&] { return giou_loss(pred, gt); }, {pred}, 24, g);
  CHECK(gc.pass_rate() >= 0.95);
}

TEST_CASE("Gaussian heatmaps") {
  const auto hm = make_heatmaps(TemporalInterval(2, 4), 5, 1.0);
  double z = 0;
  for (int t = 0; t < 5; ++t) z += std::exp(-(t - 2.0) * (t - 2.0) / 2.0);
  for (int t = 0; t < 5; ++t) CHECK(std::abs(hm.pi_s[t] - std::exp(-(t - 2.0) * (t - 2.0) / 2.0) / z) < 1e-9);
  CHECK(hm.pi_s[1] == doctest::Approx(hm.pi_s[3]).epsilon(1e-15));
  double ss = 0, se = 0;
  for (int t = 0; t < 5; ++t) {
    ss += hm.pi_s[t];
    se += hm.pi_e[t];
    CHECK(hm.pi_s[t] <= hm.pi_s[2]);
    CHECK(hm.pi_e[t] <= hm.pi_e[4]);
    CHECK(hm.pi_s[t] >= 0.0);
  }
  CHECK(std::abs(ss - 1) < 1e-8);
  CHECK(std::abs(se - 1) < 1e-8);
  CHECK_THROWS_AS(make_heatmaps(TemporalInterval(2, 4), 5, 0.0), ConfigError);
  CHECK_THROWS(make_heatmaps(TemporalInterval(2, 5), 5, 1.0));
}

TEST_CASE("KL divergence") {
  CHECK(kl_divergence({0.5, 0.5}, {0.75, 0.25}) == doctest::Approx(0.14384).epsilon(1e-4));
  std::mt19937_64 g(4);
  for (int i = 0; i < 1000; ++i) {
    const int T = std::uniform_int_distribution<int>(2, 32)(g);
    auto p = random_values(T, g, 0.01, 1.0), q = random_values(T, g, 0.01, 1.0);
    double zp = 0, zq = 0;
    for (int t = 0; t < T; ++t) zp += p[t], zq += q[t];
    for (int t = 0; t < T; ++t) p[t] /= zp, q[t] /= zq;
    CHECK(kl_divergence(p, q) >= 0.0);
    CHECK(std::abs(kl_divergence(p, p)) < 1e-8);
    const ag::Var probs = ag::constant(1, T, q);
    CHECK(std::abs(kl_divergence(p, probs)->scalar() - kl_divergence(p, q)) < 1e-12);
  }
  // Zero predicted mass is floored rather than infinite.
  CHECK(std::isfinite(kl_divergence({0.5, 0.5}, {1.0, 0.0})));
  const auto [ks, ke] = temporal_kl_loss({{0.75, 0.25}, {0.5, 0.5}}, {{0.5, 0.5}, {0.5, 0.5}});
  CHECK(ks == doctest::Approx(0.14384).epsilon(1e-4));
  CHECK(ke == 0.0);
}

TEST_CASE("matching picks the lowest-cost query") {
  const ModelConfig cfg;
  FramePredictions fp;
  fp.num_frames = 1;
  fp.num_query = 3;
  fp.boxes = ag::constant(3, 4, {0.2, 0.2, 0.1, 0.1, 0.5, 0.5, 0.3, 0.3, 0.5, 0.5, 0.3, 0.3});
  fp.scores = ag::constant(3, 1, {0.9, 0.1, 0.2});
  const BoundingBox gt{0.52, 0.5, 0.3, 0.3};
  CHECK(matched_query(fp, 0, gt, cfg) == 1);
  CHECK(matching_cost(gt, gt, cfg) == 0.0);
  const BoundingBox far{0.9, 0.9, 0.1, 0.1};
  CHECK(matching_cost(far, gt, cfg) > matching_cost(fp.box(0, 1), gt, cfg));
}

TEST_CASE("proposal loss targets reference points inside the box") {
  std::mt19937_64 g(5);
  ProposalPrediction p;
  p.reference_points = {{0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};
  const int T = 3, S = 4, d = 16;
  p.relevance = ag::parameter(T * S, 1, random_values(T * S, g, -4, 4));
  GroundingAnnotation a;
  a.interval = TemporalInterval(1, 2);
  a.boxes[1] = corners(0.0, 0.0, 0.5, 0.5);   // contains point 0
  a.boxes[2] = corners(0.25, 0.25, 1.0, 1.0);  // contains all four (boundary inclusive)
  std::vector<double> target(T * S, 0.0);
  target[1 * S + 0] = 1;
  for (int i = 0; i < S; ++i) target[2 * S + i] = 1;
  double want = 0;
  for (int r = 0; r < T * S; ++r) {
    const double s = 1 / (1 + std::exp(-p.relevance->value[r] / 4.0));
    want -= target[r] * std::log(s) + (1 - target[r]) * std::log(1 - s);
  }
  CHECK(proposal_loss(p, a, d)->scalar() == doctest::Approx(want / (T * S)).epsilon(1e-12));
  const auto gc = check_gradients([&] { return proposal_loss(p, a, d); }, {p.relevance}, 12, g);
  CHECK(gc.pass_rate() == 1.0);
}

TEST_CASE("total loss") {
  ModelConfig cfg = tiny_config();
  std::mt19937_64 g(6);
  const int T = 6, Q = 3;
  const GroundingAnnotation ann = annotation(1, 4, g);
  const auto hm = make_heatmaps(ann.interval, T, cfg.sigma);

  SUBCASE("perfect prediction is zero") {
    std::vector<double> boxes, scores(T * Q, 0.0);
    for (int t = 0; t < T; ++t)
      for (int q = 0; q < Q; ++q) {
        const BoundingBox b = ann.interval.contains(t) && q == 1 ? ann.boxes.at(t) : BoundingBox{0.1, 0.1, 0.05, 0.05};
        boxes.insert(boxes.end(), {b.cx, b.cy, b.w, b.h});
        if (ann.interval.contains(t) && q == 1) scores[t * Q + q] = 1.0;
      }
    std::vector<double> temporal = hm.pi_s;
    temporal.insert(temporal.end(), hm.pi_e.begin(), hm.pi_e.end());
    LayerPrediction lp{{T, Q, ag::constant(T * Q, 4, boxes), ag::constant(T * Q, 1, scores)}, ag::constant(2, T, temporal)};
    const LossReport r = total_loss({lp, lp}, ann, cfg);
    CHECK(std::abs(r.total) < 1e-6);
    CHECK(r.layers.size() == 2);
  }

  // Random predictions through differentiable logits.
  const ag::Var box_logits = ag::parameter(T * Q, 4, random_values(T * Q * 4, g, -2, 2));
  const ag::Var score_logits = ag::parameter(T * Q, 1, random_values(T * Q, g, -2, 2));
  const ag::Var time_logits = ag::parameter(2, T, random_values(2 * T, g, -2, 2));
  auto predict = [&] {
    LayerPrediction lp{{T, Q, ag::sigmoid(box_logits), ag::sigmoid(score_logits)}, ag::softmax_rows(time_logits)};
    return lp;
  };

  SUBCASE("report components add up") {
    const LossReport r = total_loss({predict()}, ann, cfg);
    CHECK(r.total == doctest::Approx(cfg.lambda_l1 * r.l1 + cfg.lambda_giou * r.giou + r.kl_start + r.kl_end +
                                     cfg.lambda_conf * r.conf));
    const LossReport two = total_loss({predict(), predict()}, ann, cfg);
    CHECK(two.total == doctest::Approx(2 * r.total));
    CHECK(r.l1 >= 0.0);
    CHECK(r.giou >= 0.0);
    CHECK(r.giou <= 2.0);
    cfg.lambda_l1 = cfg.lambda_giou = cfg.lambda_conf = 0.0;
    const LossReport z = total_loss({predict()}, ann, cfg);
    CHECK(z.total == doctest::Approx(z.kl_start + z.kl_end).epsilon(1e-12));
  }

  SUBCASE("boxes outside the interval do not move spatial terms") {
    const LossReport r = total_loss({predict()}, ann, cfg);
    for (int t : {0, 5})
      for (int k = 0; k < Q * 4; ++k) box_logits->value[t * Q * 4 + k] += 1.7;
    const LossReport s = total_loss({predict()}, ann, cfg);
    CHECK(s.l1 == r.l1);
    CHECK(s.giou == r.giou);
  }

  SUBCASE("finite-difference gradient") {
    ProposalPrediction props;
    props.reference_points = {{0.25, 0.25}, {0.75, 0.75}};
    props.relevance = ag::parameter(T * 2, 1, random_values(T * 2, g, -3, 3));
    auto fn = [&] { return total_loss({predict(), predict()}, ann, cfg, &props).total_var; };
    const auto gc = check_gradients(fn, {box_logits, score_logits, time_logits, props.relevance}, 40, g);
    MESSAGE("total loss grad check ", gc.passed, "/", gc.checked, " worst ", gc.worst);
    CHECK(gc.pass_rate() >= 0.95);
  }

  SUBCASE("the KL value matches the distributions") {
    const LossReport r = total_loss({predict()}, ann, cfg);
    const auto probs = ag::softmax_rows(time_logits);
    const auto dist = to_distributions(probs);
    CHECK(r.kl_start == doctest::Approx(kl_divergence(hm.pi_s, dist.tau_s)).epsilon(1e-12));
    CHECK(r.kl_end == doctest::Approx(kl_divergence(hm.pi_e, dist.tau_e)).epsilon(1e-12));
  }
}
