#include <random>

#include "doctest.h"

#include "oracles.hpp"
#include "reference.hpp"
#include "stvg/heads.hpp"
#include "test_support.hpp"

using namespace stvg;
using namespace stvg::testing;

namespace {

std::vector<double> random_distribution(int T, std::mt19937_64& g) {
  std::vector<double> p(T);
  double z = 0;
  for (double& v : p) z += (v = std::exp(std::normal_distribution<double>(0, 2)(g)));
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

TEST_CASE("box head refines anchors in logit space") {
  const ModelConfig cfg = tiny_config();
  nn::ParamStore store;
  nn::Rng rng(1);
  PredictionHeads heads(store, cfg, rng);
  std::mt19937_64 g(2);
  const int n = 8;
  const ag::Var q = ag::constant(n, cfg.d_model, random_values(n * cfg.d_model, g));
  const ag::Var anchors = ag::parameter(n, 4, random_values(n * 4, g, 0.05, 0.95));
  const ag::Var boxes = heads.refine_boxes(q, anchors);
  CHECK(max_abs_diff(boxes->value, anchors->value) < 1e-12);

  for (auto& l : heads.box_mlp.layers)
    for (double& w : l.weight->value) w = std::uniform_real_distribution<double>(-2, 2)(g);
  const ag::Var moved = heads.refine_boxes(q, anchors);
  for (double b : moved->value) {
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
  }
  for (auto& l : heads.box_mlp.layers)
    for (double& w : l.weight->value) w *= 0.2;
  const auto w = random_values(n * 4, g);
  const auto gc = check_gradients([&] { return weighted_sum(heads.refine_boxes(q, anchors), w); }, {anchors}, 32, g);
  CHECK(gc.pass_rate() == 1.0);
  CHECK(gc.worst < 1e-3);
}

TEST_CASE("query scores follow the contrastive formula") {
  const ModelConfig cfg = tiny_config();
  nn::ParamStore store;
  nn::Rng rng(1);
  PredictionHeads heads(store, cfg, rng);
  heads.score_bias->value[0] = -0.3;
  std::mt19937_64 g(3);
  const int n = 6, d = cfg.d_model;
  const ag::Var q = ag::constant(n, d, random_values(n * d, g));
  const TextFeatures t = random_text(3, d, g, 2);
  const ag::Var s = heads.scores(q, t);
  const ref::Mat pq = ref::linear(ref::of(q), heads.score_proj);
  for (int i = 0; i < n; ++i) {
    double best = -INFINITY;
    for (int j = 0; j < 3; ++j) {
      double dot = 0;
      for (int c = 0; c < d; ++c) dot += pq(i, c) * t.features->at(j, c);
      best = std::max(best, dot);
    }
    const double want = 1.0 / (1.0 + std::exp(-(best / std::sqrt(static_cast<double>(d)) - 0.3)));
    CHECK(s->value[i] == doctest::Approx(want).epsilon(1e-12));
    CHECK(s->value[i] > 0.0);
    CHECK(s->value[i] < 1.0);
  }
}

TEST_CASE("temporal head distributions") {
  const ModelConfig cfg = tiny_config();
  nn::ParamStore store;
  nn::Rng rng(1);
  PredictionHeads heads(store, cfg, rng);
  std::mt19937_64 g(4);
  const int T = 5, Q = 4, d = cfg.d_model;
  const ag::Var q = ag::constant(T * Q, d, random_values(T * Q * d, g));
  const auto dist = to_distributions(heads.temporal_head(q, T, Q));
  REQUIRE(dist.num_frames() == T);
  double ss = 0, se = 0;
  for (int t = 0; t < T; ++t) {
    CHECK(dist.tau_s[t] >= 0.0);
    CHECK(dist.tau_s[t] <= 1.0);
    ss += dist.tau_s[t];
    se += dist.tau_e[t];
  }
  CHECK(std::abs(ss - 1) < 1e-6);
  CHECK(std::abs(se - 1) < 1e-6);

  // The frame descriptor is the mean over that frame's queries.
  const ag::Var logits = heads.temporal_logits(q, T, Q);
  ref::Mat mean(T, d);
  for (int r = 0; r < T * Q; ++r)
    for (int c = 0; c < d; ++c) mean(r / Q, c) += q->at(r, c) / Q;
  ref::Mat h = mean;
  for (std::size_t i = 0; i < heads.temporal_mlp.layers.size(); ++i) {
    h = ref::linear(h, heads.temporal_mlp.layers[i]);
    if (i + 1 < heads.temporal_mlp.layers.size()) h = ref::relu(h);
  }
  CHECK(max_abs_diff(logits->value, h.v) < 1e-12);

  // Constant logits give the uniform distribution; shifts change nothing.
  auto& last = heads.temporal_mlp.layers.back();
  std::fill(last.weight->value.begin(), last.weight->value.end(), 0.0);
  last.bias->value = {0.7, -1.2};
  const auto uni = to_distributions(heads.temporal_head(q, T, Q));
  for (int t = 0; t < T; ++t) {
    CHECK(uni.tau_s[t] == doctest::Approx(1.0 / T).epsilon(1e-12));
    CHECK(uni.tau_e[t] == doctest::Approx(1.0 / T).epsilon(1e-12));
  }
  const ag::Var raw = ag::constant(2, T, random_values(2 * T, g));
  std::vector<double> shifted = raw->value;
  for (int t = 0; t < T; ++t) shifted[t] += 3.25;
  const auto a = ag::softmax_rows(raw), b = ag::softmax_rows(ag::constant(2, T, shifted));
  CHECK(max_abs_diff(a->value, b->value) < 1e-7);
}

TEST_CASE("extract_interval examples") {
  TemporalDistributions d{{0.7, 0.2, 0.1}, {0.1, 0.2, 0.7}};
  auto [iv, score] = extract_interval(d, true);
  CHECK(iv == TemporalInterval(0, 2));
  CHECK(interval_to_paper_indexing(iv) == std::pair{1, 3});
  CHECK(score == doctest::Approx(0.49));

  TemporalDistributions u{{0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}};
  std::tie(iv, score) = extract_interval(u, true);
  CHECK(iv == TemporalInterval(0, 1));
  CHECK(score == doctest::Approx(1.0 / 16));

  // Mass concentrated on an inverted pair is masked out.
  TemporalDistributions inv{{0.05, 0.05, 0.9}, {0.9, 0.05, 0.05}};
  std::tie(iv, score) = extract_interval(inv, true);
  CHECK(iv.start() < iv.end());
  std::tie(iv, score) = extract_interval(inv, false);
  CHECK(iv.start() <= iv.end());

  CHECK_THROWS_AS(extract_interval(TemporalDistributions{{1.0}, {1.0}}, true), NoValidIntervalError);
  std::tie(iv, score) = extract_interval(TemporalDistributions{{1.0}, {1.0}}, false);
  CHECK(iv.start() == 0);
  CHECK(iv.end() == 0);
}

TEST_CASE("extract_interval matches the exhaustive pair oracle") {
  std::mt19937_64 g(5);
  int mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int T = std::uniform_int_distribution<int>(2, 64)(g);
    TemporalDistributions d{random_distribution(T, g), random_distribution(T, g)};
    if (trial % 10 == 0) d.tau_e = d.tau_s;  // exercise ties
    for (bool strict : {true, false}) {
      const auto [iv, score] = extract_interval(d, strict);
      const auto want = oracle::best_interval(d.tau_s, d.tau_e, strict);
      mismatches += iv.start() != want.s || iv.end() != want.e || score != want.score;
      if (strict) CHECK(iv.start() < iv.end());
    }
    // Scaling tau_s never moves the argmax.
    auto scaled = d;
    for (double& v : scaled.tau_s) v *= 3.5;
    const auto a = extract_interval(d, true).first, b = extract_interval(scaled, true).first;
    mismatches += !(a == b);
  }
  CHECK(mismatches == 0);
}

TEST_CASE("extract_tube picks the top-scoring query per frame") {
  std::mt19937_64 g(6);
  for (int Q : {1, 4}) {
    const int T = 6;
    FramePredictions fp;
    fp.num_frames = T;
    fp.num_query = Q;
    fp.boxes = ag::constant(T * Q, 4, random_values(T * Q * 4, g, 0.1, 0.9));
    fp.scores = ag::constant(T * Q, 1, random_values(T * Q, g, 0.0, 1.0));
    const TemporalInterval iv(1, 4);
    const SpatioTemporalTube tube = extract_tube(fp, iv, 0.3);
    CHECK_NOTHROW(tube.validate());
    REQUIRE(tube.boxes.size() == 4);
    CHECK(tube.score == 0.3);
    for (int t = 1; t <= 4; ++t) {
      int arg = 0;
      for (int q = 1; q < Q; ++q)
        if (fp.scores->value[t * Q + q] > fp.scores->value[t * Q + arg]) arg = q;
      CHECK(tube.box_at(t) == fp.box(t, arg));
      CHECK(best_query(fp, t) == arg);
    }
    CHECK_THROWS(extract_tube(fp, TemporalInterval(3, 6), 0.0));
  }
}
