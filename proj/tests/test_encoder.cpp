#include <numeric>
#include <random>

#include "doctest.h"

#include "reference.hpp"
#include "test_support.hpp"

using namespace stvg;
using namespace stvg::testing;

namespace {

struct EncoderFixture {
  ModelConfig cfg = tiny_config();
  nn::ParamStore store;
  nn::Rng rng{11};
  EncoderLayer layer;
  EncoderFixture() { layer = EncoderLayer(store, "encoder.0", cfg, rng); }
  // Random perturbation so no projection sits at its initial value.
  void scramble(double scale = 0.3) {
    std::mt19937_64 g(5);
    for (auto& p : store.all())
      for (double& v : p.var->value) v += scale * std::uniform_real_distribution<double>(-1, 1)(g);
  }
};

}  // namespace

TEST_CASE("bilinear sample reads grid centres exactly and zero outside") {
  std::mt19937_64 g(1);
  const int h = 3, w = 5, d = 4;
  const auto v = random_values(static_cast<std::size_t>(h) * w * d, g);
  double out[4];
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bilinear_sample(v.data(), d, h, w, (x + 0.5) / w, (y + 0.5) / h, 0, d, out);
      for (int c = 0; c < d; ++c) CHECK(std::abs(out[c] - v[(y * w + x) * d + c]) < 1e-12);
    }
  bilinear_sample(v.data(), d, h, w, -0.5, 0.5, 0, d, out);
  for (double o : out) CHECK(o == 0.0);
  bilinear_sample(v.data(), d, h, w, 0.5, 1.5, 0, d, out);
  for (double o : out) CHECK(o == 0.0);
  ref::Mat m(h * w, d);
  m.v = v;
  for (int k = 0; k < 200; ++k) {
    const double x = std::uniform_real_distribution<double>(-0.2, 1.2)(g), y = std::uniform_real_distribution<double>(-0.2, 1.2)(g);
    bilinear_sample(v.data(), d, h, w, x, y, 0, d, out);
    const auto r = ref::bilinear(m, h, w, x, y);
    for (int c = 0; c < d; ++c) CHECK(std::abs(out[c] - r[c]) < 1e-12);
  }
}

TEST_CASE("deformable attention at initialisation matches the bilinear oracle") {
  EncoderFixture f;
  std::mt19937_64 g(2);
  const VisualFeatureMap vis = random_feature_map(2, f.cfg.d_model, g);
  const auto& da = f.layer.spatial_attn;
  // Zero offset weights and zero weight logits: uniform weights over the fan.
  for (double w : da.offset_proj.weight->value) REQUIRE(w == 0.0);
  for (double w : da.weight_proj.weight->value) REQUIRE(w == 0.0);
  for (double b : da.weight_proj.bias->value) REQUIRE(b == 0.0);
  const auto aw = da.attention_weights(vis.features);
  for (double a : aw->value) CHECK(a == doctest::Approx(1.0 / (f.cfg.n_levels * f.cfg.n_points)));

  const ag::Var out = da(vis.features, vis.features, vis);
  const ref::Mat want = ref::deformable(ref::of(vis.features), ref::of(vis.features), da, vis);
  CHECK(max_abs_diff(out->value, want.v) < 1e-5);

  // With the offset bias zeroed every point samples its reference point.
  f.layer.spatial_attn.offset_proj.zero_init();
  const ag::Var centred = da(vis.features, vis.features, vis);
  const ref::Mat want0 = ref::deformable(ref::of(vis.features), ref::of(vis.features), da, vis);
  CHECK(max_abs_diff(centred->value, want0.v) < 1e-5);
}

TEST_CASE("ms_deform_attn on exact grid centres recovers stored values") {
  std::mt19937_64 g(3);
  DeformableLayout layout{{{4, 4}, {2, 2}}, {0, 16}, 2, 2, 1};
  const int S = 20, d = 8, H = 2, L = 2, P = 1;
  const ag::Var value = ag::constant(2 * S, d, random_values(2 * S * d, g));
  const int nq = 2 * 3;
  std::vector<double> loc(nq * H * L * P * 2), w(nq * H * L * P, 0.0);
  std::vector<std::array<int, 2>> pick(nq * H);
  std::uniform_int_distribution<int> u4(0, 3), u2(0, 1);
  for (int q = 0; q < nq; ++q)
    for (int h = 0; h < H; ++h) {
      // Head h reads level h only, at one grid cell.
      const int l = h;
      const int side = l == 0 ? 4 : 2;
      const int x = l == 0 ? u4(g) : u2(g), y = l == 0 ? u4(g) : u2(g);
      pick[q * H + h] = {l, y * side + x};
      for (int ll = 0; ll < L; ++ll) {
        const int idx = (h * L + ll) * P;
        loc[(q * H * L * P + idx) * 2] = (x + 0.5) / side;
        loc[(q * H * L * P + idx) * 2 + 1] = (y + 0.5) / side;
        w[q * H * L * P + idx] = ll == l ? 1.0 : 0.0;
      }
    }
  const ag::Var out = ms_deform_attn(value, ag::constant(nq, H * L * P * 2, loc), ag::constant(nq, H * L * P, w), layout);
  const int dh = d / H;
  for (int q = 0; q < nq; ++q) {
    const int t = q / 3;
    for (int h = 0; h < H; ++h) {
      const auto [l, cell] = pick[q * H + h];
      const int row = t * S + layout.level_start_index[l] + cell;
      for (int c = 0; c < dh; ++c) CHECK(std::abs(out->at(q, h * dh + c) - value->at(row, h * dh + c)) < 1e-6);
    }
  }
}

TEST_CASE("ms_deform_attn gradients match finite differences") {
  std::mt19937_64 g(4);
  DeformableLayout layout{{{4, 4}, {2, 2}}, {0, 16}, 2, 2, 2};
  const int S = 20, d = 8, H = 2, L = 2, P = 2, nq = 2 * 5;
  const ag::Var value = ag::parameter(2 * S, d, random_values(2 * S * d, g));
  const ag::Var loc = ag::parameter(nq, H * L * P * 2, random_values(nq * H * L * P * 2, g, 0.05, 0.95));
  const ag::Var w = ag::parameter(nq, H * L * P, random_values(nq * H * L * P, g, 0.0, 1.0));
  const auto proj = random_values(nq * d, g);
  const auto gc = check_gradients([&] { return weighted_sum(ms_deform_attn(value, loc, w, layout), proj); },
                                  {value, loc, w}, 40, g, 1e-4, 1e-7);
  CHECK(gc.pass_rate() >= 0.95);
  MESSAGE("ms_deform_attn grad check ", gc.passed, "/", gc.checked, " worst ", gc.worst);
}

TEST_CASE("deformable attention rejects inconsistent level metadata") {
  EncoderFixture f;
  std::mt19937_64 g(6);
  const VisualFeatureMap vis = random_feature_map(1, f.cfg.d_model, g, 1);
  CHECK_THROWS_AS(f.layer.spatial_attn(vis.features, vis.features, vis), ConfigError);
}

TEST_CASE("temporal then spatial matches the loop reference") {
  EncoderFixture f;
  f.scramble();
  std::mt19937_64 g(7);
  VisualFeatureMap vis = random_feature_map(3, f.cfg.d_model, g);
  vis.ignore_mask[5] = vis.ignore_mask[27] = 1;
  for (bool temporal : {true, false}) {
    const ag::Var out = f.layer.temporal_then_spatial(vis, temporal);
    CHECK(max_abs_diff(out->value, ref::encoder_vision_mid(f.layer, vis, temporal).v) < 1e-9);
  }
}

TEST_CASE("T = 1 temporal attention is a single-key value pass") {
  EncoderFixture f;
  f.scramble();
  std::mt19937_64 g(8);
  const VisualFeatureMap vis = random_feature_map(1, f.cfg.d_model, g);
  const ag::Var x = vis.features;
  const auto& ta = f.layer.temporal_attn;
  const ag::Var h = f.layer.temporal_norm(x);
  const ag::Var attended = ta(h, h, h, ag::strided_groups(1, 20));
  const ag::Var direct = ta.out_proj(ta.v_proj(h));
  CHECK(max_abs_diff(attended->value, direct->value) < 1e-12);
}

TEST_CASE("text self-attention") {
  EncoderFixture f;
  f.scramble();
  std::mt19937_64 g(9);
  SUBCASE("L = 1 is the value path plus residual") {
    const TextFeatures t = random_text(1, f.cfg.d_model, g);
    const auto& a = f.layer.text_attn;
    const ag::Var want = ag::add(t.features, a.out_proj(a.v_proj(f.layer.text_norm(t.features))));
    CHECK(max_abs_diff(f.layer.text_self_attention(t)->value, want->value) < 1e-12);
  }
  SUBCASE("loop reference") {
    const TextFeatures t = random_text(4, f.cfg.d_model, g, 2);
    CHECK(max_abs_diff(f.layer.text_self_attention(t)->value, ref::encoder_text_mid(f.layer, t).v) < 1e-9);
  }
  SUBCASE("single-head dense formula") {
    const int L = 5, d = 8;
    const ag::Var q = ag::constant(L, d, random_values(L * d, g));
    const ag::Var k = ag::constant(L, d, random_values(L * d, g));
    const ag::Var v = ag::constant(L, d, random_values(L * d, g));
    const ag::Var out = ag::attention(q, k, v, 1, ag::single_group(L, L));
    const ref::Mat want = ref::attention(ref::of(q), ref::of(k), ref::of(v), 1, [](int, int) { return true; });
    CHECK(max_abs_diff(out->value, want.v) < 1e-6);
  }
  SUBCASE("padding does not change real tokens") {
    const TextFeatures t = random_text(4, f.cfg.d_model, g);
    TextFeatures padded = random_text(4, f.cfg.d_model, g, 3);
    std::copy(t.features->value.begin(), t.features->value.end(), padded.features->value.begin());
    const auto a = f.layer.text_self_attention(t)->value;
    const auto b = f.layer.text_self_attention(padded)->value;
    CHECK(max_abs_diff(a, std::vector<double>(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(a.size()))) < 1e-5);
  }
}

TEST_CASE("joint attention scores") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 4;
  cfg.n_heads = 1;
  nn::ParamStore store;
  nn::Rng rng(3);
  EncoderLayer e(store, "encoder.0", cfg, rng);
  auto identity = [](nn::Linear& l) {
    std::fill(l.weight->value.begin(), l.weight->value.end(), 0.0);
    std::fill(l.bias->value.begin(), l.bias->value.end(), 0.0);
    for (int i = 0; i < l.in; ++i) l.weight->value[i * l.out + i] = 1.0;
  };
  identity(e.proj_q_v);
  identity(e.proj_q_p);
  const ag::Var v = ag::constant(2, 4, {1, 0, 0, 0, 0, 1, 0, 0});
  TextFeatures p;
  p.features = ag::constant(2, 4, {1, 0, 0, 0, 0, 0, 0, 0});
  p.pad_mask = {0, 1};
  const JointScores js = e.joint_attention(v, p);
  REQUIRE(js.rows == 2);
  REQUIRE(js.cols == 2);
  CHECK(js.per_head[0][0] == doctest::Approx(0.5));
  CHECK(js.per_head[0][2] == 0.0);
  CHECK(std::isinf(js.per_head[0][1]));
  CHECK(js.per_head[0][1] < 0);

  EncoderFixture f;
  f.scramble();
  std::mt19937_64 g(10);
  const ag::Var vm = ag::constant(12, 16, random_values(12 * 16, g));
  const TextFeatures tm = random_text(3, 16, g, 1);
  const JointScores r = f.layer.joint_attention(vm, tm);
  const ref::Mat qv = ref::linear(ref::of(vm), f.layer.proj_q_v), qp = ref::linear(ref::of(tm.features), f.layer.proj_q_p);
  const int dk = 16 / f.layer.heads;
  double worst = 0;
  for (int h = 0; h < f.layer.heads; ++h)
    for (int i = 0; i < 12; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int c = 0; c < dk; ++c) s += qv(i, h * dk + c) * qp(j, h * dk + c);
        worst = std::max(worst, std::abs(r.per_head[h][i * 4 + j] - s / std::sqrt(static_cast<double>(dk))));
      }
  CHECK(worst < 1e-6);
}

TEST_CASE("bidirectional fusion") {
  EncoderFixture f;
  f.scramble();
  std::mt19937_64 g(12);
  VisualFeatureMap vis = random_feature_map(2, f.cfg.d_model, g);
  vis.ignore_mask[3] = 1;
  SUBCASE("single text token broadcasts its projected value") {
    const TextFeatures t = random_text(1, f.cfg.d_model, g, 2);
    const auto [msg_v, msg_p] = f.layer.fusion_messages(vis.features, vis, t.features, t);
    const ref::Mat pv = ref::linear(ref::layer_norm(ref::of(t.features), f.layer.fuse_norm_p), f.layer.proj_p);
    for (int r = 0; r < msg_v->rows; ++r)
      for (int c = 0; c < msg_v->cols; ++c) CHECK(std::abs(msg_v->at(r, c) - pv(0, c)) < 1e-12);
  }
  SUBCASE("loop reference, attention rows normalised") {
    const TextFeatures t = random_text(3, f.cfg.d_model, g, 1);
    ag::AttentionProbs v2t, t2v;
    const auto [msg_v, msg_p] = f.layer.fusion_messages(vis.features, vis, t.features, t, &v2t, &t2v);
    const ref::Fused want = ref::encoder_fusion(f.layer, ref::of(vis.features), vis.ignore_mask, ref::of(t.features), t.pad_mask);
    CHECK(max_abs_diff(msg_v->value, want.msg_v.v) < 1e-6);
    CHECK(max_abs_diff(msg_p->value, want.msg_p.v) < 1e-6);
    const auto [xv, xp] = f.layer.bidirectional_fusion(vis.features, vis, t.features, t);
    CHECK(max_abs_diff(xv->value, want.v.v) < 1e-6);
    CHECK(max_abs_diff(xp->value, want.p.v) < 1e-6);
    for (const auto* probs : {&v2t, &t2v})
      for (const auto& group : *probs)
        for (const auto& head : group) {
          const int cols = probs == &v2t ? 4 : 40;
          for (std::size_t r = 0; r < head.size() / cols; ++r) {
            double s = 0;
            for (int c = 0; c < cols; ++c) s += head[r * cols + c];
            CHECK(std::abs(s - 1.0) < 1e-6);
          }
          if (probs == &v2t)
            for (std::size_t r = 0; r < head.size() / cols; ++r) CHECK(head[r * cols + 3] == 0.0);
          else
            for (std::size_t r = 0; r < head.size() / cols; ++r) CHECK(head[r * cols + 3] == 0.0);
        }
  }
}

TEST_CASE("encoder composition, padding and permutation") {
  ModelConfig cfg = tiny_config();
  std::mt19937_64 g(13);
  SUBCASE("M = 0 is the identity") {
    cfg.encoder_layers = 0;
    nn::ParamStore store;
    nn::Rng rng(1);
    CrossModalEncoder enc(store, cfg, rng);
    const VisualFeatureMap vis = random_feature_map(2, cfg.d_model, g);
    const TextFeatures t = random_text(3, cfg.d_model, g);
    const auto [v, p] = enc.encode(vis, t);
    CHECK(v.features->value == vis.features->value);
    CHECK(p.features->value == t.features->value);
  }
  SUBCASE("M = 2 equals two single layers") {
    cfg.encoder_layers = 2;
    nn::ParamStore store;
    nn::Rng rng(1);
    CrossModalEncoder enc(store, cfg, rng);
    const VisualFeatureMap vis = random_feature_map(2, cfg.d_model, g);
    const TextFeatures t = random_text(3, cfg.d_model, g, 1);
    const auto [v, p] = enc.encode(vis, t);
    const auto s1 = enc.layer(0).forward(vis, t, true);
    const auto s2 = enc.layer(1).forward(s1.first, s1.second, true);
    CHECK(v.features->value == s2.first.features->value);
    CHECK(p.features->value == s2.second.features->value);
    CHECK(v.features->rows == vis.features->rows);
    CHECK(p.features->rows == t.features->rows);
  }
  SUBCASE("appended pad tokens never reach the outputs") {
    nn::ParamStore store;
    nn::Rng rng(1);
    CrossModalEncoder enc(store, cfg, rng);
    const VisualFeatureMap vis = random_feature_map(2, cfg.d_model, g);
    const TextFeatures t = random_text(3, cfg.d_model, g);
    TextFeatures padded = random_text(3, cfg.d_model, g, 4);
    std::copy(t.features->value.begin(), t.features->value.end(), padded.features->value.begin());
    const auto a = enc.encode(vis, t);
    const auto b = enc.encode(vis, padded);
    CHECK(max_abs_diff(a.first.features->value, b.first.features->value) < 1e-5);
    const auto& pb = b.second.features->value;
    CHECK(max_abs_diff(a.second.features->value, std::vector<double>(pb.begin(), pb.begin() + 3 * cfg.d_model)) < 1e-5);
  }
  SUBCASE("frame permutation equivariance without temporal attention") {
    cfg.encoder_layers = 2;
    cfg.encoder_temporal = false;
    nn::ParamStore store;
    nn::Rng rng(1);
    CrossModalEncoder enc(store, cfg, rng);
    const int T = 4, S = 20;
    const VisualFeatureMap vis = random_feature_map(T, cfg.d_model, g);
    const TextFeatures t = random_text(3, cfg.d_model, g);
    const auto base = enc.encode(vis, t);
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<int> perm(T);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), g);
      VisualFeatureMap pv = vis;
      pv.features = ag::constant(vis.features->rows, vis.features->cols,
                                 permute_frames(vis.features->value, perm, static_cast<std::size_t>(S) * cfg.d_model));
      const auto out = enc.encode(pv, t);
      CHECK(max_abs_diff(out.first.features->value,
                         permute_frames(base.first.features->value, perm, static_cast<std::size_t>(S) * cfg.d_model)) < 1e-5);
      CHECK(max_abs_diff(out.second.features->value, base.second.features->value) < 1e-5);
    }
    enc.set_temporal_enabled(true);
    CHECK(enc.temporal_enabled());
  }
}

TEST_CASE("one encoder layer passes the finite-difference check") {
  EncoderFixture f;
  f.scramble(0.1);
  std::mt19937_64 g(14);
  const VisualFeatureMap vis = random_feature_map(4, f.cfg.d_model, g);
  const TextFeatures t = random_text(4, f.cfg.d_model, g);
  const auto wv = random_values(vis.features->size(), g);
  const auto wp = random_values(t.features->size(), g);
  auto fn = [&] {
    const auto [v, p] = f.layer.forward(vis, t, true);
    return ag::add(weighted_sum(v.features, wv), weighted_sum(p.features, wp));
  };
  std::vector<ag::Var> leaves = {vis.features, t.features};
  for (auto& p : f.store.all()) leaves.push_back(p.var);
  const auto gc = check_gradients(fn, leaves, 6, g);
  MESSAGE("encoder layer grad check ", gc.passed, "/", gc.checked, " worst ", gc.worst);
  CHECK(gc.pass_rate() >= 0.95);
}
